//! Test-split evaluation on the original load scale.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use chrono::NaiveDateTime;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::baseline::Baseline;
use super::split_panels;
use crate::data::ingest::{format_timestamp, parse_timestamp};
use crate::data::{interpolate_missing, window_starts, TimeSeriesPanel};
use crate::error::{Error, Result};
use crate::model::{extract_window, EvLlm, PreparedWindow, Window};
use crate::numerics::Tensor;

const PREDICT_BATCH: usize = 16;

/// Forecast and ground truth for one test window, both `n × H`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPrediction {
    /// Absolute panel row of the window's first history hour.
    pub start: usize,
    pub forecast_start: NaiveDateTime,
    pub predicted: Tensor,
    pub actual: Tensor,
}

/// Per-station, per-step errors over all test windows.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub stations: Vec<String>,
    /// `n × H` mean absolute error per cell.
    pub mae: Tensor,
    /// `n × H` root mean squared error per cell.
    pub rmse: Tensor,
    /// Mean of `mae` over all cells.
    pub avg_mae: f64,
    /// Mean of `rmse` over all cells.
    pub avg_rmse: f64,
    pub predictions: Vec<WindowPrediction>,
}

impl EvalReport {
    pub fn from_predictions(stations: Vec<String>, predictions: Vec<WindowPrediction>) -> Result<Self> {
        let Some(first) = predictions.first() else {
            return Err(Error::Data("no test windows to evaluate".into()));
        };
        let shape = first.actual.shape().to_vec();
        if shape[0] != stations.len() {
            return Err(Error::dim("evaluation stations", &shape, &[stations.len()]));
        }
        for p in &predictions {
            if p.predicted.shape() != shape.as_slice() || p.actual.shape() != shape.as_slice() {
                return Err(Error::dim("window prediction", p.predicted.shape(), &shape));
            }
        }
        let (n, h) = (shape[0], shape[1]);
        let count = predictions.len() as f64;
        let mut abs = Tensor::zeros(vec![n, h]);
        let mut sq = Tensor::zeros(vec![n, h]);
        for p in &predictions {
            for (i, (y, t)) in p.predicted.data().iter().zip(p.actual.data()).enumerate() {
                abs.data_mut()[i] += (y - t).abs();
                sq.data_mut()[i] += (y - t) * (y - t);
            }
        }
        let mae = abs.map(|v| v / count);
        let rmse = sq.map(|v| (v / count).sqrt());
        let cells = (n * h) as f64;
        Ok(Self {
            avg_mae: mae.sum() / cells,
            avg_rmse: rmse.sum() / cells,
            stations,
            mae,
            rmse,
            predictions,
        })
    }

    pub fn horizon(&self) -> usize {
        self.mae.cols()
    }

    /// One row per (station, step), then an `all,all` averages row.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "station,horizon,mae,rmse")?;
        for (s, id) in self.stations.iter().enumerate() {
            for h in 0..self.horizon() {
                writeln!(w, "{id},{},{},{}", h + 1, self.mae.get(s, h), self.rmse.get(s, h))?;
            }
        }
        writeln!(w, "all,all,{},{}", self.avg_mae, self.avg_rmse)?;
        Ok(())
    }

    /// Long format: one row per (window, station, step).
    pub fn write_predictions_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "window_start,forecast_start,station,horizon,predicted,actual")?;
        for p in &self.predictions {
            let ts = format_timestamp(&p.forecast_start);
            for (s, id) in self.stations.iter().enumerate() {
                for h in 0..self.horizon() {
                    writeln!(w, "{},{ts},{id},{},{},{}", p.start, h + 1, p.predicted.get(s, h), p.actual.get(s, h))?;
                }
            }
        }
        Ok(())
    }
}

/// Parses a prediction dump back into station ids and windows. Lines
/// starting with `#` are skipped.
pub fn read_predictions_csv<R: Read>(r: R) -> Result<(Vec<String>, Vec<WindowPrediction>)> {
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let headers = reader.headers()?.clone();
    let expected = ["window_start", "forecast_start", "station", "horizon", "predicted", "actual"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected columns {}", expected.join(",")),
        });
    }
    let mut stations: Vec<String> = Vec::new();
    let mut windows: BTreeMap<usize, (NaiveDateTime, BTreeMap<(usize, usize), (f64, f64)>)> = BTreeMap::new();
    let mut horizon = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = record.position().map_or(i + 2, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        let num = |k: usize| -> Result<f64> {
            record[k].parse::<f64>().map_err(|e| bad(format!("{}: {e}", expected[k])))
        };
        let start: usize = record[0].parse().map_err(|e| bad(format!("window_start: {e}")))?;
        let ts = parse_timestamp(&record[1]).map_err(bad)?;
        let s = match stations.iter().position(|id| id == &record[2]) {
            Some(s) => s,
            None => {
                stations.push(record[2].to_string());
                stations.len() - 1
            }
        };
        let h: usize = record[3].parse().map_err(|e| bad(format!("horizon: {e}")))?;
        if h == 0 {
            return Err(bad("horizon steps start at 1".into()));
        }
        horizon = horizon.max(h);
        let cells = &mut windows.entry(start).or_insert_with(|| (ts, BTreeMap::new())).1;
        if cells.insert((s, h - 1), (num(4)?, num(5)?)).is_some() {
            return Err(bad(format!("duplicate cell for window {start}, station {}, step {h}", &record[2])));
        }
    }
    let n = stations.len();
    let mut out = Vec::with_capacity(windows.len());
    for (start, (forecast_start, cells)) in windows {
        if cells.len() != n * horizon {
            return Err(Error::Data(format!(
                "window {start} has {} cells, expected {}",
                cells.len(),
                n * horizon
            )));
        }
        let mut predicted = Tensor::zeros(vec![n, horizon]);
        let mut actual = Tensor::zeros(vec![n, horizon]);
        for ((s, h), (p, a)) in cells {
            predicted.set(s, h, p);
            actual.set(s, h, a);
        }
        out.push(WindowPrediction {
            start,
            forecast_start,
            predicted,
            actual,
        });
    }
    Ok((stations, out))
}

/// Masks `round(rate · M · n)` history cells chosen uniformly without
/// replacement and fills them by per-station interpolation. Returns the
/// filled history and the number of masked cells.
pub fn mask_history(history: &Tensor, rate: f64, rng: &mut ChaCha8Rng) -> Result<(Tensor, usize)> {
    let (m, n) = (history.rows(), history.cols());
    let count = (rate * (m * n) as f64).round() as usize;
    let mut cells: Vec<Option<f64>> = history.data().iter().copied().map(Some).collect();
    for i in index::sample(rng, m * n, count.min(m * n)) {
        cells[i] = None;
    }
    let mut out = history.clone();
    for s in 0..n {
        let series: Vec<Option<f64>> = (0..m).map(|t| cells[t * n + s]).collect();
        for (t, v) in interpolate_missing(&series)?.into_iter().enumerate() {
            out.set(t, s, v);
        }
    }
    Ok((out, count))
}

/// Runs `forecast` on every test window (stride `horizon`) of `panel`,
/// masking histories first when `missing_rate > 0`.
pub fn evaluate_with(
    panel: &TimeSeriesPanel,
    history: usize,
    horizon: usize,
    missing_rate: f64,
    seed: u64,
    mut forecast: impl FnMut(&[Window]) -> Result<Vec<Tensor>>,
) -> Result<EvalReport> {
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Config(format!("missing_rate must lie in [0, 1), got {missing_rate}")));
    }
    let len = history + horizon;
    let splits = split_panels(panel, len)?;
    let test = &splits.test;
    let starts = window_starts(&(0..test.len()), len, horizon);
    if starts.is_empty() {
        return Err(Error::Data("test split holds no complete window".into()));
    }
    let mut windows = Vec::with_capacity(starts.len());
    for (i, &s) in starts.iter().enumerate() {
        let mut w = extract_window(test, s, history, horizon)?;
        if missing_rate > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            w.history = mask_history(&w.history, missing_rate, &mut rng)?.0;
        }
        windows.push(w);
    }
    let mut predictions = Vec::with_capacity(windows.len());
    for (chunk, offsets) in windows.chunks(PREDICT_BATCH).zip(starts.chunks(PREDICT_BATCH)) {
        let forecasts = forecast(chunk)?;
        if forecasts.len() != chunk.len() {
            return Err(Error::dim("forecast batch", &[forecasts.len()], &[chunk.len()]));
        }
        for ((w, f), &s) in chunk.iter().zip(forecasts).zip(offsets) {
            let actual = w.target.transpose();
            if f.shape() != actual.shape() {
                return Err(Error::dim("forecast", f.shape(), actual.shape()));
            }
            if !f.is_finite() {
                return Err(Error::Numeric(format!("non-finite forecast for the window at row {}", splits.bounds.test.start + s)));
            }
            predictions.push(WindowPrediction {
                start: splits.bounds.test.start + s,
                forecast_start: w.forecast_start,
                predicted: f,
                actual,
            });
        }
    }
    let ids = panel.stations().iter().map(|s| s.id.clone()).collect();
    EvalReport::from_predictions(ids, predictions)
}

/// Scores a trained model on the test split of `panel`.
pub fn evaluate(model: &EvLlm, panel: &TimeSeriesPanel, missing_rate: f64, seed: u64) -> Result<EvalReport> {
    let ids: Vec<&str> = panel.stations().iter().map(|s| s.id.as_str()).collect();
    let expected: Vec<&str> = model.stations.iter().map(|s| s.id.as_str()).collect();
    if ids != expected {
        return Err(Error::Data(format!(
            "panel stations {ids:?} do not match the model's stations {expected:?}"
        )));
    }
    let c = &model.config;
    evaluate_with(panel, c.history, c.horizon, missing_rate, seed, |windows| {
        let prepared: Vec<PreparedWindow> = windows.iter().map(|w| model.prepare(w)).collect::<Result<_>>()?;
        let refs: Vec<&PreparedWindow> = prepared.iter().collect();
        model.predict_prepared(&refs)
    })
}

/// Scores a fitted baseline on the same test windows as [`evaluate`].
pub fn evaluate_baseline(
    baseline: &Baseline,
    panel: &TimeSeriesPanel,
    history: usize,
    horizon: usize,
    missing_rate: f64,
    seed: u64,
) -> Result<EvalReport> {
    evaluate_with(panel, history, horizon, missing_rate, seed, |windows| {
        windows.iter().map(|w| baseline.forecast(&w.history, horizon)).collect()
    })
}
