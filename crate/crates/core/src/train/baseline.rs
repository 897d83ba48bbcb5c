//! Reference forecasters.
//!
//! The ridge model regresses each hour on the previous 24 after removing
//! their mean, so a constant history forecasts itself exactly. It forecasts
//! recursively, feeding its own predictions back as lags.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesPanel;
use crate::error::{Error, Result};
use crate::model::Window;
use crate::numerics::Tensor;

pub const RIDGE_LAGS: usize = 24;
pub const RIDGE_PENALTY: f64 = 1e-2;
const SEASON: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Persistence,
    SeasonalNaive,
    LinearRidge,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [BaselineKind::Persistence, BaselineKind::SeasonalNaive, BaselineKind::LinearRidge];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Persistence => "persistence",
            BaselineKind::SeasonalNaive => "seasonal_naive_24h",
            BaselineKind::LinearRidge => "linear_ridge",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Baseline {
    pub kind: BaselineKind,
    /// Per-station lag coefficients, most recent lag first.
    coefficients: Vec<Vec<f64>>,
}

impl Baseline {
    /// Fits the ridge coefficients on a gap-free training panel; the other
    /// kinds need no fitting.
    pub fn fit(kind: BaselineKind, train: &TimeSeriesPanel) -> Result<Self> {
        let coefficients = match kind {
            BaselineKind::LinearRidge => (0..train.n_stations())
                .map(|s| fit_ridge(&train.station_column(s)))
                .collect::<Result<_>>()?,
            _ => Vec::new(),
        };
        Ok(Self { kind, coefficients })
    }

    /// Forecasts `horizon` steps for each column of the `M × n` history;
    /// returns `n × H`.
    pub fn forecast(&self, history: &Tensor, horizon: usize) -> Result<Tensor> {
        let (m, n) = (history.rows(), history.cols());
        if m < SEASON.max(RIDGE_LAGS) {
            return Err(Error::Config(format!(
                "baselines need at least {} history hours, got {m}",
                SEASON.max(RIDGE_LAGS)
            )));
        }
        if self.kind == BaselineKind::LinearRidge && self.coefficients.len() != n {
            return Err(Error::dim("ridge stations", &[n], &[self.coefficients.len()]));
        }
        let mut out = Tensor::zeros(vec![n, horizon]);
        for s in 0..n {
            let col: Vec<f64> = (0..m).map(|t| history.get(t, s)).collect();
            let f = match self.kind {
                BaselineKind::Persistence => vec![col[m - 1]; horizon],
                BaselineKind::SeasonalNaive => (0..horizon).map(|h| col[m - SEASON + h % SEASON]).collect(),
                BaselineKind::LinearRidge => ridge_forecast(&self.coefficients[s], &col, horizon),
            };
            for (h, v) in f.into_iter().enumerate() {
                out.set(s, h, v);
            }
        }
        Ok(out)
    }
}

/// Fits `kind` on `train` and forecasts the window's horizon.
pub fn baseline_forecast(kind: BaselineKind, train: &TimeSeriesPanel, window: &Window) -> Result<Tensor> {
    Baseline::fit(kind, train)?.forecast(&window.history, window.target.rows())
}

fn centred_lags(series: &[f64], end: usize) -> (Vec<f64>, f64) {
    let lags: Vec<f64> = (1..=RIDGE_LAGS).map(|i| series[end - i]).collect();
    let mean = lags.iter().sum::<f64>() / RIDGE_LAGS as f64;
    (lags.into_iter().map(|v| v - mean).collect(), mean)
}

fn fit_ridge(series: &[f64]) -> Result<Vec<f64>> {
    if series.len() <= RIDGE_LAGS {
        return Err(Error::Data(format!(
            "ridge fit needs more than {RIDGE_LAGS} training hours, got {}",
            series.len()
        )));
    }
    let rows = series.len() - RIDGE_LAGS;
    let mut x = DMatrix::<f64>::zeros(rows, RIDGE_LAGS);
    let mut y = DVector::<f64>::zeros(rows);
    for r in 0..rows {
        let t = r + RIDGE_LAGS;
        let (lags, mean) = centred_lags(series, t);
        for (j, v) in lags.into_iter().enumerate() {
            x[(r, j)] = v;
        }
        y[r] = series[t] - mean;
    }
    let gram = x.transpose() * &x + DMatrix::<f64>::identity(RIDGE_LAGS, RIDGE_LAGS) * RIDGE_PENALTY;
    let rhs = x.transpose() * y;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Numeric("ridge normal equations are not positive definite".into()))?;
    Ok(chol.solve(&rhs).iter().copied().collect())
}

fn ridge_forecast(coefficients: &[f64], history: &[f64], horizon: usize) -> Vec<f64> {
    let mut series = history.to_vec();
    for _ in 0..horizon {
        let (lags, mean) = centred_lags(&series, series.len());
        let y = mean + lags.iter().zip(coefficients).map(|(a, b)| a * b).sum::<f64>();
        series.push(y);
    }
    series.split_off(history.len())
}
