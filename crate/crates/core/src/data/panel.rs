use chrono::{Datelike, NaiveDateTime, TimeDelta, Weekday};
use serde::{Deserialize, Serialize};

use super::interp::interpolate_missing;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Weather covariates carried per station and hour, in column order.
pub const WEATHER_VARIABLES: [&str; 4] = [
    "temperature_c",
    "precipitation_mm",
    "humidity_pct",
    "wind_speed_ms",
];

pub const WEATHER_VARS: usize = WEATHER_VARIABLES.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub id: String,
    pub name: String,
    pub latitude: f64,
    pub longitude: f64,
}

impl Station {
    /// Metadata placeholder for a station known only by id.
    pub fn anonymous(id: &str) -> Self {
        Self {
            id: id.to_string(),
            name: id.to_string(),
            latitude: 0.0,
            longitude: 0.0,
        }
    }
}

/// Aligned hourly load and weather for `n` stations.
///
/// `load` is `T × n`, `nwp` is `T × n × k`. Missing load cells are carried in
/// `observed` (false = missing) and hold 0.0 in `load` until interpolated.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesPanel {
    timestamps: Vec<NaiveDateTime>,
    load: Tensor,
    observed: Vec<bool>,
    nwp: Tensor,
    stations: Vec<Station>,
}

impl TimeSeriesPanel {
    pub fn new(
        timestamps: Vec<NaiveDateTime>,
        load: Tensor,
        observed: Vec<bool>,
        nwp: Tensor,
        stations: Vec<Station>,
    ) -> Result<Self> {
        let t = timestamps.len();
        let n = stations.len();
        if load.shape() != [t, n] {
            return Err(Error::dim("panel load", load.shape(), &[t, n]));
        }
        if nwp.shape() != [t, n, WEATHER_VARS] {
            return Err(Error::dim("panel nwp", nwp.shape(), &[t, n, WEATHER_VARS]));
        }
        if observed.len() != t * n {
            return Err(Error::dim("panel mask", &[observed.len()], &[t * n]));
        }
        for w in timestamps.windows(2) {
            if w[1] - w[0] != TimeDelta::hours(1) {
                return Err(Error::Data(format!(
                    "timestamps must advance by exactly one hour ({} -> {})",
                    w[0], w[1]
                )));
            }
        }
        for (i, (&v, &obs)) in load.data().iter().zip(&observed).enumerate() {
            if obs && !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Data(format!(
                    "negative or non-finite load {v} at row {} station {}",
                    i / n.max(1),
                    i % n.max(1)
                )));
            }
        }
        if !nwp.is_finite() {
            return Err(Error::Data("non-finite weather value".into()));
        }
        Ok(Self {
            timestamps,
            load,
            observed,
            nwp,
            stations,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn load(&self) -> &Tensor {
        &self.load
    }

    pub fn nwp(&self) -> &Tensor {
        &self.nwp
    }

    pub fn is_observed(&self, t: usize, station: usize) -> bool {
        self.observed[t * self.n_stations() + station]
    }

    pub fn load_at(&self, t: usize, station: usize) -> Option<f64> {
        self.is_observed(t, station)
            .then(|| self.load.get(t, station))
    }

    pub fn weather_at(&self, t: usize, station: usize, var: usize) -> f64 {
        let n = self.n_stations();
        self.nwp.data()[(t * n + station) * WEATHER_VARS + var]
    }

    pub fn missing_count(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    /// Station series with explicit gaps.
    pub fn station_series(&self, station: usize) -> Vec<Option<f64>> {
        (0..self.len()).map(|t| self.load_at(t, station)).collect()
    }

    /// Raw column of the load matrix (missing cells read as stored).
    pub fn station_column(&self, station: usize) -> Vec<f64> {
        (0..self.len()).map(|t| self.load.get(t, station)).collect()
    }

    pub fn weekday(&self, t: usize) -> Weekday {
        self.timestamps[t].weekday()
    }

    /// Contiguous time slice `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<TimeSeriesPanel> {
        if start > end || end > self.len() {
            return Err(Error::Data(format!(
                "slice {start}..{end} outside panel of length {}",
                self.len()
            )));
        }
        let n = self.n_stations();
        let load = Tensor::matrix(end - start, n, self.load.data()[start * n..end * n].to_vec())?;
        let nwp = Tensor::new(
            vec![end - start, n, WEATHER_VARS],
            self.nwp.data()[start * n * WEATHER_VARS..end * n * WEATHER_VARS].to_vec(),
        )?;
        TimeSeriesPanel::new(
            self.timestamps[start..end].to_vec(),
            load,
            self.observed[start * n..end * n].to_vec(),
            nwp,
            self.stations.clone(),
        )
    }

    /// Fills every load gap by per-station linear interpolation. Returns the
    /// completed panel and the number of filled cells.
    pub fn interpolated(&self) -> Result<(TimeSeriesPanel, usize)> {
        let n = self.n_stations();
        let mut load = self.load.clone();
        let mut filled = 0;
        for s in 0..n {
            let series = self.station_series(s);
            filled += series.iter().filter(|v| v.is_none()).count();
            let complete = interpolate_missing(&series).map_err(|e| {
                Error::Data(format!("station {}: {e}", self.stations[s].id))
            })?;
            for (t, v) in complete.into_iter().enumerate() {
                load.set(t, s, v);
            }
        }
        let panel = TimeSeriesPanel::new(
            self.timestamps.clone(),
            load,
            vec![true; self.observed.len()],
            self.nwp.clone(),
            self.stations.clone(),
        )?;
        Ok((panel, filled))
    }
}
