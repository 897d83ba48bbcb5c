use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Floor applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel statistics retained for denormalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, channel: usize, x: f64) -> f64 {
        (x - self.mean[channel]) / self.std[channel]
    }

    pub fn denormalize(&self, channel: usize, z: f64) -> f64 {
        z * self.std[channel] + self.mean[channel]
    }

    /// Whether the channel's deviation hit the floor.
    pub fn is_floored(&self, channel: usize) -> bool {
        self.std[channel] <= STD_FLOOR
    }
}

/// Population mean and floored population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len().max(1) as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

/// Standardizes each column of an `M × c` window independently to zero mean
/// and unit population variance.
pub fn instance_normalize(window: &Tensor) -> Result<(Tensor, NormStats)> {
    let (m, c) = (window.rows(), window.cols());
    if m < 2 {
        return Err(Error::dim("instance_normalize", window.shape(), &[2, c]));
    }
    let mut out = window.clone();
    let mut stats = NormStats {
        mean: Vec::with_capacity(c),
        std: Vec::with_capacity(c),
    };
    for ch in 0..c {
        let column: Vec<f64> = (0..m).map(|r| window.get(r, ch)).collect();
        let (mean, std) = mean_std(&column);
        for (r, v) in column.iter().enumerate() {
            out.set(r, ch, (v - mean) / std);
        }
        stats.mean.push(mean);
        stats.std.push(std);
    }
    Ok((out, stats))
}

/// Single-channel convenience wrapper.
pub fn normalize_series(series: &[f64]) -> Result<(Vec<f64>, NormStats)> {
    let t = Tensor::matrix(series.len(), 1, series.to_vec())?;
    let (z, stats) = instance_normalize(&t)?;
    Ok((z.into_data(), stats))
}
