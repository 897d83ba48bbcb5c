use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::TimeSeriesPanel;
use crate::error::{Error, Result};

/// Chronological train / validation / test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            validation: 0.2,
            test: 0.1,
        }
    }
}

/// Row ranges of the three splits. Disjoint, ordered and covering `0..T`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

impl SplitBounds {
    fn shortest(&self) -> usize {
        self.train.len().min(self.validation.len()).min(self.test.len())
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|f| !(*f > 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    fn raw_bounds(&self, total: usize) -> SplitBounds {
        let a = (self.train * total as f64 + 1e-9).floor() as usize;
        let b = ((self.train + self.validation) * total as f64 + 1e-9).floor() as usize;
        SplitBounds {
            train: 0..a,
            validation: a..b,
            test: b..total,
        }
    }

    /// Boundaries at `floor(train·T)` and `floor((train+validation)·T)`.
    /// Each split must hold at least one window of `window_len` rows.
    pub fn bounds(&self, total: usize, window_len: usize) -> Result<SplitBounds> {
        self.validate()?;
        let bounds = self.raw_bounds(total);
        if bounds.shortest() < window_len {
            let minimum = (total + 1..)
                .find(|&t| self.raw_bounds(t).shortest() >= window_len)
                .unwrap_or(usize::MAX);
            return Err(Error::Data(format!(
                "panel of {total} rows is too short: every split needs a {window_len}-row window, \
                 which requires at least T = {minimum}"
            )));
        }
        Ok(bounds)
    }
}

/// Window start offsets inside `range` such that `[start, start + window_len)`
/// never leaves the range.
pub fn window_starts(range: &Range<usize>, window_len: usize, stride: usize) -> Vec<usize> {
    if range.len() < window_len || stride == 0 {
        return Vec::new();
    }
    (range.start..=range.end - window_len).step_by(stride).collect()
}

pub fn chronological_split(
    panel: &TimeSeriesPanel,
    spec: &SplitSpec,
    window_len: usize,
) -> Result<(TimeSeriesPanel, TimeSeriesPanel, TimeSeriesPanel)> {
    let b = spec.bounds(panel.len(), window_len)?;
    Ok((
        panel.slice(b.train.start, b.train.end)?,
        panel.slice(b.validation.start, b.validation.end)?,
        panel.slice(b.test.start, b.test.end)?,
    ))
}
