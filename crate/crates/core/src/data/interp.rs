use crate::error::{Error, Result};

/// Fills gaps by linear interpolation between the nearest observed
/// neighbours; leading and trailing gaps take the nearest observed value.
pub fn interpolate_missing(series: &[Option<f64>]) -> Result<Vec<f64>> {
    let observed: Vec<usize> = series
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|_| i))
        .collect();
    let (Some(&first), Some(&last)) = (observed.first(), observed.last()) else {
        return Err(Error::Data("channel has no observed values".into()));
    };
    let mut out = vec![0.0; series.len()];
    let head = series[first].unwrap_or_default();
    for slot in out.iter_mut().take(first) {
        *slot = head;
    }
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (series[a].unwrap_or_default(), series[b].unwrap_or_default());
        out[a] = va;
        let span = (b - a) as f64;
        for (i, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let w = (i - a) as f64 / span;
            *slot = va + w * (vb - va);
        }
    }
    let tail = series[last].unwrap_or_default();
    for slot in out.iter_mut().skip(last) {
        *slot = tail;
    }
    Ok(out)
}
