use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// `P × L_p` matrix of contiguous slices cut from one channel's window.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub channel: usize,
    pub patches: Tensor,
    pub stride: usize,
}

impl PatchSet {
    pub fn count(&self) -> usize {
        self.patches.rows()
    }

    pub fn patch_len(&self) -> usize {
        self.patches.cols()
    }
}

/// `floor((m − patch_len) / stride) + 1`, or `None` when no patch fits.
pub fn patch_count(m: usize, patch_len: usize, stride: usize) -> Option<usize> {
    if patch_len == 0 || stride == 0 || patch_len > m {
        None
    } else {
        Some((m - patch_len) / stride + 1)
    }
}

/// Cuts `window` into patches of `patch_len` starting every `stride` steps.
/// A trailing remainder shorter than a patch is dropped.
pub fn segment_patches(window: &[f64], patch_len: usize, stride: usize) -> Result<PatchSet> {
    segment_channel(0, window, patch_len, stride)
}

pub fn segment_channel(
    channel: usize,
    window: &[f64],
    patch_len: usize,
    stride: usize,
) -> Result<PatchSet> {
    let Some(p) = patch_count(window.len(), patch_len, stride) else {
        return Err(Error::Config(format!(
            "cannot cut patches of length {patch_len} with stride {stride} from a window of {}",
            window.len()
        )));
    };
    let mut data = Vec::with_capacity(p * patch_len);
    for i in 0..p {
        data.extend_from_slice(&window[i * stride..i * stride + patch_len]);
    }
    Ok(PatchSet {
        channel,
        patches: Tensor::matrix(p, patch_len, data)?,
        stride,
    })
}
