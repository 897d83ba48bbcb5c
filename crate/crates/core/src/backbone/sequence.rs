use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::NormStats;
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::prompt::PromptPrefix;
use crate::reprogram::glorot;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Segment {
    Prompt,
    Patch,
    Nwp,
}

/// One station's backbone input.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledSequence {
    pub tokens: Tensor,
    pub segments: Vec<Segment>,
    pub station: usize,
}

impl AssembledSequence {
    /// Checks that segments run prompt, then patch, then weather, each
    /// contiguous, and that there is one label per token row.
    pub fn new(tokens: Tensor, segments: Vec<Segment>, station: usize) -> Result<Self> {
        if segments.len() != tokens.rows() {
            return Err(Error::dim("segment map", &[segments.len()], &[tokens.rows()]));
        }
        let rank = |s: &Segment| match s {
            Segment::Prompt => 0,
            Segment::Patch => 1,
            Segment::Nwp => 2,
        };
        if segments.windows(2).any(|w| rank(&w[0]) > rank(&w[1])) {
            return Err(Error::Config(
                "sequence segments must run prompt, patch, weather".into(),
            ));
        }
        Ok(Self {
            tokens,
            segments,
            station,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn count(&self, segment: Segment) -> usize {
        self.segments.iter().filter(|&&s| s == segment).count()
    }
}

/// `prompt ‖ patches ‖ weather`, with the prompt cut to its last
/// `prompt_len` rows or left-padded with `pad`.
pub fn assemble_sequence(
    prefix: &PromptPrefix,
    pad: &[f64],
    prompt_len: usize,
    fused_patches: &Tensor,
    nwp_tokens: &Tensor,
    station: usize,
) -> Result<AssembledSequence> {
    let d = pad.len();
    for (what, t) in [("prompt", &prefix.embeddings), ("patch", fused_patches), ("weather", nwp_tokens)] {
        if t.cols() != d {
            return Err(Error::dim(what, t.shape(), &[t.rows(), d]));
        }
    }
    let prompt = &prefix.embeddings;
    let keep = prompt.rows().min(prompt_len);
    let mut data = Vec::with_capacity((prompt_len + fused_patches.rows() + nwp_tokens.rows()) * d);
    for _ in keep..prompt_len {
        data.extend_from_slice(pad);
    }
    data.extend_from_slice(&prompt.data()[(prompt.rows() - keep) * d..]);
    data.extend_from_slice(fused_patches.data());
    data.extend_from_slice(nwp_tokens.data());
    let mut segments = vec![Segment::Prompt; prompt_len];
    segments.extend(std::iter::repeat_n(Segment::Patch, fused_patches.rows()));
    segments.extend(std::iter::repeat_n(Segment::Nwp, nwp_tokens.rows()));
    let rows = segments.len();
    AssembledSequence::new(Tensor::matrix(rows, d, data)?, segments, station)
}

/// Splits an `N × k` weather window into `N / patch_len` rows, each the
/// concatenation of the `k` variables' values over one patch.
pub fn nwp_patches(window: &Tensor, patch_len: usize) -> Result<Tensor> {
    let (n, k) = (window.rows(), window.cols());
    if patch_len == 0 || n % patch_len != 0 {
        return Err(Error::Config(format!(
            "weather window of {n} hours is not divisible by the patch length {patch_len}"
        )));
    }
    let patches = n / patch_len;
    Ok(Tensor::from_fn(patches, k * patch_len, |p, c| {
        window.get(p * patch_len + c % patch_len, c / patch_len)
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NwpParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl NwpParams {
    pub fn init<R: Rng>(store: &mut ParamStore, input: usize, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.add("nwp.w", glorot(input, d, rng), false)?,
            b: store.add("nwp.b", Tensor::zeros(vec![1, d]), false)?,
        })
    }
}

/// `patches · W_nwp + b_nwp`.
pub fn embed_nwp(tape: &mut Tape, patches: Var, w: Var, b: Var) -> Result<Var> {
    let x = tape.matmul(patches, w)?;
    tape.add_row(x, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl HeadParams {
    /// Small random weights and zero bias: the untrained forecast is close
    /// to each station's window mean.
    pub fn init<R: Rng>(store: &mut ParamStore, input: usize, horizon: usize, rng: &mut R) -> Result<Self> {
        let normal = Normal::new(0.0, 0.1).expect("positive std");
        Ok(Self {
            w: store.add("head.w", Tensor::from_fn(input, horizon, |_, _| normal.sample(rng)), false)?,
            b: store.add("head.b", Tensor::zeros(vec![1, horizon]), false)?,
        })
    }
}

/// Normalized forecasts `flat · W_head / √(S·d) + b_head`, one row per
/// flattened sequence. The fixed fan-in scale keeps a unit step on every
/// weight from moving the output by O(S·d).
pub fn project_output(tape: &mut Tape, flat: Var, w: Var, b: Var) -> Result<Var> {
    let fan_in = tape.value(flat).cols();
    let y = tape.matmul(flat, w)?;
    let y = tape.scale(y, 1.0 / (fan_in as f64).sqrt());
    tape.add_row(y, b)
}

/// Maps one normalized forecast row back to load units with the station's
/// window statistics.
pub fn denormalize_forecast(normalized: &[f64], stats: &NormStats, station: usize) -> Vec<f64> {
    normalized.iter().map(|&z| stats.denormalize(station, z)).collect()
}
