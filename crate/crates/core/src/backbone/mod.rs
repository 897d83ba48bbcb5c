//! Frozen transformer stand-in for the language model, sequence assembly,
//! the weather embedding and the output head.
//!
//! Blocks are pre-norm with causal multi-head self-attention, a GELU
//! feed-forward layer and no projection biases; positions are sinusoidal.
//! Because attention is causal and the prompt comes first, the prompt rows
//! never see the series rows. [`Backbone::prefix_state`] runs the prompt
//! once and keeps its per-layer keys and values, and
//! [`Backbone::forward_suffix`] continues from there on the tape.

mod checkpoint;
mod sequence;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, CheckpointTensor};
pub use sequence::{
    assemble_sequence, denormalize_forecast, embed_nwp, nwp_patches, project_output, AssembledSequence,
    HeadParams, NwpParams, Segment,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab: 1024,
            d_model: 64,
            blocks: 2,
            heads: 4,
            d_ff: 256,
            max_seq: 256,
            seed: 2024,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "backbone width {} must be a multiple of its head count {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab == 0 || self.d_ff == 0 || self.blocks == 0 || self.max_seq == 0 {
            return Err(Error::Config("backbone sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w_ff1: ParamId,
    pub w_ff2: ParamId,
}

/// Keys and values of every layer plus the final hidden rows for a fixed
/// token prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixState {
    pub hidden: Tensor,
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl PrefixState {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }

    fn bytes(&self) -> usize {
        8 * (self.hidden.len()
            + self.keys.iter().map(Tensor::len).sum::<usize>()
            + self.values.iter().map(Tensor::len).sum::<usize>())
    }
}

/// Sinusoidal position codes for rows `start..start + len`.
pub fn positions(start: usize, len: usize, d: usize) -> Tensor {
    Tensor::from_fn(len, d, |r, c| {
        let pos = (start + r) as f64;
        let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / d as f64);
        if c % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

const DEFAULT_CACHE_BYTES: usize = 256 << 20;

/// Frozen embedding table and transformer blocks.
#[derive(Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub embedding: ParamId,
    pub blocks: Vec<BlockParams>,
    cache: Mutex<PrefixCache>,
}

#[derive(Debug, Default)]
struct PrefixCache {
    entries: HashMap<Vec<usize>, Arc<PrefixState>>,
    bytes: usize,
    limit: usize,
    hits: u64,
    misses: u64,
}

impl Backbone {
    /// Seeded frozen initialization: `E ~ N(0, 1)`, projections
    /// `N(0, 1/fan_in)` with the residual-branch outputs further scaled by
    /// `1/√(2·blocks)`, unit layer-norm gains and zero offsets.
    pub fn init(store: &mut ParamStore, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let d = config.d_model;
        let mut normal = |r: usize, c: usize, std: f64| Tensor::from_fn(r, c, |_, _| std * unit.sample(&mut rng));
        let embedding = store.add("backbone.embedding", normal(config.vocab, d, 1.0), true)?;
        let residual = 1.0 / (2.0 * config.blocks as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let name = |s: &str| format!("backbone.block{b}.{s}");
            let in_std = 1.0 / (d as f64).sqrt();
            blocks.push(BlockParams {
                ln1_gain: store.add(name("ln1_gain"), Tensor::full(vec![1, d], 1.0), true)?,
                ln1_bias: store.add(name("ln1_bias"), Tensor::zeros(vec![1, d]), true)?,
                w_q: store.add(name("w_q"), normal(d, d, in_std), true)?,
                w_k: store.add(name("w_k"), normal(d, d, in_std), true)?,
                w_v: store.add(name("w_v"), normal(d, d, in_std), true)?,
                w_o: store.add(name("w_o"), normal(d, d, in_std * residual), true)?,
                ln2_gain: store.add(name("ln2_gain"), Tensor::full(vec![1, d], 1.0), true)?,
                ln2_bias: store.add(name("ln2_bias"), Tensor::zeros(vec![1, d]), true)?,
                w_ff1: store.add(name("w_ff1"), normal(d, config.d_ff, in_std), true)?,
                w_ff2: store.add(
                    name("w_ff2"),
                    normal(config.d_ff, d, residual / (config.d_ff as f64).sqrt()),
                    true,
                )?,
            });
        }
        Ok(Self::from_parts(config, embedding, blocks))
    }

    /// Rebinds to parameters already present in `store` (after loading a
    /// checkpoint).
    pub fn bind_existing(store: &ParamStore, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let find = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let p = store.get(id);
            if p.value().shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    p.value().shape()
                )));
            }
            if !p.is_frozen() {
                return Err(Error::Checkpoint(format!("parameter `{name}` must be frozen")));
            }
            Ok(id)
        };
        let d = config.d_model;
        let embedding = find("backbone.embedding".into(), &[config.vocab, d])?;
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let name = |s: &str| format!("backbone.block{b}.{s}");
            blocks.push(BlockParams {
                ln1_gain: find(name("ln1_gain"), &[1, d])?,
                ln1_bias: find(name("ln1_bias"), &[1, d])?,
                w_q: find(name("w_q"), &[d, d])?,
                w_k: find(name("w_k"), &[d, d])?,
                w_v: find(name("w_v"), &[d, d])?,
                w_o: find(name("w_o"), &[d, d])?,
                ln2_gain: find(name("ln2_gain"), &[1, d])?,
                ln2_bias: find(name("ln2_bias"), &[1, d])?,
                w_ff1: find(name("w_ff1"), &[d, config.d_ff])?,
                w_ff2: find(name("w_ff2"), &[config.d_ff, d])?,
            });
        }
        Ok(Self::from_parts(config, embedding, blocks))
    }

    fn from_parts(config: BackboneConfig, embedding: ParamId, blocks: Vec<BlockParams>) -> Self {
        Self {
            config,
            embedding,
            blocks,
            cache: Mutex::new(PrefixCache {
                limit: DEFAULT_CACHE_BYTES,
                ..PrefixCache::default()
            }),
        }
    }

    /// Upper bound on memory held by cached prompt states; entries beyond it
    /// are computed but not kept.
    pub fn set_cache_limit(&self, bytes: usize) {
        let mut cache = self.cache.lock().expect("prefix cache lock");
        cache.limit = bytes;
        if cache.bytes > bytes {
            cache.entries.clear();
            cache.bytes = 0;
        }
    }

    /// `(hits, misses)` of the prompt-state cache.
    pub fn cache_stats(&self) -> (u64, u64) {
        let cache = self.cache.lock().expect("prefix cache lock");
        (cache.hits, cache.misses)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.embedding];
        for b in &self.blocks {
            ids.extend([
                b.ln1_gain, b.ln1_bias, b.w_q, b.w_k, b.w_v, b.w_o, b.ln2_gain, b.ln2_bias, b.w_ff1,
                b.w_ff2,
            ]);
        }
        ids
    }

    /// Runs `x` (`groups·rows × d`) through every block. Group `g` holds
    /// `rows` consecutive positions that continue after `prefixes[g]`: they
    /// attend causally to themselves and to all of that prefix. Returns the
    /// final hidden rows and each layer's keys and values for `x`'s rows.
    fn run_blocks(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        prefixes: &[&PrefixState],
        rows: usize,
    ) -> Result<(Var, Vec<Var>, Vec<Var>)> {
        let d = self.config.d_model;
        let groups = prefixes.len();
        let (xr, xc) = (tape.value(x).rows(), tape.value(x).cols());
        if xc != d || xr != groups * rows {
            return Err(Error::dim("backbone input", &[xr, xc], &[groups * rows, d]));
        }
        let mut pos = Tensor::zeros(vec![xr, d]);
        for (g, p) in prefixes.iter().enumerate() {
            if p.len() + rows > self.config.max_seq {
                return Err(Error::Config(format!(
                    "sequence of {} positions exceeds the backbone maximum of {}",
                    p.len() + rows,
                    self.config.max_seq
                )));
            }
            if p.keys.len() != self.blocks.len() || p.values.len() != self.blocks.len() {
                return Err(Error::Config("prefix state layer count mismatch".into()));
            }
            let code = positions(p.len(), rows, d);
            pos.data_mut()[g * rows * d..(g + 1) * rows * d].copy_from_slice(code.data());
        }
        let pos = tape.constant(pos);
        let mut h = tape.add(x, pos)?;
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut all_k = Vec::with_capacity(self.blocks.len());
        let mut all_v = Vec::with_capacity(self.blocks.len());
        for (layer, b) in self.blocks.iter().enumerate() {
            let p = |tape: &mut Tape, id| tape.param(store, id);
            let (g1, b1, wq, wk, wv, wo) = (
                p(tape, b.ln1_gain),
                p(tape, b.ln1_bias),
                p(tape, b.w_q),
                p(tape, b.w_k),
                p(tape, b.w_v),
                p(tape, b.w_o),
            );
            let a = tape.layer_norm(h, g1, b1)?;
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            all_k.push(k);
            all_v.push(v);
            let mut group_out = Vec::with_capacity(groups);
            for (g, prefix) in prefixes.iter().enumerate() {
                let qg = tape.slice_rows(q, g * rows, rows)?;
                let mut kg = tape.slice_rows(k, g * rows, rows)?;
                let mut vg = tape.slice_rows(v, g * rows, rows)?;
                if !prefix.is_empty() {
                    let pk = tape.constant(prefix.keys[layer].clone());
                    let pv = tape.constant(prefix.values[layer].clone());
                    kg = tape.concat_rows(&[pk, kg])?;
                    vg = tape.concat_rows(&[pv, vg])?;
                }
                let mut head_out = Vec::with_capacity(heads);
                for hd in 0..heads {
                    let qh = tape.slice_cols(qg, hd * dh, dh)?;
                    let kh = tape.slice_cols(kg, hd * dh, dh)?;
                    let vh = tape.slice_cols(vg, hd * dh, dh)?;
                    let logits = tape.matmul_nt(qh, kh)?;
                    let logits = tape.scale(logits, scale);
                    let weights = tape.softmax_causal(logits, prefix.len())?;
                    head_out.push(tape.matmul(weights, vh)?);
                }
                group_out.push(tape.concat_cols(&head_out)?);
            }
            let attn = tape.concat_rows(&group_out)?;
            let attn = tape.matmul(attn, wo)?;
            h = tape.add(h, attn)?;

            let (g2, b2, w1, w2) = (
                p(tape, b.ln2_gain),
                p(tape, b.ln2_bias),
                p(tape, b.w_ff1),
                p(tape, b.w_ff2),
            );
            let a = tape.layer_norm(h, g2, b2)?;
            let f = tape.matmul(a, w1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            h = tape.add(h, f)?;
        }
        if !tape.value(h).is_finite() {
            return Err(Error::Numeric("non-finite backbone activations".into()));
        }
        Ok((h, all_k, all_v))
    }

    fn empty_state(&self) -> PrefixState {
        let d = self.config.d_model;
        PrefixState {
            hidden: Tensor::zeros(vec![0, d]),
            keys: vec![Tensor::zeros(vec![0, d]); self.blocks.len()],
            values: vec![Tensor::zeros(vec![0, d]); self.blocks.len()],
        }
    }

    /// Hidden rows of a full sequence, computed in one pass.
    pub fn forward_full(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let state = self.run_prefix(store, tokens)?;
        Ok(state.hidden)
    }

    fn run_prefix(&self, store: &ParamStore, tokens: &Tensor) -> Result<PrefixState> {
        let empty = self.empty_state();
        let mut tape = Tape::inference();
        let x = tape.constant(tokens.clone());
        let (h, ks, vs) = self.run_blocks(&mut tape, store, x, &[&empty], tokens.rows())?;
        Ok(PrefixState {
            hidden: tape.value(h).clone(),
            keys: ks.iter().map(|&k| tape.value(k).clone()).collect(),
            values: vs.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// State after running the token ids `ids` through the blocks; cached by
    /// id sequence.
    pub fn prefix_state(&self, store: &ParamStore, ids: &[usize]) -> Result<Arc<PrefixState>> {
        {
            let mut cache = self.cache.lock().expect("prefix cache lock");
            if let Some(state) = cache.entries.get(ids).cloned() {
                cache.hits += 1;
                return Ok(state);
            }
            cache.misses += 1;
        }
        let tokens = crate::prompt::embed_tokens(ids, store.value(self.embedding))?;
        let state = Arc::new(self.run_prefix(store, &tokens)?);
        let mut cache = self.cache.lock().expect("prefix cache lock");
        let size = state.bytes();
        if cache.bytes + size <= cache.limit && !cache.entries.contains_key(ids) {
            cache.bytes += size;
            cache.entries.insert(ids.to_vec(), state.clone());
        }
        Ok(state)
    }

    /// Continues each prefix with `rows` rows of `x` on the tape; gradients
    /// flow into `x` while every backbone parameter stays constant.
    pub fn forward_suffix(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        prefixes: &[&PrefixState],
        rows: usize,
    ) -> Result<Var> {
        Ok(self.run_blocks(tape, store, x, prefixes, rows)?.0)
    }

    /// Full forward of an assembled sequence.
    pub fn forward(&self, store: &ParamStore, seq: &AssembledSequence) -> Result<Tensor> {
        self.forward_full(store, &seq.tokens)
    }
}
