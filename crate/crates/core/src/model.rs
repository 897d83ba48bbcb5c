//! The assembled forecaster.
//!
//! For each window and station: instance-normalize the history, cut it into
//! patches, embed and reprogram them onto the frozen table, add the GCN mix
//! of all stations' tokens at the same patch position, append embedded
//! weather patches for the forecast period, prefix the prompt and run the
//! frozen backbone. The flattened hidden sequence is projected to the
//! horizon and denormalized with the station's window statistics.

use std::io::{Read, Write};
use std::sync::Arc;

use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    embed_nwp, load_checkpoint, nwp_patches, project_output, save_checkpoint, Backbone, BackboneConfig,
    HeadParams, NwpParams, PrefixState,
};
use crate::data::{instance_normalize, segment_patches, NormStats, Station, TimeSeriesPanel, WEATHER_VARS};
use crate::error::{Error, Result};
use crate::graph::{build_mam, gcn_forward, normalize_adjacency, AdjacencyMatrix, GcnParams};
use crate::numerics::{ParamStore, Tape, Tensor, Var};
use crate::prompt::{compute_statistics, padded_ids, render_prompt, PromptContext, TaskSpec, Vocabulary};
use crate::reprogram::{embed_patches, reprogram, ReprogramParams, ReprogramShape};

/// Architecture and data-shape settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// History length M in hours.
    pub history: usize,
    /// Forecast horizon H in hours; also the weather window length.
    pub horizon: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub d_m: usize,
    pub d_llm: usize,
    pub reprogram_heads: usize,
    pub gcn_hidden: usize,
    pub threshold: f64,
    pub prompt_tokens: usize,
    pub backbone_blocks: usize,
    pub backbone_heads: usize,
    pub backbone_ff: usize,
    pub backbone_max_seq: usize,
    pub backbone_seed: u64,
    pub no_prompt: bool,
    pub no_gcn: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history: 192,
            horizon: 48,
            patch_len: 16,
            stride: 16,
            d_m: 32,
            d_llm: 64,
            reprogram_heads: 4,
            gcn_hidden: 64,
            threshold: 0.3,
            prompt_tokens: 128,
            backbone_blocks: 2,
            backbone_heads: 4,
            backbone_ff: 256,
            backbone_max_seq: 256,
            backbone_seed: 2024,
            no_prompt: false,
            no_gcn: false,
        }
    }
}

impl ModelConfig {
    pub fn patches(&self) -> usize {
        crate::data::patch_count(self.history, self.patch_len, self.stride).unwrap_or(0)
    }

    pub fn weather_patches(&self) -> usize {
        self.horizon / self.patch_len
    }

    /// Rows after the prompt: series patches then weather patches.
    pub fn suffix_len(&self) -> usize {
        self.patches() + self.weather_patches()
    }

    pub fn sequence_len(&self) -> usize {
        self.prompt_tokens + self.suffix_len()
    }

    pub fn window_len(&self) -> usize {
        self.history + self.horizon
    }

    pub fn backbone(&self, vocab: usize) -> BackboneConfig {
        BackboneConfig {
            vocab,
            d_model: self.d_llm,
            blocks: self.backbone_blocks,
            heads: self.backbone_heads,
            d_ff: self.backbone_ff,
            max_seq: self.backbone_max_seq,
            seed: self.backbone_seed,
        }
    }

    fn reprogram_shape(&self) -> ReprogramShape {
        ReprogramShape {
            patch_len: self.patch_len,
            d_m: self.d_m,
            d_llm: self.d_llm,
            heads: self.reprogram_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("history", self.history),
            ("horizon", self.horizon),
            ("patch_len", self.patch_len),
            ("stride", self.stride),
            ("d_m", self.d_m),
            ("d_llm", self.d_llm),
            ("reprogram_heads", self.reprogram_heads),
            ("gcn_hidden", self.gcn_hidden),
            ("prompt_tokens", self.prompt_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.patch_len > self.history {
            return Err(Error::Config(format!(
                "patch length {} exceeds the history of {} hours",
                self.patch_len, self.history
            )));
        }
        if self.horizon % self.patch_len != 0 {
            return Err(Error::Config(format!(
                "horizon {} must be divisible by the patch length {}",
                self.horizon, self.patch_len
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0, 1], got {}", self.threshold)));
        }
        if self.sequence_len() > self.backbone_max_seq {
            return Err(Error::Config(format!(
                "sequence of {} positions exceeds the backbone maximum of {}",
                self.sequence_len(),
                self.backbone_max_seq
            )));
        }
        self.reprogram_shape().validate()?;
        self.backbone(1).validate()
    }
}

/// Raw inputs of one forecast: `M × n` history, `H × n` target and the
/// `H × n × k` weather over the forecast period.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub history: Tensor,
    pub target: Tensor,
    pub weather: Tensor,
    pub forecast_start: NaiveDateTime,
}

/// Cuts the window starting at row `start` out of a gap-free panel.
pub fn extract_window(panel: &TimeSeriesPanel, start: usize, history: usize, horizon: usize) -> Result<Window> {
    let n = panel.n_stations();
    if start + history + horizon > panel.len() {
        return Err(Error::Data(format!(
            "window at {start} of {} rows runs past the panel end {}",
            history + horizon,
            panel.len()
        )));
    }
    let load = panel.load().data();
    let rows = |from: usize, len: usize| Tensor::matrix(len, n, load[from * n..(from + len) * n].to_vec());
    let f = start + history;
    let stride = n * WEATHER_VARS;
    Ok(Window {
        history: rows(start, history)?,
        target: rows(f, horizon)?,
        weather: Tensor::new(
            vec![horizon, n, WEATHER_VARS],
            panel.nwp().data()[f * stride..(f + horizon) * stride].to_vec(),
        )?,
        forecast_start: panel.timestamps()[f],
    })
}

/// Per-window tensors ready for the forward pass.
#[derive(Clone, Debug)]
pub struct PreparedWindow {
    pub stats: NormStats,
    /// `n·P × L_p`, station-major.
    pub patches: Tensor,
    /// `n·P_nwp × k·L_p`, station-major, standardized.
    pub weather: Tensor,
    pub prompt_ids: Vec<Vec<usize>>,
    /// `n × H` target on the normalized scale.
    pub target: Tensor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMetadata {
    config: ModelConfig,
    stations: Vec<Station>,
    adjacency: Vec<f64>,
    weather_stats: NormStats,
    /// Absent for the builtin vocabulary.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocabulary: Option<Vec<String>>,
}

/// Forecaster parameters plus the fixed graph, station metadata and
/// weather standardization taken from the training split.
#[derive(Debug)]
pub struct EvLlm {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub reprogram: ReprogramParams,
    pub gcn: GcnParams,
    pub nwp: NwpParams,
    pub head: HeadParams,
    pub vocab: Vocabulary,
    pub stations: Vec<Station>,
    /// Normalized adjacency.
    pub adjacency: AdjacencyMatrix,
    pub weather_stats: NormStats,
    mixer: Tensor,
}

impl EvLlm {
    /// Builds the graph and weather statistics from `train` (gap-free) and
    /// initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64, train: &TimeSeriesPanel) -> Result<Self> {
        Self::with_vocabulary(config, seed, train, Vocabulary::builtin())
    }

    /// [`EvLlm::new`] with a custom token table; the frozen embedding gets
    /// one row per token.
    pub fn with_vocabulary(config: ModelConfig, seed: u64, train: &TimeSeriesPanel, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let adjacency = normalize_adjacency(&build_mam(train.load(), config.threshold)?)?;
        let weather_stats = weather_stats(train);
        Self::assemble(config, seed, train.stations().to_vec(), adjacency, weather_stats, vocab)
    }

    fn assemble(
        config: ModelConfig,
        seed: u64,
        stations: Vec<Station>,
        adjacency: AdjacencyMatrix,
        weather_stats: NormStats,
        vocab: Vocabulary,
    ) -> Result<Self> {
        config.validate()?;
        if adjacency.n() != stations.len() {
            return Err(Error::dim("adjacency", &[adjacency.n()], &[stations.len()]));
        }
        let mut store = ParamStore::new();
        let backbone = Backbone::init(&mut store, config.backbone(vocab.len()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reprogram = ReprogramParams::init(&mut store, config.reprogram_shape(), &mut rng)?;
        let gcn = GcnParams::init(&mut store, config.d_llm, config.gcn_hidden, config.d_llm, &mut rng)?;
        let nwp = NwpParams::init(&mut store, WEATHER_VARS * config.patch_len, config.d_llm, &mut rng)?;
        let head = HeadParams::init(&mut store, config.sequence_len() * config.d_llm, config.horizon, &mut rng)?;
        let mixer = adjacency.block_diagonal_mixer(config.patches());
        Ok(Self {
            config,
            store,
            backbone,
            reprogram,
            gcn,
            nwp,
            head,
            vocab,
            stations,
            adjacency,
            weather_stats,
            mixer,
        })
    }

    pub fn n_stations(&self) -> usize {
        self.stations.len()
    }

    pub fn prompt_text(&self, normalized_history: &[f64], station: usize, forecast_start: NaiveDateTime) -> Result<String> {
        let s = &self.stations[station];
        let stats = compute_statistics(normalized_history)?;
        Ok(render_prompt(
            &PromptContext {
                station_name: s.name.clone(),
                latitude: s.latitude,
                longitude: s.longitude,
                n_stations: self.n_stations(),
            },
            &stats,
            &TaskSpec {
                history: self.config.history,
                horizon: self.config.horizon,
                start_weekday: forecast_start.weekday(),
                start_hour: forecast_start.hour(),
            },
        ))
    }

    pub fn prepare(&self, window: &Window) -> Result<PreparedWindow> {
        let c = &self.config;
        let n = self.n_stations();
        if window.history.shape() != [c.history, n] || window.target.shape() != [c.horizon, n] {
            return Err(Error::dim("window", window.history.shape(), &[c.history, n]));
        }
        if window.weather.shape() != [c.horizon, n, WEATHER_VARS] {
            return Err(Error::dim("weather window", window.weather.shape(), &[c.horizon, n, WEATHER_VARS]));
        }
        let (normalized, stats) = instance_normalize(&window.history)?;
        let p = c.patches();
        let mut patches = Vec::with_capacity(n * p * c.patch_len);
        let mut weather = Vec::new();
        let mut prompt_ids = Vec::with_capacity(n);
        for s in 0..n {
            let column: Vec<f64> = (0..c.history).map(|t| normalized.get(t, s)).collect();
            patches.extend_from_slice(segment_patches(&column, c.patch_len, c.stride)?.patches.data());
            let w = Tensor::from_fn(c.horizon, WEATHER_VARS, |t, v| {
                self.weather_stats.normalize(v, window.weather.data()[(t * n + s) * WEATHER_VARS + v])
            });
            weather.extend_from_slice(nwp_patches(&w, c.patch_len)?.data());
            prompt_ids.push(if c.no_prompt {
                vec![self.vocab.pad_id(); c.prompt_tokens]
            } else {
                let text = self.prompt_text(&column, s, window.forecast_start)?;
                padded_ids(&text, &self.vocab, c.prompt_tokens)
            });
        }
        let target = Tensor::from_fn(n, c.horizon, |s, h| stats.normalize(s, window.target.get(h, s)));
        Ok(PreparedWindow {
            stats,
            patches: Tensor::matrix(n * p, c.patch_len, patches)?,
            weather: Tensor::matrix(n * c.weather_patches(), WEATHER_VARS * c.patch_len, weather)?,
            prompt_ids,
            target,
        })
    }

    /// Normalized forecasts, one row per (window, station), window-major.
    pub fn forward(&self, tape: &mut Tape, batch: &[&PreparedWindow]) -> Result<Var> {
        self.forward_with(tape, &self.store, batch)
    }

    /// [`EvLlm::forward`] reading parameter values from `store`, which must
    /// share this model's layout.
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, batch: &[&PreparedWindow]) -> Result<Var> {
        let c = &self.config;
        let n = self.n_stations();
        let (p, pw, d) = (c.patches(), c.weather_patches(), c.d_llm);
        let seqs = batch.len() * n;
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }

        let mut patch_rows = Vec::with_capacity(seqs * p * c.patch_len);
        let mut weather_rows = Vec::new();
        for w in batch {
            patch_rows.extend_from_slice(w.patches.data());
            weather_rows.extend_from_slice(w.weather.data());
        }
        let patches = tape.constant(Tensor::matrix(seqs * p, c.patch_len, patch_rows)?);
        let weather = tape.constant(Tensor::matrix(seqs * pw, WEATHER_VARS * c.patch_len, weather_rows)?);

        let rv = self.reprogram.bind(tape, store);
        let e = tape.param(store, self.backbone.embedding);
        let x = embed_patches(tape, patches, rv.w_embed)?;
        let mut tokens = reprogram(tape, x, e, &rv)?;
        if !c.no_gcn {
            let mixer = tape.constant(self.mixer.clone());
            let (w1, w2) = (tape.param(store, self.gcn.w1), tape.param(store, self.gcn.w2));
            let mut mixed = Vec::with_capacity(batch.len());
            for b in 0..batch.len() {
                let o = tape.slice_rows(tokens, b * n * p, n * p)?;
                mixed.push(gcn_forward(tape, o, mixer, w1, w2)?);
            }
            let g = tape.concat_rows(&mixed)?;
            tokens = tape.add(tokens, g)?;
        }
        let (nw, nb) = (tape.param(store, self.nwp.w), tape.param(store, self.nwp.b));
        let weather = embed_nwp(tape, weather, nw, nb)?;

        let mut parts = Vec::with_capacity(2 * seqs);
        for s in 0..seqs {
            parts.push(tape.slice_rows(tokens, s * p, p)?);
            parts.push(tape.slice_rows(weather, s * pw, pw)?);
        }
        let suffix = tape.concat_rows(&parts)?;

        let ids: Vec<&Vec<usize>> = batch.iter().flat_map(|w| w.prompt_ids.iter()).collect();
        let prefixes: Vec<Arc<PrefixState>> = ids
            .par_iter()
            .map(|ids| self.backbone.prefix_state(store, ids))
            .collect::<Result<_>>()?;
        let refs: Vec<&PrefixState> = prefixes.iter().map(Arc::as_ref).collect();
        let rows = p + pw;
        let hidden = self.backbone.forward_suffix(tape, store, suffix, &refs, rows)?;

        let mut flat = Vec::with_capacity(seqs);
        for (s, prefix) in refs.iter().enumerate() {
            let pre = tape.constant(prefix.hidden.clone());
            let suf = tape.slice_rows(hidden, s * rows, rows)?;
            let full = tape.concat_rows(&[pre, suf])?;
            flat.push(tape.reshape(full, &[1, c.sequence_len() * d])?);
        }
        let flat = tape.concat_rows(&flat)?;
        let (hw, hb) = (tape.param(store, self.head.w), tape.param(store, self.head.b));
        project_output(tape, flat, hw, hb)
    }

    /// Denormalized `n × H` forecast for one window.
    pub fn predict(&self, window: &Window) -> Result<Tensor> {
        let prepared = self.prepare(window)?;
        Ok(self.predict_prepared(&[&prepared])?.remove(0))
    }

    /// Denormalized forecasts for several prepared windows.
    pub fn predict_prepared(&self, batch: &[&PreparedWindow]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, batch)?;
        let values = tape.value(out);
        let n = self.n_stations();
        let h = self.config.horizon;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(b, w)| Tensor::from_fn(n, h, |s, k| w.stats.denormalize(s, values.get(b * n + s, k))))
            .collect())
    }

    pub fn save<W: Write>(&self, w: W, seed: u64, config_hash: &str) -> Result<()> {
        let meta = ModelMetadata {
            config: self.config.clone(),
            stations: self.stations.clone(),
            adjacency: self.adjacency.weights().data().to_vec(),
            weather_stats: self.weather_stats.clone(),
            vocabulary: (self.vocab != Vocabulary::builtin()).then(|| self.vocab.tokens().to_vec()),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
        save_checkpoint(w, &self.store, seed, config_hash, meta)
    }

    /// Rebuilds a model from a checkpoint, validating every tensor's name,
    /// shape and frozen flag. Returns the model with the recorded seed and
    /// config hash.
    pub fn load<R: Read>(r: R) -> Result<(Self, u64, String)> {
        let (loaded, header) = load_checkpoint(r)?;
        let meta: ModelMetadata = serde_json::from_value(header.metadata)
            .map_err(|e| Error::Checkpoint(format!("bad model metadata: {e}")))?;
        let n = meta.stations.len();
        let adjacency = AdjacencyMatrix::new(
            Tensor::matrix(n, n, meta.adjacency)?,
            meta.config.threshold,
            true,
        )?;
        let vocab = match meta.vocabulary {
            Some(tokens) => Vocabulary::from_text(&tokens.join("\n"))?,
            None => Vocabulary::builtin(),
        };
        let mut model = Self::assemble(meta.config, header.seed, meta.stations, adjacency, meta.weather_stats, vocab)?;
        model.store.load_values_from(&loaded)?;
        Ok((model, header.seed, header.config_hash))
    }
}

/// Per-variable mean and standard deviation over all stations and hours.
pub fn weather_stats(panel: &TimeSeriesPanel) -> NormStats {
    let data = panel.nwp().data();
    let mut stats = NormStats {
        mean: Vec::with_capacity(WEATHER_VARS),
        std: Vec::with_capacity(WEATHER_VARS),
    };
    for v in 0..WEATHER_VARS {
        let values: Vec<f64> = data.iter().skip(v).step_by(WEATHER_VARS).copied().collect();
        let (m, s) = crate::data::mean_std(&values);
        stats.mean.push(m);
        stats.std.push(s);
    }
    stats
}
