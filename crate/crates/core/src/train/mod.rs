//! Loss, optimizer, the training loop with early stopping, evaluation
//! metrics, reference baselines and the ablation runner.

mod ablate;
mod baseline;
mod eval;

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{window_starts, SplitBounds, SplitSpec, TimeSeriesPanel};
use crate::error::{Error, Result};
use crate::model::{extract_window, EvLlm, ModelConfig, PreparedWindow};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::prompt::Vocabulary;

pub use ablate::{ablate, write_ablation_csv, AblationResult, AblationRow, Variant};
pub use baseline::{baseline_forecast, Baseline, BaselineKind, RIDGE_LAGS, RIDGE_PENALTY};
pub use eval::{
    evaluate, evaluate_baseline, evaluate_with, mask_history, read_predictions_csv, EvalReport, WindowPrediction,
};

/// Optimization and evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Training windows drawn (without replacement) per epoch.
    pub windows_per_epoch: usize,
    /// Fraction of test-time history cells masked and interpolated.
    pub missing_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            seed: 7,
            windows_per_epoch: 128,
            missing_rate: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("windows_per_epoch", self.windows_per_epoch),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Config(format!("missing_rate must lie in [0, 1), got {}", self.missing_rate)));
        }
        Ok(())
    }
}

/// SHA-256 over the canonical JSON of every setting that shapes the trained
/// parameters. `missing_rate` only affects evaluation and is left out, so a
/// checkpoint serves every missing-rate variant.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let train = TrainConfig {
        missing_rate: 0.0,
        ..train.clone()
    };
    let canonical = serde_json::json!({ "model": model, "train": train });
    hex::encode(Sha256::digest(canonical.to_string().as_bytes()))
}

/// Mean squared difference.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    steps: i32,
    moments: BTreeMap<ParamId, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// Applies one update. Parameters absent from `grads` keep their values
    /// and moments. Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) -> Result<()> {
        for (id, g) in grads {
            let p = store.get(*id);
            if p.is_frozen() {
                return Err(Error::Config(format!("gradient supplied for frozen parameter {}", p.name())));
            }
            if g.shape() != p.value().shape() {
                return Err(Error::dim("adam", g.shape(), p.value().shape()));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for parameter {}", p.name())));
            }
        }
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            let value = store.get_mut(*id).value_mut().expect("trainable parameter");
            let it = value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(g.data());
            for ((x, (m, v)), &g) in it {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStopping => "early_stopping",
        }
    }
}

/// Panel rows each stage of training read, as absolute indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataAudit {
    /// Rows feeding gradients, the adjacency and the weather statistics.
    pub train_rows: Range<usize>,
    /// Rows feeding the early-stopping criterion.
    pub validation_rows: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub untrained_validation_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
    pub audit: DataAudit,
}

impl TrainHistory {
    pub fn best_validation_loss(&self) -> f64 {
        self.epochs.iter().map(|e| e.validation_loss).fold(f64::INFINITY, f64::min)
    }

    /// Losses per epoch; epoch 0 is the untrained model. Timings are kept
    /// out so identical runs give identical files.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# best_epoch={} stop_reason={}", self.best_epoch, self.stop_reason.as_str())?;
        write_loss_rows(&mut w, self.untrained_validation_loss, &self.epochs)
    }

    pub fn write_timing_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "epoch,seconds")?;
        for e in &self.epochs {
            writeln!(w, "{},{:.3}", e.epoch, e.seconds)?;
        }
        Ok(())
    }
}

fn write_loss_rows<W: Write>(w: &mut W, untrained: f64, epochs: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch,train_loss,validation_loss")?;
    writeln!(w, "0,,{untrained}")?;
    for e in epochs {
        writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.validation_loss)?;
    }
    Ok(())
}

/// The three chronological splits, each gap-filled on its own so no value
/// crosses a boundary.
#[derive(Clone, Debug)]
pub struct SplitPanels {
    pub bounds: SplitBounds,
    pub train: TimeSeriesPanel,
    pub validation: TimeSeriesPanel,
    pub test: TimeSeriesPanel,
}

pub fn split_panels(panel: &TimeSeriesPanel, window_len: usize) -> Result<SplitPanels> {
    let bounds = SplitSpec::default().bounds(panel.len(), window_len)?;
    let part = |r: &Range<usize>| -> Result<TimeSeriesPanel> { Ok(panel.slice(r.start, r.end)?.interpolated()?.0) };
    Ok(SplitPanels {
        train: part(&bounds.train)?,
        validation: part(&bounds.validation)?,
        test: part(&bounds.test)?,
        bounds,
    })
}

fn window_batch(prepared: &[PreparedWindow]) -> Tensor {
    let h = prepared[0].target.cols();
    let data = prepared.iter().flat_map(|w| w.target.data().iter().copied()).collect();
    Tensor::matrix(prepared.iter().map(|w| w.target.rows()).sum(), h, data).expect("consistent targets")
}

/// Mean squared error over every window, station and step, on the
/// normalized scale.
pub fn validation_loss(model: &EvLlm, windows: &[PreparedWindow], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size) {
        let refs: Vec<&PreparedWindow> = chunk.iter().collect();
        let mut tape = Tape::inference();
        let y = model.forward(&mut tape, &refs)?;
        let target = window_batch(chunk);
        for (p, t) in tape.value(y).data().iter().zip(target.data()) {
            total += (p - t) * (p - t);
        }
        count += target.len();
    }
    Ok(total / count as f64)
}

fn snapshot(store: &ParamStore) -> Vec<(ParamId, Tensor)> {
    store.trainable_ids().into_iter().map(|id| (id, store.value(id).clone())).collect()
}

fn restore(store: &mut ParamStore, values: Vec<(ParamId, Tensor)>) {
    for (id, v) in values {
        *store.get_mut(id).value_mut().expect("trainable parameter") = v;
    }
}

pub fn train(panel: &TimeSeriesPanel, model_config: &ModelConfig, config: &TrainConfig) -> Result<(EvLlm, TrainHistory)> {
    train_with_progress(panel, model_config, config, &Vocabulary::builtin(), |_| {})
}

/// [`train`] with a custom vocabulary, calling `progress` after every epoch.
pub fn train_with_progress(
    panel: &TimeSeriesPanel,
    model_config: &ModelConfig,
    config: &TrainConfig,
    vocab: &Vocabulary,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<(EvLlm, TrainHistory)> {
    config.validate()?;
    model_config.validate()?;
    let len = model_config.window_len();
    let splits = split_panels(panel, len)?;
    let mut model = EvLlm::with_vocabulary(model_config.clone(), config.seed, &splits.train, vocab.clone())?;

    let extract = |p: &TimeSeriesPanel, start: usize| extract_window(p, start, model_config.history, model_config.horizon);
    let validation: Vec<PreparedWindow> = window_starts(&(0..splits.validation.len()), len, model_config.horizon)
        .into_iter()
        .map(|s| model.prepare(&extract(&splits.validation, s)?))
        .collect::<Result<_>>()?;
    let last_val = window_starts(&(0..splits.validation.len()), len, model_config.horizon)
        .last()
        .map_or(0, |s| s + len);
    let train_starts = splits.train.len() - len + 1;
    let audit = DataAudit {
        train_rows: splits.bounds.train.clone(),
        validation_rows: splits.bounds.validation.start..splits.bounds.validation.start + last_val,
    };

    let untrained = validation_loss(&model, &validation, config.batch_size)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut epochs: Vec<EpochRecord> = Vec::new();
    let mut best = (f64::INFINITY, 0usize, snapshot(&model.store));
    let mut wait = 0;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let clock = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);
        let picks = index::sample(&mut rng, train_starts, config.windows_per_epoch.min(train_starts)).into_vec();
        // Any numeric failure past initialization means the run diverged.
        let diverged = |e: Error| match e {
            Error::Numeric(message) => Error::Diverged {
                epoch,
                message,
                history: history_text(untrained, &epochs),
            },
            other => other,
        };
        let mut loss_sum = 0.0;
        for chunk in picks.chunks(config.batch_size) {
            let prepared: Vec<PreparedWindow> = chunk
                .iter()
                .map(|&s| model.prepare(&extract(&splits.train, s)?))
                .collect::<Result<_>>()?;
            let refs: Vec<&PreparedWindow> = prepared.iter().collect();
            let mut tape = Tape::new();
            let y = model.forward(&mut tape, &refs).map_err(diverged)?;
            let target = tape.constant(window_batch(&prepared));
            let loss = mse_loss(&mut tape, y, target)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(diverged(Error::Numeric(format!("non-finite training loss {value}"))));
            }
            let grads = tape.backward(loss).map_err(diverged)?.into_param_grads();
            adam.step(&mut model.store, &grads).map_err(diverged)?;
            loss_sum += value * chunk.len() as f64;
        }
        let validation_loss = validation_loss(&model, &validation, config.batch_size).map_err(diverged)?;
        if !validation_loss.is_finite() {
            return Err(diverged(Error::Numeric(format!("non-finite validation loss {validation_loss}"))));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / picks.len() as f64,
            validation_loss,
            seconds: clock.elapsed().as_secs_f64(),
        };
        progress(&record);
        epochs.push(record);
        if validation_loss < best.0 {
            best = (validation_loss, epoch, snapshot(&model.store));
            wait = 0;
        } else {
            wait += 1;
            if wait >= config.patience {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    let (_, best_epoch, values) = best;
    restore(&mut model.store, values);
    Ok((
        model,
        TrainHistory {
            untrained_validation_loss: untrained,
            epochs,
            best_epoch,
            stop_reason,
            audit,
        },
    ))
}

fn history_text(untrained: f64, epochs: &[EpochRecord]) -> String {
    let mut buf = Vec::new();
    write_loss_rows(&mut buf, untrained, epochs).expect("writing to memory");
    String::from_utf8(buf).expect("ascii")
}

#[cfg(test)]
mod tests;
