use std::io::Write;

use super::eval::{evaluate, EvalReport};
use super::{train_with_progress, TrainConfig, TrainHistory};
use crate::data::TimeSeriesPanel;
use crate::error::Result;
use crate::model::{EvLlm, ModelConfig};
use crate::prompt::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoPrompt,
    NoGcn,
    MissingRate10,
    MissingRate20,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPrompt,
        Variant::NoGcn,
        Variant::MissingRate10,
        Variant::MissingRate20,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrompt => "no_prompt",
            Variant::NoGcn => "no_gcn",
            Variant::MissingRate10 => "missing_rate_0.10",
            Variant::MissingRate20 => "missing_rate_0.20",
        }
    }

    pub fn missing_rate(self) -> f64 {
        match self {
            Variant::MissingRate10 => 0.10,
            Variant::MissingRate20 => 0.20,
            _ => 0.0,
        }
    }

    /// Architecture for this variant; the missing-rate variants share the
    /// full model.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            no_prompt: self == Variant::NoPrompt,
            no_gcn: self == Variant::NoGcn,
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub avg_mae: f64,
    pub avg_rmse: f64,
}

#[derive(Debug)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub reports: Vec<EvalReport>,
    /// Histories of the three trained variants: full, no_prompt, no_gcn.
    pub histories: Vec<(Variant, TrainHistory)>,
    /// The full model, reused by the missing-rate variants.
    pub full_model: EvLlm,
}

/// Trains full, no-prompt and no-GCN models with identical seeds and scores
/// all five variants on the test split.
pub fn ablate(
    panel: &TimeSeriesPanel,
    model_config: &ModelConfig,
    config: &TrainConfig,
    vocab: &Vocabulary,
    mut progress: impl FnMut(Variant),
) -> Result<AblationResult> {
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    let mut histories = Vec::new();
    let mut full = None;
    for variant in Variant::ALL {
        progress(variant);
        let report = match variant {
            Variant::Full | Variant::NoPrompt | Variant::NoGcn => {
                let (model, history) = train_with_progress(panel, &variant.model_config(model_config), config, vocab, |_| {})?;
                let report = evaluate(&model, panel, 0.0, config.seed)?;
                histories.push((variant, history));
                if variant == Variant::Full {
                    full = Some(model);
                }
                report
            }
            Variant::MissingRate10 | Variant::MissingRate20 => {
                let model = full.as_ref().expect("full variant runs first");
                evaluate(model, panel, variant.missing_rate(), config.seed)?
            }
        };
        rows.push(AblationRow {
            variant,
            avg_mae: report.avg_mae,
            avg_rmse: report.avg_rmse,
        });
        reports.push(report);
    }
    Ok(AblationResult {
        rows,
        reports,
        histories,
        full_model: full.expect("full variant runs first"),
    })
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut w: W) -> Result<()> {
    writeln!(w, "variant,avg_mae,avg_rmse")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.variant.as_str(), r.avg_mae, r.avg_rmse)?;
    }
    Ok(())
}
