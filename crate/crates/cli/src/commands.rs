use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::Duration;
use clap::{Args, Parser, Subcommand};
use evllm::data::ingest::{format_timestamp, write_load_csv, write_stations_csv, write_weather_csv};
use evllm::data::{ingest, synth_generate, SynthConfig};
use evllm::model::EvLlm;
use evllm::train::{
    ablate, evaluate, evaluate_baseline, read_predictions_csv, split_panels, train_with_progress, write_ablation_csv,
    Baseline, BaselineKind, EvalReport, Variant,
};

use crate::config::{sha256_hex, RunConfig};
use crate::svg::{heatmap, line_chart, Series};
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "evllm", version, about = "EV charging load forecasting with a frozen transformer backbone")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic load, weather and station dataset.
    Synth(SynthArgs),
    /// Train a model and write the checkpoint and loss history.
    Train(TrainArgs),
    /// Score a checkpoint and the baselines on the test split.
    Evaluate(EvaluateArgs),
    /// Train and score the full model and its ablations.
    Ablate(TrainArgs),
    /// Render charts from a prediction dump.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub stations: usize,
    #[arg(long, default_value_t = 365)]
    pub days: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Weight of the shared regional factor, in [0, 1].
    #[arg(long, default_value_t = 0.6)]
    pub coupling: f64,
    /// Output directory for load.csv, weather.csv and stations.csv.
    #[arg(long)]
    pub out: PathBuf,
}

/// Command-line values that replace config file settings.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub windows_per_epoch: Option<usize>,
    #[arg(long)]
    pub missing_rate: Option<f64>,
    #[arg(long)]
    pub no_prompt: bool,
    #[arg(long)]
    pub no_gcn: bool,
    #[arg(long)]
    pub load_csv: Option<PathBuf>,
    #[arg(long)]
    pub weather_csv: Option<PathBuf>,
    #[arg(long)]
    pub stations_csv: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, c: &mut RunConfig) {
        let t = &mut c.train;
        t.seed = self.seed.unwrap_or(t.seed);
        t.learning_rate = self.learning_rate.unwrap_or(t.learning_rate);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.max_epochs = self.max_epochs.unwrap_or(t.max_epochs);
        t.patience = self.patience.unwrap_or(t.patience);
        t.windows_per_epoch = self.windows_per_epoch.unwrap_or(t.windows_per_epoch);
        t.missing_rate = self.missing_rate.unwrap_or(t.missing_rate);
        c.model.no_prompt |= self.no_prompt;
        c.model.no_gcn |= self.no_gcn;
        let p = &mut c.paths;
        if let Some(v) = &self.load_csv {
            p.load_csv = v.clone();
        }
        if let Some(v) = &self.weather_csv {
            p.weather_csv = v.clone();
        }
        if let Some(v) = &self.stations_csv {
            p.stations_csv = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            p.output_dir = v.clone();
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint path, replacing `paths.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Also write every window's forecast next to the metrics, as needed by `report`.
    #[arg(long)]
    pub dump_predictions: bool,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics file written by `evaluate`.
    #[arg(long)]
    pub eval: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Forecast step plotted in the line charts.
    #[arg(long, default_value_t = 16)]
    pub horizon: usize,
    /// Stations to plot; all when omitted.
    #[arg(long, value_delimiter = ',')]
    pub stations: Vec<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn provenance(hash: &str, seed: u64) -> String {
    format!("config_hash={hash} seed={seed}")
}

/// Writes `path` with a leading `# <provenance>` line, creating parent
/// directories as needed.
fn write_artifact(
    path: &Path,
    provenance: &str,
    body: impl FnOnce(&mut BufWriter<File>) -> evllm::Result<()>,
) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# {provenance}")?;
    body(&mut w)?;
    w.flush()?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig::new(a.stations, a.days, a.seed, a.coupling);
    let panel = synth_generate(&cfg)?;
    let json = serde_json::to_string(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let tag = provenance(&sha256_hex(&json), a.seed);
    write_artifact(&a.out.join("load.csv"), &tag, |w| write_load_csv(&panel, w))?;
    write_artifact(&a.out.join("weather.csv"), &tag, |w| write_weather_csv(&panel, w))?;
    write_artifact(&a.out.join("stations.csv"), &tag, |w| write_stations_csv(panel.stations(), w))?;
    println!(
        "wrote {} stations x {} hours ({} load rows) to {}",
        panel.n_stations(),
        panel.len(),
        panel.n_stations() * panel.len(),
        a.out.display()
    );
    Ok(())
}

struct Session {
    config: RunConfig,
    vocab: evllm::prompt::Vocabulary,
    hash: String,
    panel: evllm::data::TimeSeriesPanel,
}

fn open_session(path: &Path, overrides: &Overrides) -> Result<Session> {
    let mut config = RunConfig::load(path)?;
    overrides.apply(&mut config);
    config.validate()?;
    let vocab = config.vocabulary()?;
    let hash = config.hash(&vocab);
    let p = &config.paths;
    let (panel, report) = ingest(&p.load_csv, &p.weather_csv, p.stations_csv.as_deref())?;
    for line in report.to_string().lines() {
        eprintln!("ingest: {line}");
    }
    Ok(Session {
        config,
        vocab,
        hash,
        panel,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let s = open_session(&a.config, &a.overrides)?;
    let (model_cfg, train_cfg) = (&s.config.model, &s.config.train);
    let out = &s.config.paths.output_dir;
    let tag = provenance(&s.hash, train_cfg.seed);
    let result = train_with_progress(&s.panel, model_cfg, train_cfg, &s.vocab, |e| {
        eprintln!(
            "epoch {}: train {:.5} validation {:.5} ({:.1}s)",
            e.epoch, e.train_loss, e.validation_loss, e.seconds
        );
    });
    let (model, history) = match result {
        Ok(v) => v,
        Err(evllm::Error::Diverged { epoch, message, history }) => {
            let path = out.join("history.csv");
            write_text(&path, &format!("# {tag}\n{history}"))?;
            eprintln!("partial history written to {}", path.display());
            return Err(evllm::Error::Diverged { epoch, message, history }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| s.config.paths.checkpoint.clone());
    if let Some(dir) = checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(&checkpoint)?);
    model.save(&mut w, train_cfg.seed, &s.hash)?;
    w.flush()?;
    write_artifact(&out.join("history.csv"), &tag, |w| history.write_csv(w))?;
    write_artifact(&out.join("timing.csv"), &tag, |w| history.write_timing_csv(w))?;
    println!(
        "best epoch {} of {} (validation loss {:.5}, untrained {:.5}, stopped by {}); checkpoint {}",
        history.best_epoch,
        history.epochs.len(),
        history.best_validation_loss(),
        history.untrained_validation_loss,
        history.stop_reason.as_str(),
        checkpoint.display()
    );
    Ok(())
}

fn predictions_path(metrics: &Path) -> PathBuf {
    let stem = metrics.file_stem().and_then(|s| s.to_str()).unwrap_or("eval");
    metrics.with_file_name(format!("{stem}_predictions.csv"))
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let s = open_session(&a.config, &a.overrides)?;
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| s.config.paths.checkpoint.clone());
    let file = File::open(&checkpoint)
        .map_err(|e| CliError::Data(format!("cannot open checkpoint {}: {e}", checkpoint.display())))?;
    let (model, seed, stored) = EvLlm::load(BufReader::new(file))?;
    if stored != s.hash {
        return Err(CliError::Usage(format!(
            "refusing to evaluate: checkpoint {} was trained under config hash {stored}, but the current config hashes to {}; retrain or pass the matching config",
            checkpoint.display(),
            s.hash
        )));
    }
    let t = &s.config.train;
    let tag = format!("{} missing_rate={}", provenance(&s.hash, seed), t.missing_rate);
    let report = evaluate(&model, &s.panel, t.missing_rate, t.seed)?;
    let out = &s.config.paths.output_dir;
    let metrics = out.join("eval.csv");
    write_artifact(&metrics, &tag, |w| report.write_metrics_csv(w))?;
    if a.dump_predictions {
        write_artifact(&predictions_path(&metrics), &tag, |w| report.write_predictions_csv(w))?;
    }

    let m = &s.config.model;
    let splits = split_panels(&s.panel, m.window_len())?;
    let mut rows = vec![("evllm".to_string(), report.avg_mae, report.avg_rmse)];
    for kind in BaselineKind::ALL {
        let baseline = Baseline::fit(kind, &splits.train)?;
        let r = evaluate_baseline(&baseline, &s.panel, m.history, m.horizon, t.missing_rate, t.seed)?;
        rows.push((kind.as_str().to_string(), r.avg_mae, r.avg_rmse));
    }
    write_artifact(&out.join("baselines.csv"), &tag, |w| {
        writeln!(w, "model,avg_mae,avg_rmse")?;
        for (name, mae, rmse) in &rows {
            writeln!(w, "{name},{mae},{rmse}")?;
        }
        Ok(())
    })?;
    for (name, mae, rmse) in &rows {
        println!("{name:<20} mae {mae:.4} rmse {rmse:.4}");
    }
    println!("metrics written to {}", metrics.display());
    Ok(())
}

fn cmd_ablate(a: &TrainArgs) -> Result<()> {
    let s = open_session(&a.config, &a.overrides)?;
    let (model_cfg, train_cfg) = (&s.config.model, &s.config.train);
    let result = ablate(&s.panel, model_cfg, train_cfg, &s.vocab, |v| eprintln!("variant {}", v.as_str()))?;
    let out = &s.config.paths.output_dir;
    let tag = provenance(&s.hash, train_cfg.seed);
    write_artifact(&out.join("ablation.csv"), &tag, |w| write_ablation_csv(&result.rows, w))?;
    for (variant, history) in &result.histories {
        let path = out.join(format!("history_{}.csv", variant.as_str()));
        write_artifact(&path, &tag, |w| history.write_csv(w))?;
    }
    for (variant, report) in Variant::ALL.iter().zip(&result.reports) {
        let path = out.join(format!("eval_{}.csv", variant.as_str()));
        write_artifact(&path, &tag, |w| report.write_metrics_csv(w))?;
    }
    for r in &result.rows {
        println!("{:<20} mae {:.4} rmse {:.4}", r.variant.as_str(), r.avg_mae, r.avg_rmse);
    }
    Ok(())
}

/// The `# ...` provenance line at the top of `path`, if any.
fn read_provenance(path: &Path) -> Result<Option<String>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    Ok(first.strip_prefix("# ").map(|s| s.trim_end().to_string()))
}

fn file_safe(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    if !a.eval.exists() {
        return Err(CliError::Data(format!("evaluation file {} not found", a.eval.display())));
    }
    let dump = predictions_path(&a.eval);
    if !dump.exists() {
        return Err(CliError::Data(format!(
            "no prediction dump at {}; re-run `evllm evaluate --dump-predictions` to save per-window forecasts",
            dump.display()
        )));
    }
    let tag = read_provenance(&dump)?.unwrap_or_default();
    let (stations, windows) = read_predictions_csv(File::open(&dump)?)?;
    let report = EvalReport::from_predictions(stations, windows)?;
    let h = a.horizon;
    if h == 0 || h > report.horizon() {
        return Err(CliError::Usage(format!("--horizon must lie in 1..={}, got {h}", report.horizon())));
    }
    let selected: Vec<usize> = if a.stations.is_empty() {
        (0..report.stations.len()).collect()
    } else {
        a.stations
            .iter()
            .map(|id| {
                report
                    .stations
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| CliError::Usage(format!("station {id} is not in {}", dump.display())))
            })
            .collect::<Result<_>>()?
    };

    let times: Vec<String> = report
        .predictions
        .iter()
        .map(|p| format_timestamp(&(p.forecast_start + Duration::hours(h as i64 - 1))))
        .collect();
    let first = times.first().cloned().unwrap_or_default();
    let last = times.last().cloned().unwrap_or_default();
    for s in selected {
        let id = &report.stations[s];
        let predicted: Vec<f64> = report.predictions.iter().map(|p| p.predicted.get(s, h - 1)).collect();
        let actual: Vec<f64> = report.predictions.iter().map(|p| p.actual.get(s, h - 1)).collect();
        let name = format!("forecast_{}_h{h}", file_safe(id));
        write_artifact(&a.out.join(format!("{name}.csv")), &tag, |w| {
            writeln!(w, "time,predicted,actual")?;
            for ((t, p), y) in times.iter().zip(&predicted).zip(&actual) {
                writeln!(w, "{t},{p},{y}")?;
            }
            Ok(())
        })?;
        let svg = line_chart(
            &format!("Station {id}: step {h} forecast vs actual"),
            &tag,
            "load (kWh)",
            (&first, &last),
            &[
                Series { name: "actual", color: "#222222", values: &actual },
                Series { name: "predicted", color: "#d62728", values: &predicted },
            ],
        );
        write_text(&a.out.join(format!("{name}.svg")), &svg)?;
    }

    let rows: Vec<Vec<f64>> = (0..report.stations.len())
        .map(|s| (0..report.horizon()).map(|k| report.rmse.get(s, k)).collect())
        .collect();
    write_artifact(&a.out.join("rmse_heatmap.csv"), &tag, |w| {
        let header: Vec<String> = (1..=report.horizon()).map(|k| format!("h{k}")).collect();
        writeln!(w, "station,{}", header.join(","))?;
        for (id, row) in report.stations.iter().zip(&rows) {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{id},{}", cells.join(","))?;
        }
        Ok(())
    })?;
    let svg = heatmap("RMSE by station and forecast step", &tag, &report.stations, &rows);
    write_text(&a.out.join("rmse_heatmap.svg"), &svg)?;
    println!("report written to {}", a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_config_values() {
        let mut c = RunConfig::default();
        let o = Overrides {
            seed: Some(99),
            max_epochs: Some(3),
            no_gcn: true,
            output_dir: Some("elsewhere".into()),
            ..Overrides::default()
        };
        o.apply(&mut c);
        assert_eq!(c.train.seed, 99);
        assert_eq!(c.train.max_epochs, 3);
        assert!(c.model.no_gcn && !c.model.no_prompt);
        assert_eq!(c.paths.output_dir, PathBuf::from("elsewhere"));
        assert_eq!(c.train.patience, RunConfig::default().train.patience);
    }

    #[test]
    fn prediction_dump_sits_next_to_metrics() {
        assert_eq!(predictions_path(Path::new("out/eval.csv")), PathBuf::from("out/eval_predictions.csv"));
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(file_safe("st 1/a"), "st_1_a");
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
