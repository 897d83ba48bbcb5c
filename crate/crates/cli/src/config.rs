//! Run configuration file.
//!
//! ```toml
//! [model]   # architecture; every key optional, see ModelConfig
//! [train]   # optimization and evaluation; see TrainConfig
//! [paths]   # inputs and outputs, relative to the config file
//! ```

use std::path::{Path, PathBuf};

use evllm::model::ModelConfig;
use evllm::prompt::Vocabulary;
use evllm::train::{config_hash, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub load_csv: PathBuf,
    pub weather_csv: PathBuf,
    /// Optional `station_id,name,latitude,longitude` metadata.
    pub stations_csv: Option<PathBuf>,
    /// One token per line; the builtin table when absent.
    pub vocabulary: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            load_csv: "data/load.csv".into(),
            weather_csv: "data/weather.csv".into(),
            stations_csv: None,
            vocabulary: None,
            checkpoint: "out/model.ckpt".into(),
            output_dir: "out".into(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {}", e.message())))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.paths.resolve(base);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn vocabulary(&self) -> Result<Vocabulary, CliError> {
        match &self.paths.vocabulary {
            Some(p) => Ok(Vocabulary::from_file(p)?),
            None => Ok(Vocabulary::builtin()),
        }
    }

    /// Hash of the model and training settings, extended with the
    /// vocabulary fingerprint when a custom table is configured.
    pub fn hash(&self, vocab: &Vocabulary) -> String {
        let base = config_hash(&self.model, &self.train);
        if *vocab == Vocabulary::builtin() {
            base
        } else {
            sha256_hex(&format!("{base}:{}", vocab.fingerprint()))
        }
    }
}

impl Paths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.load_csv);
        fix(&mut self.weather_csv);
        fix(&mut self.checkpoint);
        fix(&mut self.output_dir);
        if let Some(p) = self.stations_csv.as_mut() {
            fix(p);
        }
        if let Some(p) = self.vocabulary.as_mut() {
            fix(p);
        }
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["[model]\nhistroy = 10\n", "[trian]\n", "seed = 3\n", "[paths]\nload = \"x\"\n"] {
            assert!(matches!(RunConfig::parse(text), Err(CliError::Usage(_))), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(RunConfig::parse("[model]\nhorizon = 50\n").is_err());
        assert!(RunConfig::parse("[train]\nmissing_rate = 1.0\n").is_err());
    }

    #[test]
    fn paths_resolve_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[paths]\nload_csv = \"in/load.csv\"\ncheckpoint = \"/abs/m.ckpt\"\n").unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.paths.load_csv, dir.path().join("in/load.csv"));
        assert_eq!(c.paths.checkpoint, PathBuf::from("/abs/m.ckpt"));
    }

    #[test]
    fn hash_tracks_custom_vocabulary() {
        let c = RunConfig::default();
        let builtin = Vocabulary::builtin();
        assert_eq!(c.hash(&builtin), config_hash(&c.model, &c.train));
        let custom = Vocabulary::from_text(&format!("{}\nkilowatt", builtin.tokens().join("\n"))).unwrap();
        assert_ne!(c.hash(&custom), c.hash(&builtin));
    }
}
