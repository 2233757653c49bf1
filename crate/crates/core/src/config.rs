//! The single TOML file that drives every stage.
//!
//! ```toml
//! [data]
//! dir = "data"            # default: $LINKREC_DATA_DIR, else "data"
//! papers = "papers.jsonl"
//!
//! [model]
//! abstract_len = 200
//!
//! [train]
//! learning_rate = 0.0005
//! T = 6
//!
//! [eval]
//! ks = [1, 5, 10]
//!
//! [synth]
//! topics = 5
//! ```
//!
//! Relative file names in `[data]` resolve against `dir`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::EvalConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

pub const DATA_DIR_ENV: &str = "LINKREC_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub papers: PathBuf,
    pub repos: PathBuf,
    pub bridges: PathBuf,
    pub embeddings: PathBuf,
    /// Directory for edge lists and the pair file written by `build-graphs`.
    pub graphs: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub store: PathBuf,
    pub metrics: PathBuf,
    pub details: PathBuf,
    pub plot: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: std::env::var_os(DATA_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("data")),
            papers: "papers.jsonl".into(),
            repos: "repos.jsonl".into(),
            bridges: "bridges.jsonl".into(),
            embeddings: "embeddings.txt".into(),
            graphs: "graphs".into(),
            checkpoint: "model.ckpt".into(),
            history: "history.csv".into(),
            store: "embeddings.lres".into(),
            metrics: "metrics.csv".into(),
            details: "details.jsonl".into(),
            plot: "metrics.svg".into(),
        }
    }
}

impl DataConfig {
    pub fn resolve(&self, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            self.dir.join(file)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.synth.validate()
    }

    /// Hash stamped into checkpoints: everything that affects trained parameters.
    pub fn training_hash(&self) -> String {
        crate::checkpoint::config_hash(&(&self.model, &self.train))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = Config::from_toml("[train]\nT = 3\nseed = 11\n[synth]\ntopics = 4\n").unwrap();
        assert_eq!(cfg.train.t, 3);
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.train.learning_rate, 0.0005);
        assert_eq!(cfg.synth.topics, 4);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn round_trip_and_unknown_keys() {
        let cfg = Config::default();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(Config::from_toml("[train]\nlr = 1\n"), Err(Error::Config(_))));
        assert!(matches!(Config::from_toml("[bogus]\n"), Err(Error::Config(_))));
    }

    #[test]
    fn readme_example_parses() {
        let readme = include_str!("../../../README.md");
        let start = readme.find("```toml\n[data]").expect("example present") + "```toml\n".len();
        let end = start + readme[start..].find("```").unwrap();
        let cfg = Config::from_toml(&readme[start..end]).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn resolve_relative_only() {
        let data = DataConfig {
            dir: "/d".into(),
            ..Default::default()
        };
        assert_eq!(data.resolve(Path::new("x.jsonl")), PathBuf::from("/d/x.jsonl"));
        assert_eq!(data.resolve(Path::new("/abs/x")), PathBuf::from("/abs/x"));
    }
}
