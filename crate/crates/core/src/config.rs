//! Experiment configuration, read from TOML. Every field except `seed` has a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conkd::DistillConfig;
use crate::data::SyntheticConfig;
use crate::dialogue::{DecodeConfig, LmConfig};
use crate::error::{Error, Result};
use crate::recommender::RecConfig;
use crate::train::TrainConfig;

/// Optional locations of an existing corpus. When unset, commands use the
/// files written by `gen-data` under the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dialogues: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    pub item_kg: Option<PathBuf>,
    pub word_kg: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub decode: DecodeConfig,
    /// Evaluate at most this many held-out agent turns (all when unset).
    pub max_turns: Option<usize>,
    pub bench_tokens: usize,
    pub bench_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![1, 10, 50],
            decode: DecodeConfig::default(),
            max_turns: None,
            bench_tokens: 1000,
            bench_warmup: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_heldout")]
    pub heldout_fraction: f64,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub data: SyntheticConfig,
    #[serde(default)]
    pub rec: RecConfig,
    /// Dialogue teachers and students share this architecture and schedule.
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default = "default_classifier")]
    pub classifier: LmConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_heldout() -> f64 {
    0.1
}

fn default_classifier() -> LmConfig {
    LmConfig {
        model: conkd_nn::TransformerConfig {
            layers: 1,
            ..LmConfig::default().model
        },
        train: TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            heldout_fraction: default_heldout(),
            paths: Paths::default(),
            data: SyntheticConfig::default(),
            rec: RecConfig::default(),
            lm: LmConfig::default(),
            classifier: default_classifier(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |r: Result<()>, what: &str| r.map_err(|e| Error::Config(format!("{what}: {e}")));
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(Error::Config(format!("heldout_fraction {} outside [0, 1)", self.heldout_fraction)));
        }
        cfg(self.data.validate(), "data")?;
        cfg(self.rec.train.validate(), "rec.train")?;
        cfg(self.lm.train.validate(), "lm.train")?;
        cfg(self.lm.model.validate().map_err(Into::into), "lm.model")?;
        cfg(self.classifier.train.validate(), "classifier.train")?;
        cfg(self.classifier.model.validate().map_err(Into::into), "classifier.model")?;
        cfg(self.distill.validate(), "distill")?;
        cfg(self.eval.decode.validate(), "eval.decode")?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::Config("eval.ks must be nonempty and positive".into()));
        }
        if self.rec.hidden == 0 {
            return Err(Error::Config("rec.hidden must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conkd::GateMode;

    #[test]
    fn minimal_file_takes_defaults() {
        let c = ExperimentConfig::from_toml("seed = 3").unwrap();
        assert_eq!(c, ExperimentConfig::with_seed(3));
        assert_eq!((c.distill.eta, c.distill.gamma), (0.3, 0.6));
        assert_eq!((c.lm.train.lr, c.lm.train.batch_size, c.lm.train.clip_norm), (1e-3, 32, 1.0));
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_fail() {
        assert!(matches!(ExperimentConfig::from_toml(""), Err(Error::Config(_))));
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2").is_err());
        assert!(ExperimentConfig::from_toml("seed = 1\n[distill]\neta = 1.5").is_err());
    }

    #[test]
    fn nested_sections_parse() {
        let c = ExperimentConfig::from_toml(
            "seed = 1\n[distill]\ngate = { mode = \"fixed\", value = 0.5 }\n[lm.model]\nlayers = 1\nhidden = 16\nheads = 2\nffn = 32\nmax_len = 40\ndropout = 0.0\n[eval]\nks = [1, 5]\n",
        )
        .unwrap();
        assert_eq!(c.distill.gate, GateMode::Fixed { value: 0.5 });
        assert_eq!(c.lm.model.hidden, 16);
        assert_eq!(c.eval.ks, vec![1, 5]);
    }

    #[test]
    fn toml_round_trip() {
        let c = ExperimentConfig::with_seed(9);
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
