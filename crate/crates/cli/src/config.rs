//! Run configuration read from TOML. Every section is optional and falls back to defaults.

use std::path::Path;

use anyhow::{Context, Result};
use imitkd_core::dagger::SweepConfig;
use imitkd_core::data::ToyTaskConfig;
use imitkd_core::decoding::DecodeConfig;
use imitkd_core::optim::AdamConfig;
use imitkd_core::trainer::{Generation, TrainConfig};
use imitkd_core::ModelConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Master seed for initialisation, data order, replacement draws and sampling.
    pub seed: u64,
    pub threads: usize,
    pub data: ToyTaskConfig,
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub teacher_train: TrainConfig,
    pub distill: TrainConfig,
    pub seqkd: SeqKdConfig,
    pub seqinter: SeqInterConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub dagger: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqKdConfig {
    pub beam: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeqInterConfig {
    pub beam: usize,
    pub max_len: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch: usize,
    pub bin_width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub beams: Vec<usize>,
    /// Test sources timed per pass.
    pub sentences: usize,
    pub passes: usize,
    pub max_len: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            threads: 1,
            data: ToyTaskConfig::default(),
            teacher: ModelConfig::default_teacher(),
            student: ModelConfig::default_student(),
            teacher_train: TrainConfig::teacher(),
            distill: TrainConfig::default(),
            seqkd: SeqKdConfig::default(),
            seqinter: SeqInterConfig::default(),
            decode: DecodeConfig::greedy(128),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            dagger: SweepConfig::default(),
        }
    }
}

impl Default for SeqKdConfig {
    fn default() -> Self {
        SeqKdConfig { beam: 5, max_len: 128 }
    }
}

impl Default for SeqInterConfig {
    fn default() -> Self {
        SeqInterConfig {
            beam: 5,
            max_len: 128,
            train: TrainConfig {
                iterations: 500,
                valid_interval: 100,
                generation: Generation::Greedy,
                optimizer: AdamConfig { base_lr: 0.002, warmup: 50, ..AdamConfig::default() },
                ..TrainConfig::default()
            },
        }
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { batch: 64, bin_width: 20 }
    }
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { beams: vec![1, 5], sentences: 100, passes: 3, max_len: 128 }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies command-line overrides; the master seed flows into every training section.
    pub fn with_overrides(mut self, seed: Option<u64>, threads: Option<usize>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(t) = threads {
            self.threads = t;
        }
        self.threads = self.threads.max(1);
        for t in [&mut self.teacher_train, &mut self.distill, &mut self.seqinter.train] {
            t.seed = self.seed;
            t.threads = self.threads;
        }
        self.dagger.seed = self.seed;
        self.dagger.threads = self.threads;
        self
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use imitkd_core::trainer::Variant;

    #[test]
    fn default_round_trips_through_toml() {
        let c = Config::default();
        let back: Config = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<Config>("sed = 3").is_err());
        assert!(toml::from_str::<Config>("[distill]\nbatch = 3").is_err());
        let c: Config = toml::from_str("[distill]\nvariant = \"ImitKD+Full\"\nbatch_size = 8").unwrap();
        assert_eq!(c.distill.variant, Variant::IMITKD_FULL);
        assert_eq!(c.distill.batch_size, 8);
    }

    #[test]
    fn seed_override_reaches_training_sections() {
        let c = Config::default().with_overrides(Some(9), Some(0));
        assert_eq!((c.distill.seed, c.teacher_train.seed, c.dagger.seed), (9, 9, 9));
        assert_eq!(c.threads, 1);
    }
}
