use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use trajmoe::eval::ExperimentConfig;
use trajmoe::synth::{GeneratorConfig, PreprocessConfig};
use trajmoe::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSettings {
    pub fraction: f64,
    pub epochs: usize,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self { fraction: 0.05, epochs: 1 }
    }
}

/// Everything a run reads from its config file. `seed` is copied into every
/// component before use, and `experiment.train` is replaced by `train`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneSettings,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Returns the parsed config and the raw file text.
    pub fn load(path: Option<&Path>) -> Result<(Self, Option<String>)> {
        let Some(path) = path else {
            return Ok((Self::default(), None));
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        Ok((cfg, Some(text)))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync();
    }

    /// Propagates the seed and caps preprocessed windows at the model's
    /// maximum length unless the file sets a cap.
    pub fn sync(&mut self) {
        if self.preprocess.max_len.is_none() {
            self.preprocess.max_len = Some(self.train.model.max_len);
        }
        self.generator.seed = self.seed;
        self.train.seed = self.seed;
        self.experiment.train = self.train.clone();
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
