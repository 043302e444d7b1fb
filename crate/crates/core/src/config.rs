//! Run configuration: one JSON document, unknown keys rejected, recorded in
//! every checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::refiner::{GlobalMode, InputMode};
use crate::sampler::{SamplerConfig, EDIT_CFG_GRID};
use crate::training::{TrainConfig, VaeTrainConfig};

pub const SEED_ENV: &str = "OVU_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Toy,
    /// Full-size shapes; only parameter counting is supported.
    PaperScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub train: TrainConfig,
    pub vae: VaeTrainConfig,
    pub sampler: SamplerConfig,
    pub input_mode: InputMode,
    pub global_mode: GlobalMode,
    /// `(cfg_img, cfg_txt)` pairs swept by `edit`.
    pub cfg_grid: Vec<(f64, f64)>,
    pub eval_per_category: usize,
    pub eval_seed: u64,
    /// Stage-0 steps per configuration in the refiner ablation.
    pub ablation_steps: usize,
    pub batch_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Toy,
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            train: TrainConfig::default(),
            vae: VaeTrainConfig::default(),
            sampler: SamplerConfig::default(),
            input_mode: InputMode::ConcatTwo,
            global_mode: GlobalMode::ClsToken,
            cfg_grid: EDIT_CFG_GRID.to_vec(),
            eval_per_category: 50,
            eval_seed: 1234,
            ablation_steps: 150,
            batch_size: 32,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies the `OVU_SEED` override if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not a u64")))?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut m = match self.preset {
            Preset::Toy => ModelConfig::toy(),
            Preset::PaperScale => ModelConfig::paper(),
        };
        m.refiner.input_mode = self.input_mode;
        m.refiner.global_mode = self.global_mode;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.sampler.validate()?;
        if self.batch_size == 0 || self.eval_per_category == 0 {
            return Err(Error::Config("batch_size and eval_per_category must be positive".into()));
        }
        if self.cfg_grid.iter().any(|&(a, b)| !(a >= 0.0 && b >= 0.0)) {
            return Err(Error::Config("guidance scales must be nonnegative".into()));
        }
        Ok(())
    }

    /// Training entry points refuse presets that are only meant for counting.
    pub fn require_trainable(&self) -> Result<()> {
        match self.preset {
            Preset::Toy => Ok(()),
            Preset::PaperScale => Err(Error::Config("paper_scale preset supports dry-run counting only".into())),
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_partial_documents_fill_in() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_json(&serde_json::to_string(&d).unwrap()).unwrap(), d);
        let p = RunConfig::from_json(r#"{"seed": 9, "train": {"text_dropout": 0.2}}"#).unwrap();
        assert_eq!(p.seed, 9);
        assert_eq!(p.train.text_dropout, 0.2);
        assert_eq!(p.train.image_dropout, d.train.image_dropout);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        for doc in [r#"{"sed": 1}"#, r#"{"train": {"txt_dropout": 0.1}}"#, r#"{"input_mode": "last"}"#] {
            assert!(matches!(RunConfig::from_json(doc), Err(Error::Config(_))), "{doc}");
        }
    }

    #[test]
    fn ablation_flags_reach_the_model_config() {
        let c = RunConfig::from_json(r#"{"input_mode": "last_only", "global_mode": "averaged"}"#).unwrap();
        let m = c.model_config();
        assert_eq!((m.refiner.input_mode, m.refiner.global_mode), (InputMode::LastOnly, GlobalMode::Averaged));
        assert!(RunConfig { preset: Preset::PaperScale, ..c }.require_trainable().is_err());
    }
}
