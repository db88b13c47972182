//! TOML run configuration for the command-line tool.
//!
//! ```toml
//! task = "stereo"          # or "flow"
//! preset = "desk"          # desk, T, S, B
//! seed = 0                 # MATCHATTN_SEED overrides this
//!
//! [loss]
//! consistency_a = 1.0
//! epsilon = 0.01
//! gamma = 0.9
//!
//! [scene]
//! kind = "constant_shift"  # two_layer, smooth_warp
//! height = 128
//! width = 256
//! [scene.params]
//! shift = 4.0
//!
//! [train]
//! steps = 2000
//! lr = 5e-4
//!
//! [bench]
//! sides = [64, 128, 256, 512]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, Task};
use crate::error::{Error, Result};
use crate::harness::bench::BenchConfig;
use crate::harness::scene::{SceneKind, SceneParams};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "MATCHATTN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConstants {
    pub consistency_a: f64,
    pub epsilon: f64,
    pub gamma: f64,
}

impl Default for LossConstants {
    fn default() -> Self {
        let d = DecoderConfig::default();
        LossConstants {
            consistency_a: d.consistency_a,
            epsilon: d.epsilon,
            gamma: d.gamma_loss,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub kind: SceneKind,
    pub height: usize,
    pub width: usize,
    pub params: SceneParams,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            kind: SceneKind::ConstantShift,
            height: 128,
            width: 256,
            params: SceneParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub preset: String,
    pub seed: u64,
    pub loss: LossConstants,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Stereo,
            preset: "desk".into(),
            seed: 0,
            loss: LossConstants::default(),
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `MATCHATTN_SEED` if set, then copies the seed into the
    /// training and benchmark sections.
    pub fn resolve_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        self.train.seed = self.seed;
        self.bench.seed = self.seed;
        Ok(())
    }

    pub fn decoder(&self) -> Result<DecoderConfig> {
        let mut d = DecoderConfig::preset(&self.preset, self.task)?;
        d.consistency_a = self.loss.consistency_a;
        d.epsilon = self.loss.epsilon;
        d.gamma_loss = self.loss.gamma;
        d.validate()?;
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let c = RunConfig::from_toml("task = \"flow\"\n[train]\nsteps = 7\n[scene]\nkind = \"smooth_warp\"\n").unwrap();
        assert_eq!(c.task, Task::Flow);
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.lr, 5e-4);
        assert_eq!(c.scene.kind, SceneKind::SmoothWarp);
        assert_eq!(c.decoder().unwrap().task, Task::Flow);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("tsak = \"flow\"").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 1.0").is_err());
    }

    #[test]
    fn round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }
}
