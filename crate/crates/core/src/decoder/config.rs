use serde::{Deserialize, Serialize};

use crate::attention::Similarity;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Stereo,
    Flow,
}

/// Decoder hyperparameters. Per-scale arrays follow two orders:
/// `channels` and `encoder_depths` go fine to coarse (1/4 .. 1/32) like the
/// encoder; `depths` and `windows` go coarse to fine (1/32 .. 1/4) like the
/// decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub task: Task,
    pub channels: [usize; 4],
    pub encoder_depths: [usize; 4],
    pub depths: [usize; 4],
    pub windows: [usize; 4],
    pub heads: usize,
    pub mlp_ratio: usize,
    pub glu_ratio: usize,
    pub k_init: usize,
    pub similarity: Similarity,
    pub inject_weights: bool,
    pub gated: bool,
    pub mask_embedding: bool,
    /// Consistency threshold in pixels of the current scale.
    pub consistency_a: f64,
    pub epsilon: f64,
    pub gamma_loss: f64,
    pub beta_init: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig::desk(Task::Stereo)
    }
}

impl DecoderConfig {
    pub fn desk(task: Task) -> DecoderConfig {
        DecoderConfig {
            task,
            channels: [16, 24, 32, 48],
            encoder_depths: [1, 1, 1, 1],
            depths: [2, 2, 2, 1],
            windows: [5, 5, 3, 3],
            heads: 2,
            mlp_ratio: 2,
            glu_ratio: 2,
            k_init: 5,
            similarity: Similarity::NegL1,
            inject_weights: true,
            gated: true,
            mask_embedding: true,
            consistency_a: 1.0,
            epsilon: 0.01,
            gamma_loss: 0.9,
            beta_init: 0.1,
        }
    }

    /// Paper-scale presets `T`, `S`, `B`, and `desk`.
    pub fn preset(name: &str, task: Task) -> Result<DecoderConfig> {
        let paper = |channels: [usize; 4]| DecoderConfig {
            channels,
            encoder_depths: [2, 2, 6, 2],
            depths: [8, 8, 8, 2],
            heads: 4,
            ..DecoderConfig::desk(task)
        };
        match name.to_ascii_lowercase().as_str() {
            "desk" => Ok(DecoderConfig::desk(task)),
            "t" => Ok(paper([32, 64, 128, 160])),
            "s" => Ok(paper([64, 128, 160, 320])),
            "b" => Ok(paper([128, 256, 320, 512])),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    /// Channel width of decoder level `k` (0 = 1/32).
    pub fn level_channels(&self, k: usize) -> usize {
        self.channels[3 - k]
    }

    /// Downsampling factor of decoder level `k`.
    pub fn level_factor(&self, k: usize) -> usize {
        32 >> k
    }

    /// Number of cross layers `N`.
    pub fn num_cross(&self) -> usize {
        self.depths.iter().sum()
    }

    /// Number of supervised self/upsample outputs `N + 4`.
    pub fn num_self(&self) -> usize {
        self.num_cross() + 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        for (k, &w) in self.windows.iter().enumerate() {
            if w % 2 == 0 {
                return Err(Error::Config(format!("window {w} at level {k} is not odd")));
            }
        }
        for &c in &self.channels {
            if c == 0 || c % self.heads != 0 {
                return Err(Error::Config(format!("channels {c} not divisible by heads {}", self.heads)));
            }
        }
        if self.k_init % 2 == 0 {
            return Err(Error::Config("k_init must be odd".into()));
        }
        if !(self.gamma_loss > 0.0 && self.gamma_loss <= 1.0) {
            return Err(Error::Config("gamma_loss must be in (0, 1]".into()));
        }
        Ok(())
    }
}
