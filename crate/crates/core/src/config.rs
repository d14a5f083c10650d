//! Run configuration, read from JSON with sections `model`, `task`,
//! `optim`, `schedule` and `run`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::TdnnConfig;
use crate::optim::AdamWConfig;
use crate::poformer::{PoFormerConfig, PositionalEncoding};
use crate::schedule::LrSchedule;
use crate::synth::SyntheticTaskConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTaskConfig,
    pub optim: AdamWConfig,
    pub schedule: LrSchedule,
    pub run: RunSection,
}

impl RunConfig {
    /// Desk-scale recipe: 20 speakers, batch 32, 2000 steps.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            task: SyntheticTaskConfig {
                num_speakers: 20,
                frames_per_utterance: 32,
                feature_dim: 24,
                spread: 1.0,
                seed: 2024,
            },
            optim: AdamWConfig::default(),
            schedule: LrSchedule {
                lr_max: 1e-3,
                lr_min: 5e-5,
                total_steps: 2000,
                warmup_steps: 200,
            },
            run: RunSection {
                steps: 2000,
                batch_size: 32,
                seed: 7,
            },
        }
    }

    /// Tiny network used by the full-model gradient check:
    /// N=2, d=16, 2 heads, 11 frames, batch 3.
    pub fn gradcheck() -> Self {
        let mut cfg = Self::desk();
        cfg.model.tdnn = TdnnConfig::xvector(8, 12);
        cfg.model.pooling = PoFormerConfig {
            layers: 2,
            dim: 16,
            heads: 2,
            ffn_dim: 32,
            peg_kernel: 3,
            pos_encoding: PositionalEncoding::Peg,
            ..PoFormerConfig::desk()
        };
        cfg.model.embedding_dim = 8;
        cfg.task = SyntheticTaskConfig {
            num_speakers: 4,
            frames_per_utterance: 11,
            feature_dim: 6,
            spread: 1.0,
            seed: 5,
        };
        cfg.run.batch_size = 3;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.schedule.validate()?;
        if self.run.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.run.steps > self.schedule.total_steps {
            return Err(Error::Config(format!(
                "run.steps {} exceeds schedule.total_steps {}",
                self.run.steps, self.schedule.total_steps
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
