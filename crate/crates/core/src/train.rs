//! The optimization loop.

use std::collections::HashMap;
use std::fmt;

use rand::SeedableRng;

use crate::autodiff::Graph;
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::SpeakerNet;
use crate::nn::ForwardMode;
use crate::optim::AdamWState;
use crate::params::ParamStore;
use crate::metrics::TrialSet;
use crate::synth::{heldout_trials, synth_batch, utterance};
use crate::tensor::Tensor;
use crate::trials::{join_scores, score_trials, ScoreLine, TrialKey};
use crate::Rng;

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// `step<TAB>lr<TAB>loss`, floats in shortest round-trip form.
impl fmt::Display for LogEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.step, self.lr, self.loss)
    }
}

pub fn format_log(entries: &[LogEntry]) -> String {
    entries.iter().map(|e| format!("{e}\n")).collect()
}

pub struct Trainer {
    pub config: RunConfig,
    pub net: SpeakerNet,
    pub params: ParamStore,
    pub optimizer: AdamWState,
    rng: Rng,
    step: u64,
}

impl Trainer {
    /// Fresh model initialized from `config.run.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut init_rng = Rng::seed_from_u64(config.run.seed);
        init_rng.set_stream(INIT_STREAM);
        let (net, params) = SpeakerNet::new(
            &config.model,
            config.task.feature_dim,
            config.task.num_speakers,
            &mut init_rng,
        )?;
        let optimizer = AdamWState::new(config.optim, &params);
        let mut rng = Rng::seed_from_u64(config.run.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            config,
            net,
            params,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let mut trainer = Self::new(ckpt.config)?;
        if trainer.params.len() != ckpt.params.len() {
            return Err(Error::Checkpoint("parameter count does not match config".into()));
        }
        for ((name, expect), (got_name, got)) in trainer.params.iter().zip(ckpt.params.iter()) {
            if name != got_name || expect.shape() != got.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{got_name}` {:?} does not match `{name}` {:?}",
                    got.shape(),
                    expect.shape()
                )));
            }
        }
        trainer.params = ckpt.params;
        trainer.optimizer = ckpt.optimizer;
        trainer.rng = ckpt.rng.restore();
        trainer.step = ckpt.step;
        Ok(trainer)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
            step: self.step,
        }
    }

    /// One optimizer step on a freshly sampled batch.
    pub fn step(&mut self) -> Result<LogEntry> {
        let (utts, labels) = synth_batch(&self.config.task, self.config.run.batch_size, &mut self.rng);
        self.step_on(&utts, &labels)
    }

    /// One optimizer step on the given batch.
    pub fn step_on(&mut self, utterances: &[Tensor], labels: &[usize]) -> Result<LogEntry> {
        let step = self.step + 1;
        let lr = self.config.schedule.lr_at_step(step)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let loss_var = self
            .net
            .loss(&mut g, &p, utterances, labels, &mut ForwardMode::Train(&mut self.rng))?;
        let loss = g.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        g.backward(loss_var)?;
        let grads = p.grads(&g);
        self.optimizer.step(&mut self.params, &grads, lr)?;
        self.step = step;
        Ok(LogEntry { step, lr, loss })
    }

    /// Runs `steps` more steps, returning their log entries.
    pub fn run(&mut self, steps: u64) -> Result<Vec<LogEntry>> {
        (0..steps).map(|_| self.step()).collect()
    }
}

impl Trainer {
    /// Scores the held-out trial list (see [`heldout_trials`]) with the
    /// current parameters.
    pub fn evaluate_heldout(&self, per_speaker: usize, seed: u64) -> Result<(Vec<TrialKey>, Vec<ScoreLine>)> {
        let (ids, keys) = heldout_trials(&self.config.task, per_speaker, seed);
        let mut embeddings = HashMap::with_capacity(ids.len());
        for id in ids {
            let feats = utterance(&self.config.task, id);
            embeddings.insert(id.to_string(), self.net.embedding_of(&self.params, &feats)?);
        }
        let scores = score_trials(&keys, &embeddings)?;
        Ok((keys, scores))
    }

    /// [`Trainer::evaluate_heldout`] joined into a trial set.
    pub fn heldout_trial_set(&self, per_speaker: usize, seed: u64) -> Result<TrialSet> {
        let (keys, scores) = self.evaluate_heldout(per_speaker, seed)?;
        join_scores(&keys, &scores)
    }
}

/// Trains from scratch for `config.run.steps` steps.
pub fn train_run(config: &RunConfig) -> Result<(Vec<LogEntry>, Checkpoint)> {
    let mut trainer = Trainer::new(config.clone())?;
    let log = trainer.run(config.run.steps)?;
    Ok((log, trainer.checkpoint()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::gradcheck();
        cfg.schedule.total_steps = 20;
        cfg.schedule.warmup_steps = 2;
        cfg.run.steps = 4;
        cfg
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let mut cfg = tiny();
        cfg.run.steps = 0;
        let (log, ckpt) = train_run(&cfg).unwrap();
        assert!(log.is_empty());
        assert_eq!(ckpt.params, Trainer::new(cfg).unwrap().params);
        assert_eq!(ckpt.step, 0);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (a, _) = train_run(&tiny()).unwrap();
        let (b, _) = train_run(&tiny()).unwrap();
        assert_eq!(format_log(&a), format_log(&b));
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn log_line_format() {
        let e = LogEntry {
            step: 3,
            lr: 1.5e-4,
            loss: 2.25,
        };
        assert_eq!(e.to_string(), "3\t0.00015\t2.25");
    }
}
