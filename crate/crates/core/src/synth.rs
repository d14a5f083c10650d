//! Synthetic speaker-classification task.
//!
//! Each speaker owns a Gaussian centroid in feature space. An utterance of
//! that speaker is the centroid plus, scaled by `spread`, independent
//! per-frame noise and a per-utterance sinusoidal drift along a random
//! direction. Every utterance is a pure function of
//! `(seed, speaker, index)`, so it can be named by the id
//! `speaker:index:seed` and regenerated anywhere.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trials::TrialKey;
use crate::Rng;

/// Utterance indices at or above this value are never drawn for training.
pub const HELDOUT_INDEX_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskConfig {
    pub num_speakers: usize,
    pub frames_per_utterance: usize,
    pub feature_dim: usize,
    /// Scale of all within-speaker variation.
    pub spread: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            num_speakers: 20,
            frames_per_utterance: 300,
            feature_dim: 81,
            spread: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::Config(format!("need at least 2 speakers, got {}", self.num_speakers)));
        }
        if self.frames_per_utterance == 0 || self.feature_dim == 0 {
            return Err(Error::Config("frames_per_utterance and feature_dim must be positive".into()));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite()) {
            return Err(Error::Config(format!("spread must be finite and >= 0, got {}", self.spread)));
        }
        Ok(())
    }
}

/// Name of one synthetic utterance, written `speaker:index:seed`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct UtteranceId {
    pub speaker: usize,
    pub index: u64,
    pub seed: u64,
}

impl fmt::Display for UtteranceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.speaker, self.index, self.seed)
    }
}

impl FromStr for UtteranceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("utterance id `{s}` is not speaker:index:seed"));
        let mut parts = s.split(':');
        let (Some(a), Some(b), Some(c), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        Ok(Self {
            speaker: a.parse().map_err(|_| bad())?,
            index: b.parse().map_err(|_| bad())?,
            seed: c.parse().map_err(|_| bad())?,
        })
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 finalizer over the running hash
    h ^= v.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
    let mut z = h;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derived_rng(parts: &[u64]) -> Rng {
    Rng::seed_from_u64(parts.iter().fold(0x5EED_u64, |h, &v| mix(h, v)))
}

fn gaussian_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn speaker_centroid(cfg: &SyntheticTaskConfig, seed: u64, speaker: usize) -> Vec<f64> {
    let mut rng = derived_rng(&[seed, 0xCE47, speaker as u64]);
    gaussian_vec(cfg.feature_dim, &mut rng)
}

/// `frames_per_utterance × feature_dim` features of one utterance.
pub fn utterance(cfg: &SyntheticTaskConfig, id: UtteranceId) -> Tensor {
    let centroid = speaker_centroid(cfg, id.seed, id.speaker);
    let mut rng = derived_rng(&[id.seed, 0x077E, id.speaker as u64, id.index]);
    let f = cfg.feature_dim;
    let direction = gaussian_vec(f, &mut rng);
    let omega = Uniform::new(0.05, 0.5).sample(&mut rng);
    let phase = Uniform::new(0.0, std::f64::consts::TAU).sample(&mut rng);
    let mut data = Vec::with_capacity(cfg.frames_per_utterance * f);
    for t in 0..cfg.frames_per_utterance {
        let drift = (omega * t as f64 + phase).sin();
        for c in 0..f {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(centroid[c] + cfg.spread * (noise + drift * direction[c]));
        }
    }
    Tensor::new(&[cfg.frames_per_utterance, f], data).expect("shape")
}

/// A training batch of fresh utterances with uniformly drawn speakers.
pub fn synth_batch(cfg: &SyntheticTaskConfig, batch: usize, rng: &mut Rng) -> (Vec<Tensor>, Vec<usize>) {
    let mut utts = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for _ in 0..batch {
        let speaker = rng.gen_range(0..cfg.num_speakers);
        let index = rng.gen_range(0..HELDOUT_INDEX_BASE);
        utts.push(utterance(
            cfg,
            UtteranceId {
                speaker,
                index,
                seed: cfg.seed,
            },
        ));
        labels.push(speaker);
    }
    (utts, labels)
}

/// Held-out evaluation list: `per_speaker` unseen utterances of each
/// training speaker, every same-speaker pair as a target trial and an equal
/// number of random cross-speaker pairs as nontarget trials.
pub fn heldout_trials(cfg: &SyntheticTaskConfig, per_speaker: usize, seed: u64) -> (Vec<UtteranceId>, Vec<TrialKey>) {
    let ids: Vec<UtteranceId> = (0..cfg.num_speakers)
        .flat_map(|speaker| {
            (0..per_speaker as u64).map(move |j| UtteranceId {
                speaker,
                index: HELDOUT_INDEX_BASE + j,
                seed: cfg.seed,
            })
        })
        .collect();
    let mut trials = Vec::new();
    for s in 0..cfg.num_speakers {
        for a in 0..per_speaker {
            for b in a + 1..per_speaker {
                trials.push(TrialKey {
                    target: true,
                    enroll: ids[s * per_speaker + a].to_string(),
                    test: ids[s * per_speaker + b].to_string(),
                });
            }
        }
    }
    let n_target = trials.len();
    let mut rng = derived_rng(&[seed, 0x7121]);
    let mut used = HashSet::new();
    while trials.len() < 2 * n_target {
        let a = rng.gen_range(0..ids.len());
        let b = rng.gen_range(0..ids.len());
        if ids[a].speaker != ids[b].speaker && used.insert((a.min(b), a.max(b))) {
            trials.push(TrialKey {
                target: false,
                enroll: ids[a].to_string(),
                test: ids[b].to_string(),
            });
        }
    }
    (ids, trials)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticTaskConfig {
        SyntheticTaskConfig {
            num_speakers: 5,
            frames_per_utterance: 12,
            feature_dim: 4,
            spread: 0.7,
            seed: 11,
        }
    }

    #[test]
    fn batches_are_deterministic() {
        let cfg = small();
        let a = synth_batch(&cfg, 6, &mut Rng::seed_from_u64(3));
        let b = synth_batch(&cfg, 6, &mut Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.0[0].shape(), &[12, 4]);
        assert!(a.1.iter().all(|&l| l < 5));
    }

    #[test]
    fn zero_spread_collapses_to_centroid() {
        let cfg = SyntheticTaskConfig { spread: 0.0, ..small() };
        let (utts, labels) = synth_batch(&cfg, 8, &mut Rng::seed_from_u64(1));
        for (u, &l) in utts.iter().zip(&labels) {
            let c = speaker_centroid(&cfg, cfg.seed, l);
            for t in 0..cfg.frames_per_utterance {
                assert_eq!(u.row(t), c.as_slice());
            }
        }
    }

    #[test]
    fn id_round_trip() {
        let id = UtteranceId {
            speaker: 3,
            index: HELDOUT_INDEX_BASE + 2,
            seed: 99,
        };
        assert_eq!(id.to_string().parse::<UtteranceId>().unwrap(), id);
        assert!("1:2".parse::<UtteranceId>().is_err());
        assert!("a:2:3".parse::<UtteranceId>().is_err());
        assert!("1:2:3:4".parse::<UtteranceId>().is_err());
    }

    #[test]
    fn heldout_list_is_balanced() {
        let (ids, trials) = heldout_trials(&small(), 4, 0);
        assert_eq!(ids.len(), 20);
        let targets = trials.iter().filter(|t| t.target).count();
        assert_eq!(targets, 5 * 6);
        assert_eq!(trials.len(), 2 * targets);
        assert!(ids.iter().all(|id| id.index >= HELDOUT_INDEX_BASE));
    }
}
