//! Transformer pooling for speaker embeddings.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense `f64` arrays and a tape-based
//!   reverse-mode differentiation engine.
//! - [`nn`]: affine maps, the TDNN frame-level backbone, drop path.
//! - [`poformer`]: multi-head self-attention, feed-forward blocks,
//!   pre-/post-norm transformer layers with LayerScale, the positional
//!   encoding generator, class-token and statistics heads.
//! - [`model`]: the full network (backbone → pooling → embedding).
//! - [`loss`], [`metrics`], [`trials`]: AM-softmax, cosine scoring,
//!   DET/EER/minDCF and the trial/score text formats.
//! - [`optim`], [`schedule`], [`synth`], [`train`], [`checkpoint`],
//!   [`config`]: the training harness.
//! - [`gradcheck`]: finite-difference oracle.
//! - [`cli`]: the `poformer` command-line tool.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod poformer;
pub mod schedule;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod trials;

/// Seedable, serializable generator used for initialization, data and
/// drop-path masks.
pub type Rng = rand_chacha::ChaCha8Rng;

pub use autodiff::{Activation, Graph, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use metrics::{compute_eer, compute_min_dcf, det_curve, DcfParams, TrialSet};
pub use model::{ModelConfig, SpeakerNet};
pub use nn::ForwardMode;
pub use params::{ParamId, ParamStore, ParamVars};
pub use poformer::{NormPlacement, PoFormer, PoFormerConfig, PoolingHead, PositionalEncoding};
pub use tensor::Tensor;
