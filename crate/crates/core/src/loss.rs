//! Additive-margin softmax objective and cosine trial scoring.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard inside `sqrt(‖x‖² + eps)` when L2-normalizing rows.
pub const NORMALIZE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmSoftmaxConfig {
    /// Logit scale `s`.
    pub scale: f64,
    /// Additive cosine margin `m` on the target class.
    pub margin: f64,
}

impl Default for AmSoftmaxConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.25,
        }
    }
}

impl AmSoftmaxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!("AM-softmax scale must be > 0, got {}", self.scale)));
        }
        if !(0.0..1.0).contains(&self.margin) {
            return Err(Error::Config(format!("AM-softmax margin must be in [0, 1), got {}", self.margin)));
        }
        Ok(())
    }
}

/// Mean over the batch of
/// `−log( e^{s(cos θ_y − m)} / (e^{s(cos θ_y − m)} + Σ_{j≠y} e^{s cos θ_j}) )`.
///
/// `embeddings` is `B×e`, `class_weights` is `C×e`; both are L2-normalized
/// row-wise inside the graph.
pub fn am_softmax_loss(
    g: &mut Graph,
    embeddings: Var,
    class_weights: Var,
    labels: &[usize],
    cfg: &AmSoftmaxConfig,
) -> Result<Var> {
    let (b, e) = g.value(embeddings).dims2()?;
    let (c, ew) = g.value(class_weights).dims2()?;
    if e != ew {
        return Err(Error::shape("am_softmax_loss", g.shape(embeddings), g.shape(class_weights)));
    }
    if labels.len() != b {
        return Err(Error::shape("am_softmax_loss", g.shape(embeddings), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let cosines = cosine_logits(g, embeddings, class_weights)?;
    let mut margin = Tensor::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        margin.data_mut()[i * c + y] = -cfg.margin;
    }
    let margin = g.constant(margin);
    let shifted = g.add(cosines, margin)?;
    let logits = g.scale(shifted, cfg.scale);
    g.cross_entropy(logits, labels)
}

/// `B×C` matrix of cosines between embedding rows and class-weight rows.
pub fn cosine_logits(g: &mut Graph, embeddings: Var, class_weights: Var) -> Result<Var> {
    let en = g.normalize_rows(embeddings, NORMALIZE_EPS)?;
    let wn = g.normalize_rows(class_weights, NORMALIZE_EPS)?;
    let wt = g.transpose(wn)?;
    g.matmul(en, wt)
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_score", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine score of a zero vector"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
