//! The complete speaker network: TDNN backbone, pooling layer, embedding
//! layer and AM-softmax classifier weights.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::loss::{am_softmax_loss, AmSoftmaxConfig};
use crate::nn::{uniform_tensor, ForwardMode, Linear, TdnnConfig, TdnnStack};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::poformer::{PoFormer, PoFormerConfig};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub tdnn: TdnnConfig,
    pub pooling: PoFormerConfig,
    pub embedding_dim: usize,
    pub am_softmax: AmSoftmaxConfig,
}

impl ModelConfig {
    /// Desk-scale network: TDNN 64/96, PoFormer N=2 d=32, 32-dim embedding.
    pub fn desk() -> Self {
        Self {
            tdnn: TdnnConfig::xvector(64, 96),
            pooling: PoFormerConfig::desk(),
            embedding_dim: 32,
            am_softmax: AmSoftmaxConfig::default(),
        }
    }

    /// Full-size network: TDNN 1024/1500, 512-wide PoFormer with `layers`
    /// layers, 512-dim embedding.
    pub fn full_scale(layers: usize) -> Self {
        Self {
            tdnn: TdnnConfig::xvector(1024, 1500),
            pooling: PoFormerConfig::full_scale(layers),
            embedding_dim: 512,
            am_softmax: AmSoftmaxConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.tdnn.validate()?;
        self.pooling.validate()?;
        self.am_softmax.validate()?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SpeakerNet {
    pub config: ModelConfig,
    pub feature_dim: usize,
    pub num_classes: usize,
    pub backbone: TdnnStack,
    pub pooling: PoFormer,
    pub embedding: Linear,
    pub class_weights: ParamId,
}

impl SpeakerNet {
    /// Builds the network and registers its freshly initialized parameters.
    pub fn new(
        config: &ModelConfig,
        feature_dim: usize,
        num_classes: usize,
        rng: &mut Rng,
    ) -> Result<(Self, ParamStore)> {
        config.validate()?;
        if feature_dim == 0 || num_classes < 2 {
            return Err(Error::Config(format!(
                "need feature_dim > 0 and at least 2 classes, got {feature_dim} and {num_classes}"
            )));
        }
        let mut store = ParamStore::new();
        let backbone = TdnnStack::new(&mut store, "tdnn", feature_dim, &config.tdnn, rng)?;
        let pooling = PoFormer::new(&mut store, "pool", config.tdnn.output_dim, &config.pooling, rng)?;
        let embedding = Linear::new(&mut store, "embed", pooling.output_dim(), config.embedding_dim, rng);
        let class_weights = store.add(
            "classifier.weight",
            uniform_tensor(&[num_classes, config.embedding_dim], 1.0, rng),
        );
        let net = Self {
            config: config.clone(),
            feature_dim,
            num_classes,
            backbone,
            pooling,
            embedding,
            class_weights,
        };
        Ok((net, store))
    }

    /// One utterance (`T×feature_dim`) to a `1×embedding_dim` row.
    pub fn embed(&self, g: &mut Graph, p: &ParamVars, frames: Var, mode: &mut ForwardMode<'_>) -> Result<Var> {
        let h = self.backbone.forward(g, p, frames)?;
        let pooled = self.pooling.forward(g, p, h, mode)?;
        self.embedding.forward(g, p, pooled)
    }

    /// Embeds each utterance independently and stacks the rows (`B×e`).
    pub fn embed_batch(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        utterances: &[Tensor],
        mode: &mut ForwardMode<'_>,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(utterances.len());
        for utt in utterances {
            let x = g.constant(utt.clone());
            rows.push(self.embed(g, p, x, mode)?);
        }
        g.concat_rows(&rows)
    }

    /// Batch AM-softmax loss.
    pub fn loss(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        utterances: &[Tensor],
        labels: &[usize],
        mode: &mut ForwardMode<'_>,
    ) -> Result<Var> {
        let emb = self.embed_batch(g, p, utterances, mode)?;
        am_softmax_loss(g, emb, p.get(self.class_weights), labels, &self.config.am_softmax)
    }

    /// Inference-mode embedding as a plain vector.
    pub fn embedding_of(&self, store: &ParamStore, frames: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(frames.clone());
        let e = self.embed(&mut g, &p, x, &mut ForwardMode::Eval)?;
        Ok(g.value(e).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn desk_network_shapes() {
        let mut rng = Rng::seed_from_u64(0);
        let mut cfg = ModelConfig::desk();
        cfg.tdnn = TdnnConfig::xvector(8, 12);
        let (net, store) = SpeakerNet::new(&cfg, 6, 4, &mut rng).unwrap();
        let utt = uniform_tensor(&[9, 6], 1.0, &mut rng);
        let e = net.embedding_of(&store, &utt).unwrap();
        assert_eq!(e.len(), 32);

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let loss = net
            .loss(&mut g, &p, &[utt.clone(), utt], &[0, 3], &mut ForwardMode::Eval)
            .unwrap();
        assert!(g.value(loss).data()[0].is_finite());
    }

    #[test]
    fn rejects_single_class() {
        let mut rng = Rng::seed_from_u64(0);
        assert!(SpeakerNet::new(&ModelConfig::desk(), 6, 1, &mut rng).is_err());
    }
}
