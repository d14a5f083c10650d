//! Transformer pooling over frame-level features.
//!
//! Frame features are projected to the model width, a learnable class token
//! is prepended at row 0, and a stack of transformer layers mixes the whole
//! sequence. Each layer may be preceded by a positional encoding generator
//! (a depthwise convolution over the frame rows only). The pooled vector is
//! read from the class-token row, optionally concatenated with the mean and
//! standard deviation of the final frame rows.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{uniform_tensor, DropPath, ForwardMode, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tensor::Tensor;
use crate::Rng;

/// `eps` inside the square root of pooled standard deviations.
pub const STATS_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    /// Normalize the input of each residual branch.
    Pre,
    /// Normalize after each residual sum.
    Post,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalEncoding {
    /// Depthwise-convolution generator before every layer.
    Peg,
    /// Fixed sin/cos table added once before the first layer.
    Sinusoidal,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingHead {
    ClassToken,
    ClassTokenPlusStats,
    /// Mean ⧺ std of the input frames; no transformer at all.
    StatsPoolingBaseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoFormerConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub peg_kernel: usize,
    pub drop_path: f64,
    pub norm: NormPlacement,
    pub pos_encoding: PositionalEncoding,
    pub head: PoolingHead,
    pub ffn_activation: Activation,
    /// Initial value of every LayerScale factor.
    pub layer_scale_init: f64,
}

impl PoFormerConfig {
    /// Full-size settings: width 512, 4 heads, FFN 1024, PEG kernel 9, and
    /// the per-depth drop-path rates 0.3 / 0.4 / 0.45 for 3 / 5 / 7 layers.
    pub fn full_scale(layers: usize) -> Self {
        let drop_path = match layers {
            0..=3 => 0.3,
            4 | 5 => 0.4,
            _ => 0.45,
        };
        Self {
            layers,
            dim: 512,
            heads: 4,
            ffn_dim: 1024,
            peg_kernel: 9,
            drop_path,
            norm: NormPlacement::Pre,
            pos_encoding: PositionalEncoding::Peg,
            head: PoolingHead::ClassToken,
            ffn_activation: Activation::Gelu,
            layer_scale_init: 0.1,
        }
    }

    /// Desk-scale defaults: N=2, d=32, 4 heads, FFN 64.
    pub fn desk() -> Self {
        Self {
            layers: 2,
            dim: 32,
            heads: 4,
            ffn_dim: 64,
            drop_path: 0.1,
            ..Self::full_scale(2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.head == PoolingHead::StatsPoolingBaseline {
            return Ok(());
        }
        let bad = |msg: String| Err(Error::Config(msg));
        if self.layers == 0 {
            return bad("PoFormer needs at least one layer".into());
        }
        if self.dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("PoFormer widths must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop-path rate {} outside [0, 1)", self.drop_path));
        }
        if self.pos_encoding == PositionalEncoding::Peg && self.peg_kernel % 2 == 0 {
            return bad(format!("PEG kernel {} must be odd", self.peg_kernel));
        }
        if self.pos_encoding == PositionalEncoding::Sinusoidal && self.dim % 2 == 1 {
            return bad(format!("sinusoidal encoding needs an even dim, got {}", self.dim));
        }
        Ok(())
    }

    /// Width of the pooled vector for `input_dim`-wide frames.
    pub fn output_dim(&self, input_dim: usize) -> usize {
        match self.head {
            PoolingHead::ClassToken => self.dim,
            PoolingHead::ClassTokenPlusStats => 3 * self.dim,
            PoolingHead::StatsPoolingBaseline => 2 * input_dim,
        }
    }
}

/// Per-head projections of one multi-head self-attention block.
#[derive(Clone, Debug)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Clone, Debug)]
pub struct Mhsa {
    pub heads: Vec<AttentionHead>,
    pub output: ParamId,
    pub d_k: usize,
    pub d_v: usize,
}

impl Mhsa {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        let d_k = dim / heads;
        let d_v = d_k;
        let bound = 1.0 / (dim as f64).sqrt();
        let heads = (0..heads)
            .map(|i| AttentionHead {
                query: store.add(format!("{name}.head{i}.query"), uniform_tensor(&[dim, d_k], bound, rng)),
                key: store.add(format!("{name}.head{i}.key"), uniform_tensor(&[dim, d_k], bound, rng)),
                value: store.add(format!("{name}.head{i}.value"), uniform_tensor(&[dim, d_v], bound, rng)),
            })
            .collect::<Vec<_>>();
        let out_in = heads.len() * d_v;
        let output = store.add(
            format!("{name}.output"),
            uniform_tensor(&[out_in, dim], 1.0 / (out_in as f64).sqrt(), rng),
        );
        Self { heads, output, d_k, d_v }
    }

    /// Returns the block output and the attention matrix of every head.
    pub fn forward_with_attention(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<(Var, Vec<Var>)> {
        let scale = 1.0 / (self.d_k as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut attns = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let q = g.matmul(x, p.get(head.query))?;
            let k = g.matmul(x, p.get(head.key))?;
            let v = g.matmul(x, p.get(head.value))?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores)?;
            outs.push(g.matmul(attn, v)?);
            attns.push(attn);
        }
        let heads = g.concat_cols(&outs)?;
        Ok((g.matmul(heads, p.get(self.output))?, attns))
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, p, x)?.0)
    }
}

/// Two affine maps with an activation in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    pub activation: Activation,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, activation: Activation, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, rng),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.activation(h, self.activation);
        self.fc2.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub mhsa: Mhsa,
    pub ffn: FeedForward,
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    /// LayerScale factors for the attention and FFN branches.
    pub gamma1: ParamId,
    pub gamma2: ParamId,
    pub drop_path: DropPath,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PoFormerConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            mhsa: Mhsa::new(store, &format!("{name}.mhsa"), d, cfg.heads, rng),
            gamma1: store.add(format!("{name}.gamma1"), Tensor::full(&[d], cfg.layer_scale_init)),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, cfg.ffn_activation, rng),
            gamma2: store.add(format!("{name}.gamma2"), Tensor::full(&[d], cfg.layer_scale_init)),
            drop_path: DropPath::new(cfg.drop_path)?,
        })
    }

    fn attention_branch(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        x: Var,
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        let (a, attns) = self.mhsa.forward_with_attention(g, p, x)?;
        let a = g.mul_row(a, p.get(self.gamma1))?;
        Ok((self.drop_path.forward(g, a, mode), attns))
    }

    fn ffn_branch(&self, g: &mut Graph, p: &ParamVars, x: Var, mode: &mut ForwardMode<'_>) -> Result<Var> {
        let f = self.ffn.forward(g, p, x)?;
        let f = g.mul_row(f, p.get(self.gamma2))?;
        Ok(self.drop_path.forward(g, f, mode))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        x: Var,
        placement: NormPlacement,
        mode: &mut ForwardMode<'_>,
    ) -> Result<Var> {
        Ok(self.forward_with_attention(g, p, x, placement, mode)?.0)
    }

    /// Like [`TransformerLayer::forward`], also returning each head's
    /// attention matrix.
    pub fn forward_with_attention(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        x: Var,
        placement: NormPlacement,
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Var, Vec<Var>)> {
        match placement {
            NormPlacement::Pre => {
                let h = self.norm1.forward(g, p, x)?;
                let (a, attns) = self.attention_branch(g, p, h, mode)?;
                let x = g.add(x, a)?;
                let h = self.norm2.forward(g, p, x)?;
                let f = self.ffn_branch(g, p, h, mode)?;
                Ok((g.add(x, f)?, attns))
            }
            NormPlacement::Post => {
                let (a, attns) = self.attention_branch(g, p, x, mode)?;
                let x = g.add(x, a)?;
                let x = self.norm1.forward(g, p, x)?;
                let f = self.ffn_branch(g, p, x, mode)?;
                let x = g.add(x, f)?;
                Ok((self.norm2.forward(g, p, x)?, attns))
            }
        }
    }
}

/// Positional encoding generator: a depthwise convolution over the frame
/// rows whose output is added back to them. Row 0 (the class token) is split
/// off first and re-attached unchanged.
#[derive(Clone, Debug)]
pub struct Peg {
    pub kernel: ParamId,
    pub kernel_size: usize,
}

impl Peg {
    pub fn new(store: &mut ParamStore, name: &str, kernel_size: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if kernel_size % 2 == 0 {
            return Err(Error::Config(format!("PEG kernel {kernel_size} must be odd")));
        }
        let bound = 1.0 / (kernel_size as f64).sqrt();
        Ok(Self {
            kernel: store.add(format!("{name}.kernel"), uniform_tensor(&[kernel_size, dim], bound, rng)),
            kernel_size,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x_with_cls: Var) -> Result<Var> {
        let rows = g.shape(x_with_cls).first().copied().unwrap_or(0);
        if rows < 2 {
            return Err(Error::invalid("PEG needs at least one frame besides the class token"));
        }
        let cls = g.slice_rows(x_with_cls, 0, 1)?;
        let frames = g.slice_rows(x_with_cls, 1, rows)?;
        let pos = g.depthwise_conv1d(frames, p.get(self.kernel))?;
        let frames = g.add(frames, pos)?;
        g.concat_rows(&[cls, frames])
    }
}

/// Fixed sin/cos table: `PE[t, 2i] = sin(t / 10000^(2i/d))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/d))`.
pub fn sinusoidal_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim % 2 == 1 || dim == 0 {
        return Err(Error::invalid(format!("sinusoidal encoding needs an even dim, got {dim}")));
    }
    if len == 0 {
        return Err(Error::invalid("sinusoidal encoding of zero length"));
    }
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(&[len, dim], data)
}

/// Per-channel mean and `sqrt(var + eps)` over rows, each as a `1×d` row.
pub fn reduce_mean_std(g: &mut Graph, x: Var, eps: f64) -> Result<(Var, Var)> {
    Ok((g.mean_rows(x)?, g.std_rows(x, eps)?))
}

/// Statistics pooling: `mean ⧺ std` over time, a `1×2F` row.
pub fn stats_pooling(g: &mut Graph, frames: Var, eps: f64) -> Result<Var> {
    let (mean, std) = reduce_mean_std(g, frames, eps)?;
    g.concat_cols(&[mean, std])
}

#[derive(Clone, Debug)]
pub struct PoFormer {
    pub config: PoFormerConfig,
    pub input_dim: usize,
    pub input_proj: Option<Linear>,
    pub class_token: Option<ParamId>,
    pub pegs: Vec<Peg>,
    pub layers: Vec<TransformerLayer>,
}

impl PoFormer {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, config: &PoFormerConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut model = Self {
            config: config.clone(),
            input_dim,
            input_proj: None,
            class_token: None,
            pegs: Vec::new(),
            layers: Vec::new(),
        };
        if config.head == PoolingHead::StatsPoolingBaseline {
            return Ok(model);
        }
        let d = config.dim;
        model.input_proj = Some(Linear::new(store, &format!("{name}.input_proj"), input_dim, d, rng));
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let token = Tensor::new(&[1, d], (0..d).map(|_| normal.sample(rng)).collect())?;
        model.class_token = Some(store.add(format!("{name}.class_token"), token));
        for i in 0..config.layers {
            if config.pos_encoding == PositionalEncoding::Peg {
                model
                    .pegs
                    .push(Peg::new(store, &format!("{name}.peg{i}"), config.peg_kernel, d, rng)?);
            }
            model
                .layers
                .push(TransformerLayer::new(store, &format!("{name}.layer{i}"), config, rng)?);
        }
        Ok(model)
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim(self.input_dim)
    }

    /// Runs the projection and transformer stack, returning the final
    /// `(L+1)×d` sequence with the class token at row 0.
    pub fn encode(&self, g: &mut Graph, p: &ParamVars, frames: Var, mode: &mut ForwardMode<'_>) -> Result<Var> {
        Ok(self.encode_with_attention(g, p, frames, mode)?.0)
    }

    /// [`PoFormer::encode`] plus the attention matrices, indexed by layer
    /// then head. Row 0 of each matrix is the class token's attention.
    pub fn encode_with_attention(
        &self,
        g: &mut Graph,
        p: &ParamVars,
        frames: Var,
        mode: &mut ForwardMode<'_>,
    ) -> Result<(Var, Vec<Vec<Var>>)> {
        let (proj, token) = match (&self.input_proj, self.class_token) {
            (Some(proj), Some(token)) => (proj, token),
            _ => return Err(Error::invalid("statistics-pooling baseline has no transformer")),
        };
        let len = g.shape(frames)[0];
        let mut x = proj.forward(g, p, frames)?;
        if self.config.pos_encoding == PositionalEncoding::Sinusoidal {
            let pe = g.constant(sinusoidal_encoding(len, self.config.dim)?);
            x = g.add(x, pe)?;
        }
        let mut x = g.concat_rows(&[p.get(token), x])?;
        let mut maps = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            if let Some(peg) = self.pegs.get(i) {
                x = peg.forward(g, p, x)?;
            }
            let (y, attns) = layer.forward_with_attention(g, p, x, self.config.norm, mode)?;
            x = y;
            maps.push(attns);
        }
        Ok((x, maps))
    }

    /// Pools `T×input_dim` frames into one `1×output_dim` row.
    pub fn forward(&self, g: &mut Graph, p: &ParamVars, frames: Var, mode: &mut ForwardMode<'_>) -> Result<Var> {
        let (len, width) = match g.shape(frames) {
            &[t, f] => (t, f),
            other => return Err(Error::shape("poformer", other, &[0, self.input_dim])),
        };
        if len == 0 || width != self.input_dim {
            return Err(Error::shape("poformer", g.shape(frames), &[len, self.input_dim]));
        }
        match self.config.head {
            PoolingHead::StatsPoolingBaseline => stats_pooling(g, frames, STATS_EPS),
            PoolingHead::ClassToken => {
                let x = self.encode(g, p, frames, mode)?;
                g.slice_rows(x, 0, 1)
            }
            PoolingHead::ClassTokenPlusStats => {
                let x = self.encode(g, p, frames, mode)?;
                let token = g.slice_rows(x, 0, 1)?;
                let rest = g.slice_rows(x, 1, len + 1)?;
                let (mean, std) = reduce_mean_std(g, rest, STATS_EPS)?;
                g.concat_cols(&[token, mean, std])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small_config() -> PoFormerConfig {
        PoFormerConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            ffn_dim: 16,
            peg_kernel: 3,
            drop_path: 0.2,
            ..PoFormerConfig::desk()
        }
    }

    fn frames(t: usize, f: usize, rng: &mut Rng) -> Tensor {
        uniform_tensor(&[t, f], 1.0, rng)
    }

    #[test]
    fn full_scale_presets() {
        assert_eq!(PoFormerConfig::full_scale(3).drop_path, 0.3);
        assert_eq!(PoFormerConfig::full_scale(5).drop_path, 0.4);
        assert_eq!(PoFormerConfig::full_scale(7).drop_path, 0.45);
        let c = PoFormerConfig::full_scale(7);
        assert_eq!((c.dim, c.heads, c.ffn_dim), (512, 4, 1024));
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.peg_kernel = 4;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.layers = 0;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.dim = 9;
        c.heads = 1;
        c.pos_encoding = PositionalEncoding::Sinusoidal;
        assert!(c.validate().is_err());
    }

    #[test]
    fn uniform_attention_averages_rows() {
        let mut rng = Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mhsa = Mhsa::new(&mut store, "m", 4, 1, &mut rng);
        store.set(mhsa.heads[0].query, Tensor::zeros(&[4, 4]));
        store.set(mhsa.heads[0].value, Tensor::eye(4));
        store.set(mhsa.output, Tensor::eye(4));
        let x = frames(5, 4, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = mhsa.forward(&mut g, &p, xv).unwrap();
        for c in 0..4 {
            let mean = (0..5).map(|r| x.at(r, c)).sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((g.value(y).at(r, c) - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ffn_degenerate_cases() {
        let mut rng = Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "f", 3, 5, Activation::Relu, &mut rng);
        let b2 = Tensor::vector(vec![0.5, -0.5, 2.0]);
        store.set(ffn.fc2.bias, b2.clone());
        store.set(ffn.fc2.weight, Tensor::zeros(&[5, 3]));
        let x = frames(4, 3, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = ffn.forward(&mut g, &p, xv).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), b2.data());
        }

        // dead ReLU: negative first-layer bias dominates
        let mut store2 = store.clone();
        store2.set(ffn.fc1.weight, Tensor::zeros(&[3, 5]));
        store2.set(ffn.fc1.bias, Tensor::full(&[5], -1.0));
        store2.set(ffn.fc2.weight, uniform_tensor(&[5, 3], 1.0, &mut rng));
        let mut g = Graph::new();
        let p = store2.bind(&mut g);
        let xv = g.constant(x);
        let y = ffn.forward(&mut g, &p, xv).unwrap();
        for r in 0..4 {
            assert_eq!(g.value(y).row(r), b2.data());
        }
    }

    #[test]
    fn layer_scale_zero_is_identity_pre_norm() {
        let mut rng = Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = small_config();
        let layer = TransformerLayer::new(&mut store, "l", &cfg, &mut rng).unwrap();
        store.set(layer.gamma1, Tensor::zeros(&[8]));
        store.set(layer.gamma2, Tensor::zeros(&[8]));
        let x = frames(6, 8, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = layer
            .forward(&mut g, &p, xv, NormPlacement::Pre, &mut ForwardMode::Eval)
            .unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn forced_drop_is_identity_pre_norm() {
        let mut rng = Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let layer = TransformerLayer::new(&mut store, "l", &small_config(), &mut rng).unwrap();
        let x = frames(6, 8, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = layer
            .forward(&mut g, &p, xv, NormPlacement::Pre, &mut ForwardMode::Forced { keep: false })
            .unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn pre_and_post_norm_differ() {
        let mut rng = Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = TransformerLayer::new(&mut store, "l", &small_config(), &mut rng).unwrap();
        let x = frames(6, 8, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let pre = layer
            .forward(&mut g, &p, xv, NormPlacement::Pre, &mut ForwardMode::Eval)
            .unwrap();
        let post = layer
            .forward(&mut g, &p, xv, NormPlacement::Post, &mut ForwardMode::Eval)
            .unwrap();
        assert!(g.value(pre).max_abs_diff(g.value(post)) > 0.0);
    }

    #[test]
    fn peg_split_contract() {
        let mut rng = Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let peg = Peg::new(&mut store, "peg", 3, 4, &mut rng).unwrap();
        let x = frames(5, 4, &mut rng);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = peg.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(y).row(0), x.row(0));
        assert!(g.value(y).max_abs_diff(&x) > 0.0);

        store.set(peg.kernel, Tensor::zeros(&[3, 4]));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = peg.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(y), &x);

        let only_cls = g.constant(frames(1, 4, &mut rng));
        assert!(peg.forward(&mut g, &p, only_cls).is_err());
    }

    #[test]
    fn sinusoidal_values() {
        let pe = sinusoidal_encoding(50, 8).unwrap();
        for i in 0..4 {
            assert_eq!(pe.at(0, 2 * i), 0.0);
            assert_eq!(pe.at(0, 2 * i + 1), 1.0);
        }
        assert!((pe.at(1, 0) - 0.841_471).abs() < 1e-6);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(sinusoidal_encoding(4, 7).is_err());
    }

    #[test]
    fn stats_pooling_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![3.0]]).unwrap());
        let s = stats_pooling(&mut g, x, 0.0).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 1.0]);

        let c = g.constant(Tensor::full(&[7, 3], -1.5));
        let s = stats_pooling(&mut g, c, 0.0).unwrap();
        assert_eq!(g.value(s).data(), &[-1.5, -1.5, -1.5, 0.0, 0.0, 0.0]);

        // the model's guarded form stays within sqrt(eps) of the exact value
        let s = stats_pooling(&mut g, c, STATS_EPS).unwrap();
        assert!(g.value(s).data()[3..].iter().all(|&v| v <= STATS_EPS.sqrt() + 1e-18));
    }

    #[test]
    fn output_dims_per_head() {
        let mut rng = Rng::seed_from_u64(8);
        for (head, expect) in [
            (PoolingHead::ClassToken, 8),
            (PoolingHead::ClassTokenPlusStats, 24),
            (PoolingHead::StatsPoolingBaseline, 10),
        ] {
            let cfg = PoFormerConfig { head, ..small_config() };
            let mut store = ParamStore::new();
            let model = PoFormer::new(&mut store, "pool", 5, &cfg, &mut rng).unwrap();
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(frames(7, 5, &mut rng));
            let y = model.forward(&mut g, &p, x, &mut ForwardMode::Eval).unwrap();
            assert_eq!(g.shape(y), &[1, expect]);
            assert_eq!(model.output_dim(), expect);
        }
    }
}
