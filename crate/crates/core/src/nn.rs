//! Parameterized building blocks: affine maps, the TDNN frame-level
//! backbone, and drop path.

use rand::Rng as _;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, ParamVars};
use crate::tensor::Tensor;
use crate::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// How stochastic layers behave during a forward pass.
pub enum ForwardMode<'a> {
    /// Deterministic inference: drop path is the identity.
    Eval,
    /// Training: every drop-path site draws its own decision from the stream.
    Train(&'a mut Rng),
    /// Training semantics with every drop-path decision pinned.
    Forced { keep: bool },
}

impl ForwardMode<'_> {
    pub fn is_eval(&self) -> bool {
        matches!(self, ForwardMode::Eval)
    }

    /// `None` means identity (eval); otherwise whether the branch survives.
    fn keep_branch(&mut self, p: f64) -> Option<bool> {
        match self {
            ForwardMode::Eval => None,
            ForwardMode::Forced { keep } => Some(*keep),
            ForwardMode::Train(_) if p == 0.0 => Some(true),
            ForwardMode::Train(rng) => Some(rng.gen::<f64>() >= p),
        }
    }
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// `y = x·W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights uniform in `±1/√in`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform_tensor(&[in_dim, out_dim], bound, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        if g.value(x).last_dim() != self.in_dim {
            return Err(Error::shape("linear", g.shape(x), &[self.in_dim, self.out_dim]));
        }
        let xw = g.matmul(x, p.get(self.weight))?;
        g.add_row(xw, p.get(self.bias))
    }
}

/// Affine parameters of a layer norm.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(self.gamma), p.get(self.beta), LAYER_NORM_EPS)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TdnnConfig {
    /// Temporal offsets per layer.
    pub contexts: Vec<Vec<isize>>,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl TdnnConfig {
    /// x-vector style contexts with the given widths.
    pub fn xvector(hidden_dim: usize, output_dim: usize) -> Self {
        Self {
            contexts: vec![
                vec![-2, -1, 0, 1, 2],
                vec![-2, 0, 2],
                vec![-3, 0, 3],
                vec![0],
                vec![0],
            ],
            hidden_dim,
            output_dim,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.contexts.is_empty() {
            return Err(Error::Config("TDNN needs at least one layer".into()));
        }
        if self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("TDNN widths must be positive".into()));
        }
        for ctx in &self.contexts {
            validate_context(ctx)?;
        }
        Ok(())
    }

    /// Largest distance in frames over which an output frame sees the input.
    pub fn receptive_radius(&self) -> usize {
        self.contexts
            .iter()
            .map(|c| c.iter().map(|o| o.unsigned_abs()).max().unwrap_or(0))
            .sum()
    }
}

fn validate_context(offsets: &[isize]) -> Result<()> {
    if offsets.is_empty() {
        return Err(Error::Config("empty TDNN context".into()));
    }
    if offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("TDNN offsets not strictly increasing: {offsets:?}")));
    }
    let mirrored: Vec<isize> = offsets.iter().rev().map(|o| -o).collect();
    if mirrored != offsets {
        return Err(Error::Config(format!("TDNN offsets not symmetric around 0: {offsets:?}")));
    }
    Ok(())
}

/// Dilated temporal convolution over explicit offsets, followed by an
/// activation and a layer norm. Zero padding keeps the frame count.
#[derive(Clone, Debug)]
pub struct TdnnLayer {
    pub offsets: Vec<isize>,
    pub linear: Linear,
    pub norm: LayerNorm,
    pub activation: Activation,
}

impl TdnnLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        offsets: &[isize],
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        validate_context(offsets)?;
        let linear = Linear::new(store, &format!("{name}.affine"), offsets.len() * in_dim, out_dim, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), out_dim);
        Ok(Self {
            offsets: offsets.to_vec(),
            linear,
            norm,
            activation,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &ParamVars, x: Var) -> Result<Var> {
        let spliced = g.context_gather(x, &self.offsets)?;
        let h = self.linear.forward(g, p, spliced)?;
        let h = g.activation(h, self.activation);
        self.norm.forward(g, p, h)
    }
}

#[derive(Clone, Debug)]
pub struct TdnnStack {
    pub layers: Vec<TdnnLayer>,
}

impl TdnnStack {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, cfg: &TdnnConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let depth = cfg.contexts.len();
        let mut layers = Vec::with_capacity(depth);
        let mut in_dim = input_dim;
        for (i, ctx) in cfg.contexts.iter().enumerate() {
            let out_dim = if i + 1 == depth { cfg.output_dim } else { cfg.hidden_dim };
            layers.push(TdnnLayer::new(
                store,
                &format!("{name}.{i}"),
                ctx,
                in_dim,
                out_dim,
                cfg.activation,
                rng,
            )?);
            in_dim = out_dim;
        }
        Ok(Self { layers })
    }

    /// `T×F` frames in, `T×output_dim` frame-level features out.
    pub fn forward(&self, g: &mut Graph, p: &ParamVars, frames: Var) -> Result<Var> {
        self.layers.iter().try_fold(frames, |x, layer| layer.forward(g, p, x))
    }
}

/// Stochastic depth on a residual branch.
///
/// In training each call zeroes the whole branch with probability `p` and
/// otherwise rescales it by `1/(1−p)`; in eval it is the identity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropPath {
    pub p: f64,
}

impl DropPath {
    pub fn new(p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("drop-path rate must be in [0, 1), got {p}")));
        }
        Ok(Self { p })
    }

    pub fn forward(&self, g: &mut Graph, branch: Var, mode: &mut ForwardMode<'_>) -> Var {
        match mode.keep_branch(self.p) {
            None => branch,
            Some(true) if self.p == 0.0 => branch,
            Some(true) => g.scale(branch, 1.0 / (1.0 - self.p)),
            Some(false) => g.scale(branch, 0.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> Rng {
        Rng::seed_from_u64(7)
    }

    fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
        uniform_tensor(&[rows, cols], 1.0, rng)
    }

    #[test]
    fn linear_identity_and_zero() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 3, &mut r);
        store.set(lin.weight, Tensor::eye(3));
        let x = random_matrix(4, 3, &mut r);

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let y = lin.forward(&mut g, &p, xv).unwrap();
        assert_eq!(g.value(y), &x);

        store.set(lin.weight, Tensor::zeros(&[3, 3]));
        store.set(lin.bias, Tensor::vector(vec![1.0, -2.0, 0.5]));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x);
        let y = lin.forward(&mut g, &p, xv).unwrap();
        for i in 0..4 {
            assert_eq!(g.value(y).row(i), &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn linear_composition_matches_folded_map() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let l1 = Linear::new(&mut store, "a", 3, 4, &mut r);
        let l2 = Linear::new(&mut store, "b", 4, 2, &mut r);
        store.set(l1.bias, Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]));
        store.set(l2.bias, Tensor::vector(vec![1.0, -1.0]));
        let x = random_matrix(5, 3, &mut r);

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let h = l1.forward(&mut g, &p, xv).unwrap();
        let y = l2.forward(&mut g, &p, h).unwrap();

        // W = W₁W₂, b = b₁W₂ + b₂, evaluated independently
        let w1 = store.get(l1.weight);
        let w2 = store.get(l2.weight);
        let b1 = store.get(l1.bias).data();
        let b2 = store.get(l2.bias).data();
        for i in 0..5 {
            for j in 0..2 {
                let mut expect = b2[j];
                for k in 0..4 {
                    expect += b1[k] * w2.at(k, j);
                    for t in 0..3 {
                        expect += x.at(i, t) * w1.at(t, k) * w2.at(k, j);
                    }
                }
                assert!((g.value(y).at(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut r);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(lin.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn tdnn_context_validation() {
        assert!(validate_context(&[-2, -1, 0, 1, 2]).is_ok());
        assert!(validate_context(&[0]).is_ok());
        assert!(validate_context(&[-3, 0, 3]).is_ok());
        assert!(validate_context(&[-1, 0, 2]).is_err());
        assert!(validate_context(&[1, 0, -1]).is_err());
        assert!(validate_context(&[]).is_err());
    }

    #[test]
    fn tdnn_shape_contract() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = TdnnConfig::xvector(8, 12);
        let stack = TdnnStack::new(&mut store, "tdnn", 5, &cfg, &mut r).unwrap();
        for t in [1, 2, 7, 20] {
            let mut g = Graph::new();
            let p = store.bind(&mut g);
            let x = g.constant(random_matrix(t, 5, &mut r));
            let y = stack.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(y), &[t, 12]);
        }
    }

    #[test]
    fn tdnn_zero_weights_give_constant_rows() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let cfg = TdnnConfig::xvector(6, 4);
        let stack = TdnnStack::new(&mut store, "tdnn", 3, &cfg, &mut r).unwrap();
        let last = stack.layers.last().unwrap();
        for layer in &stack.layers {
            let shape = store.get(layer.linear.weight).shape().to_vec();
            store.set(layer.linear.weight, Tensor::zeros(&shape));
        }
        store.set(last.linear.bias, Tensor::vector(vec![0.3, -0.1, 0.8, 0.0]));
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.constant(random_matrix(9, 3, &mut r));
        let y = stack.forward(&mut g, &p, x).unwrap();
        let out = g.value(y);
        for i in 1..9 {
            assert_eq!(out.row(i), out.row(0));
        }
    }

    #[test]
    fn tdnn_single_layer_windowed_average() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let layer = TdnnLayer::new(&mut store, "t", &[-1, 0, 1], 2, 2, Activation::Relu, &mut r).unwrap();
        // W averages the three spliced frames channel-wise
        let mut w = Tensor::zeros(&[6, 2]);
        for c in 0..3 {
            for ch in 0..2 {
                w.data_mut()[(c * 2 + ch) * 2 + ch] = 1.0 / 3.0;
            }
        }
        store.set(layer.linear.weight, w);
        let x = uniform_tensor(&[6, 2], 1.0, &mut r).map(f64::abs);

        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xv = g.constant(x.clone());
        let spliced = g.context_gather(xv, &layer.offsets).unwrap();
        let h = layer.linear.forward(&mut g, &p, spliced).unwrap();
        let h = g.activation(h, Activation::Relu);

        for t in 0..6 {
            for ch in 0..2 {
                let mut sum = 0.0;
                for s in [t as isize - 1, t as isize, t as isize + 1] {
                    if (0..6).contains(&s) {
                        sum += x.at(s as usize, ch);
                    }
                }
                assert!((g.value(h).at(t, ch) - sum / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn drop_path_modes() {
        let mut r = rng();
        let x = random_matrix(3, 4, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());

        let none = DropPath::new(0.0).unwrap();
        assert_eq!(none.forward(&mut g, xv, &mut ForwardMode::Eval), xv);
        assert_eq!(none.forward(&mut g, xv, &mut ForwardMode::Train(&mut r)), xv);

        let dp = DropPath::new(0.3).unwrap();
        assert_eq!(dp.forward(&mut g, xv, &mut ForwardMode::Eval), xv);

        let dropped = dp.forward(&mut g, xv, &mut ForwardMode::Forced { keep: false });
        assert!(g.value(dropped).data().iter().all(|&v| v == 0.0));
        let kept = dp.forward(&mut g, xv, &mut ForwardMode::Forced { keep: true });
        assert_eq!(g.value(kept), &x.map(|v| v * (1.0 / 0.7)));

        for _ in 0..50 {
            let y = dp.forward(&mut g, xv, &mut ForwardMode::Train(&mut r));
            let out = g.value(y);
            let zero = out.data().iter().all(|&v| v == 0.0);
            assert!(zero || out == &x.map(|v| v * (1.0 / 0.7)));
        }
    }

    #[test]
    fn drop_path_rejects_p_one() {
        assert!(DropPath::new(1.0).is_err());
        assert!(DropPath::new(-0.1).is_err());
    }
}
