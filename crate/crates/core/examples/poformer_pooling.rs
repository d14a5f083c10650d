//! Pooling a sequence of frames with the transformer stack, and looking at
//! what the class token attends to.
//!
//! ```text
//! cargo run --example poformer_pooling
//! ```

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use poformer::{
    ForwardMode, Graph, ParamStore, PoFormer, PoFormerConfig, PoolingHead, PositionalEncoding, Rng, Tensor,
};

fn main() -> poformer::Result<()> {
    let mut rng = Rng::seed_from_u64(1);
    let (frames_len, feature_dim) = (12, 20);
    let data = (0..frames_len * feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let frames = Tensor::new(&[frames_len, feature_dim], data)?;

    for head in [
        PoolingHead::ClassToken,
        PoolingHead::ClassTokenPlusStats,
        PoolingHead::StatsPoolingBaseline,
    ] {
        let cfg = PoFormerConfig { head, ..PoFormerConfig::desk() };
        let mut store = ParamStore::new();
        let model = PoFormer::new(&mut store, "pool", feature_dim, &cfg, &mut rng)?;
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(frames.clone());
        let pooled = model.forward(&mut g, &p, x, &mut ForwardMode::Eval)?;
        println!("{head:?}: {} params, output {:?}", store.numel(), g.shape(pooled));
    }

    // what the class token attends to in the last layer
    let cfg = PoFormerConfig::desk();
    let mut store = ParamStore::new();
    let model = PoFormer::new(&mut store, "pool", feature_dim, &cfg, &mut rng)?;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.constant(frames.clone());
    let (_, maps) = model.encode_with_attention(&mut g, &p, x, &mut ForwardMode::Eval)?;
    for (h, attn) in maps[maps.len() - 1].iter().enumerate() {
        let row: Vec<String> = g.value(*attn).row(0).iter().map(|a| format!("{a:.3}")).collect();
        println!("head {h}, class token over [cls, frames..]: {}", row.join(" "));
    }

    // with no positional encoding the pooled vector ignores frame order
    let cfg = PoFormerConfig { pos_encoding: PositionalEncoding::None, ..PoFormerConfig::desk() };
    let mut store = ParamStore::new();
    let model = PoFormer::new(&mut store, "pool", feature_dim, &cfg, &mut rng)?;
    let reversed = Tensor::from_rows(&(0..frames_len).rev().map(|t| frames.row(t).to_vec()).collect::<Vec<_>>())?;
    let embed = |input: &Tensor| -> poformer::Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(input.clone());
        let y = model.forward(&mut g, &p, x, &mut ForwardMode::Eval)?;
        Ok(g.value(y).clone())
    };
    println!(
        "no positional encoding, reversed frames: max diff {:.1e}",
        embed(&frames)?.max_abs_diff(&embed(&reversed)?)
    );
    Ok(())
}
