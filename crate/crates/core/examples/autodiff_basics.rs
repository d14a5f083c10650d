//! Building a small graph by hand and reading gradients back.
//!
//! ```text
//! cargo run --example autodiff_basics
//! ```

use poformer::{Activation, Graph, Tensor};

fn main() -> poformer::Result<()> {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.0, 1.5]])?);
    let w = g.param(Tensor::from_rows(&[vec![0.2, -0.1], vec![0.4, 0.3], vec![-0.5, 0.8]])?);

    let h = g.matmul(x, w)?;
    let h = g.activation(h, Activation::Gelu);
    let p = g.softmax_rows(h)?;
    let loss = g.cross_entropy(p, &[1, 0])?;
    println!("loss = {:.6}", g.value(loss).data()[0]);

    g.backward(loss)?;
    println!("dL/dx = {:?}", g.grad(x).unwrap().data());
    println!("dL/dw = {:?}", g.grad(w).unwrap().data());

    // gradients accumulate across backward calls until cleared
    g.backward(loss)?;
    println!("after a second backward, dL/dx[0] = {:.6}", g.grad(x).unwrap().data()[0]);
    g.zero_grad();
    println!("after zero_grad: {:?}", g.grad(x).map(|t| t.data().to_vec()));
    Ok(())
}
