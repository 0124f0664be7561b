//! Reverse-mode autodiff on the tape: fit a linear model with AdamW and
//! compare the analytic gradient with central differences.

use ftdkl::diffmath::{adamw_step, finite_difference, relative_error, AdamWConfig, Graph, OptimizerState, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(g: &mut Graph, x: &Tensor, y: &Tensor, w: &Tensor) -> (ftdkl::diffmath::Var, ftdkl::diffmath::Var) {
    let wv = g.param(w);
    let xv = g.constant(x.clone());
    let yv = g.constant(y.clone());
    let pred = g.matmul(xv, wv);
    let r = g.sub(pred, yv);
    let sq = g.square(r);
    let s = g.sum(sq);
    (g.scale(s, 1.0 / x.rows() as f64), wv)
}

fn main() -> ftdkl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::randn(64, 3, 1.0, &mut rng);
    let truth = Tensor::column(vec![1.5, -2.0, 0.5]);
    let y = x.matmul(&truth)?;
    let mut w = Tensor::zeros(3, 1);

    let mut g = Graph::new();
    let (l, wv) = loss(&mut g, &x, &y, &w);
    g.backward(l)?;
    let numeric = finite_difference(&w, 1e-5, |p| {
        let mut g = Graph::new();
        let (l, _) = loss(&mut g, &x, &y, p);
        g.value(l).item()
    });
    println!("gradient relative error: {:.2e}", relative_error(&g.grad(wv), &numeric, 1e-4));

    let mut opt = OptimizerState::new(AdamWConfig::new(0.05, 0.0));
    for step in 0..300 {
        let mut g = Graph::new();
        let (l, wv) = loss(&mut g, &x, &y, &w);
        g.backward(l)?;
        let grad = g.grad(wv);
        adamw_step(&mut [&mut w], &[grad], &mut opt)?;
        if step % 100 == 0 {
            println!("step {step:>3}  loss {:.5}", g.value(l).item());
        }
    }
    println!("fitted weights {:?}", w.data());
    Ok(())
}
