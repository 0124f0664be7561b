//! Differentiable computation core: dense tensors, a reverse-mode tape,
//! Cholesky-based linear algebra and parameter optimizers.

mod graph;
pub mod linalg;
mod optim;
mod tensor;

pub use graph::{sigmoid, softplus, softplus_inverse, Graph, Var, PRIOR_JITTER};
pub use optim::{adamw_step, adamw_step_partial, natgrad_step, AdamWConfig, OptimizerState};
pub use tensor::Tensor;

pub(crate) use graph::matern32_value;

/// Central finite-difference gradient of `f` at `x` (all entries).
pub fn finite_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `||a - b|| / max(||a||, ||b||, floor)` over all entries.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.sq_norm().sqrt().max(b.sq_norm().sqrt()).max(floor);
    diff / scale
}
