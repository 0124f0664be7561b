//! Gaussian process heads: kernel, exact regression and the sparse
//! variational approximation.

pub mod exact;
mod kernel;
pub mod svgp;

use serde::{Deserialize, Serialize};

pub use exact::{exact_lml, exact_lml_graph, exact_posterior, fit_kernel, ExactGp};
pub use kernel::{KernelParams, KernelVars, NOISE_FLOOR};
pub use svgp::{
    elbo_graph, kmeans, natgrad_update, optimal_state, svgp_elbo, svgp_predict, variational_grads, SvgpPredictor,
    SvgpState, SvgpVars,
};

/// Predictive mean and standard deviation of the latent function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrediction {
    pub mean: f64,
    pub std: f64,
}

impl GaussianPrediction {
    pub fn new(mean: f64, std: f64) -> Self {
        Self { mean, std }
    }
}
