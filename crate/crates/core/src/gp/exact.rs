use std::f64::consts::PI;

use crate::diffmath::{adamw_step, linalg, AdamWConfig, Graph, OptimizerState, Tensor, Var};
use crate::error::{Error, Result};
use crate::gp::{GaussianPrediction, KernelParams, KernelVars};

fn check_train(x: &Tensor, y: &[f64]) -> Result<()> {
    if x.rows() != y.len() {
        return Err(Error::shape(
            "exact GP",
            format!("{} inputs but {} targets", x.rows(), y.len()),
        ));
    }
    Ok(())
}

fn noisy_gram(x: &Tensor, params: &KernelParams) -> Tensor {
    let mut k = params.gram(x, x);
    let noise = params.noise();
    for i in 0..x.rows() {
        k.set(i, i, k.get(i, i) + noise);
    }
    k
}

/// Exact GP posterior over latent values at `query`, zero prior mean.
pub fn exact_posterior(
    train_x: &Tensor,
    y: &[f64],
    query: &Tensor,
    params: &KernelParams,
) -> Result<Vec<GaussianPrediction>> {
    check_train(train_x, y)?;
    let prior = params.diag(query);
    if y.is_empty() {
        return Ok(prior
            .into_iter()
            .map(|v| GaussianPrediction::new(0.0, v.max(0.0).sqrt()))
            .collect());
    }
    let (l, _) = linalg::cholesky(&noisy_gram(train_x, params))?;
    let alpha = linalg::cho_solve(&l, &Tensor::column(y.to_vec()));
    let kxq = params.gram(train_x, query);
    let v = linalg::solve_lower(&l, &kxq);
    Ok((0..query.rows())
        .map(|j| {
            let mean: f64 = (0..y.len()).map(|i| kxq.get(i, j) * alpha.get(i, 0)).sum();
            let explained: f64 = (0..y.len()).map(|i| v.get(i, j) * v.get(i, j)).sum();
            GaussianPrediction::new(mean, clamp_variance(prior[j] - explained).sqrt())
        })
        .collect())
}

pub(crate) fn clamp_variance(v: f64) -> f64 {
    if v < -1e-10 {
        log::warn!("negative predictive variance {v:e} clamped to zero");
    }
    v.max(0.0)
}

/// Log marginal likelihood `log N(y | 0, K + noise * I)`.
pub fn exact_lml(train_x: &Tensor, y: &[f64], params: &KernelParams) -> Result<f64> {
    check_train(train_x, y)?;
    let n = y.len();
    let (l, _) = linalg::cholesky(&noisy_gram(train_x, params))?;
    let a = linalg::solve_lower(&l, &Tensor::column(y.to_vec()));
    Ok(-0.5 * a.sq_norm() - 0.5 * linalg::log_det_from_cholesky(&l) - 0.5 * n as f64 * (2.0 * PI).ln())
}

/// Log marginal likelihood on the graph; differentiable in `x` and the
/// kernel parameters.
pub fn exact_lml_graph(g: &mut Graph, x: Var, y: &[f64], kv: &KernelVars) -> Result<Var> {
    let n = y.len();
    let k = kv.gram(g, x, x);
    let eye = g.constant(Tensor::identity(n));
    let noise = g.mul_scalar(eye, kv.noise);
    let k = g.add(k, noise);
    let l = g.cholesky(k)?;
    let yv = g.constant(Tensor::column(y.to_vec()));
    let a = g.solve_lower(l, yv);
    let sq = g.square(a);
    let fit = g.sum(sq);
    let d = g.diag(l);
    let logd = g.ln(d);
    let half_logdet = g.sum(logd);
    let fit = g.scale(fit, -0.5);
    let half_logdet = g.scale(half_logdet, -1.0);
    let c = g.scalar(-0.5 * n as f64 * (2.0 * PI).ln());
    let lml = g.add(fit, half_logdet);
    let lml = g.add(lml, c);
    g.check_finite(lml, "exact log marginal likelihood")?;
    Ok(lml)
}

/// Fitted exact GP ready for repeated prediction.
#[derive(Clone, Debug)]
pub struct ExactGp {
    pub params: KernelParams,
    train_x: Tensor,
    chol: Option<Tensor>,
    alpha: Tensor,
}

impl ExactGp {
    pub fn new(train_x: Tensor, y: &[f64], params: KernelParams) -> Result<Self> {
        check_train(&train_x, y)?;
        if y.is_empty() {
            return Ok(Self {
                params,
                train_x,
                chol: None,
                alpha: Tensor::zeros(0, 1),
            });
        }
        let (l, _) = linalg::cholesky(&noisy_gram(&train_x, &params))?;
        let alpha = linalg::cho_solve(&l, &Tensor::column(y.to_vec()));
        Ok(Self {
            params,
            train_x,
            chol: Some(l),
            alpha,
        })
    }

    pub fn predict(&self, query: &Tensor) -> Vec<GaussianPrediction> {
        let prior = self.params.diag(query);
        let Some(l) = &self.chol else {
            return prior.into_iter().map(|v| GaussianPrediction::new(0.0, v.sqrt())).collect();
        };
        let kxq = self.params.gram(&self.train_x, query);
        let v = linalg::solve_lower(l, &kxq);
        let n = self.train_x.rows();
        (0..query.rows())
            .map(|j| {
                let mean: f64 = (0..n).map(|i| kxq.get(i, j) * self.alpha.get(i, 0)).sum();
                let explained: f64 = (0..n).map(|i| v.get(i, j) * v.get(i, j)).sum();
                GaussianPrediction::new(mean, clamp_variance(prior[j] - explained).sqrt())
            })
            .collect()
    }
}

/// Maximizes the exact log marginal likelihood over the kernel parameters
/// with AdamW. Returns the final LML.
pub fn fit_kernel(train_x: &Tensor, y: &[f64], params: &mut KernelParams, steps: usize, lr: f64) -> Result<f64> {
    check_train(train_x, y)?;
    let mut state = OptimizerState::new(AdamWConfig::new(lr, 0.0));
    for _ in 0..steps {
        let mut g = Graph::new();
        let kv = params.register(&mut g, true);
        let x = g.constant(train_x.clone());
        let lml = exact_lml_graph(&mut g, x, y, &kv)?;
        let loss = g.scale(lml, -1.0 / y.len().max(1) as f64);
        g.backward(loss)?;
        let grads: Vec<Tensor> = kv.all().iter().map(|&v| g.grad(v)).collect();
        adamw_step(&mut params.tensors_mut(), &grads, &mut state)?;
    }
    exact_lml(train_x, y, params)
}
