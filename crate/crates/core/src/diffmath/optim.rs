//! Parameter updates: AdamW for ordinary weights and a natural-gradient
//! step for the Gaussian variational distribution `q(u) = N(m, S)`.

use serde::{Deserialize, Serialize};

use crate::diffmath::linalg;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter group. Each parameter keeps its
/// own step count, so parameters skipped in some updates get the bias
/// correction of the updates they actually received.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    param_steps: Vec<u64>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            param_steps: Vec::new(),
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Number of update calls so far.
    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut OptimizerState) -> Result<()> {
    let grads: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
    adamw_step_partial(params, &grads, state)
}

/// AdamW update in which parameters with a `None` gradient are left
/// untouched, including their weight decay and moments.
pub fn adamw_step_partial(
    params: &mut [&mut Tensor],
    grads: &[Option<&Tensor>],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("{} params but {} grads", params.len(), grads.len()),
        ));
    }
    if state.first.is_empty() {
        state.first = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        state.second = state.first.clone();
        state.param_steps = vec![0; params.len()];
    }
    if state.first.len() != params.len() {
        return Err(Error::shape("adamw_step", "parameter count changed"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        let gshape = g.map_or(p.shape(), |g| g.shape());
        if p.shape() != gshape || p.shape() != m.shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("param {:?}, grad {:?}", p.shape(), gshape),
            ));
        }
    }
    state.step += 1;
    let c = &state.config;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        state.param_steps[i] += 1;
        let t = state.param_steps[i] as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            *w -= c.lr * c.weight_decay * *w;
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

/// Natural-gradient ascent step on `q(u) = N(m, S)`.
///
/// `grad_m` and `grad_s` are the Euclidean gradients of the objective with
/// respect to `m` and `S`. The natural gradient in the natural parameters
/// `(S^{-1} m, -S^{-1}/2)` equals the gradient in the expectation parameters
/// `(m, S + m m^T)`, which is `(grad_m - 2 grad_s m, grad_s)`.
pub fn natgrad_step(
    m: &Tensor,
    s: &Tensor,
    grad_m: &Tensor,
    grad_s: &Tensor,
    step: f64,
) -> Result<(Tensor, Tensor)> {
    let n = m.rows();
    if m.cols() != 1 || s.shape() != (n, n) || grad_m.shape() != m.shape() || grad_s.shape() != s.shape() {
        return Err(Error::shape("natgrad_step", "inconsistent variational shapes"));
    }
    if !(0.0..=1.0).contains(&step) {
        return Err(Error::invalid(format!("natural-gradient step {step} outside [0, 1]")));
    }
    let ls = linalg::cholesky_covariance(s)?;
    if step == 0.0 {
        return Ok((m.clone(), s.clone()));
    }
    let gs = linalg::symmetrize(grad_s);
    // theta1 = S^{-1} m, precision = S^{-1} = -2 theta2
    let theta1 = linalg::cho_solve(&ls, m);
    let prec = linalg::cho_inverse(&ls);
    let gsm = gs.matmul(m)?;
    let mut new_theta1 = theta1;
    for k in 0..n {
        let g1 = grad_m.get(k, 0) - 2.0 * gsm.get(k, 0);
        new_theta1.set(k, 0, new_theta1.get(k, 0) + step * g1);
    }
    let mut new_prec = prec;
    for (p, g) in new_prec.data_mut().iter_mut().zip(gs.data()) {
        *p -= 2.0 * step * g;
    }
    let new_prec = linalg::symmetrize(&new_prec);
    let lp = linalg::cholesky_covariance(&new_prec)?;
    let new_s = linalg::cho_inverse(&lp);
    let new_m = linalg::cho_solve(&lp, &new_theta1);
    // The returned covariance must itself factor.
    linalg::cholesky_covariance(&new_s)?;
    Ok((new_m, new_s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let mut p = Tensor::row(vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut st = OptimizerState::new(AdamWConfig::new(0.1, 0.0));
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[Tensor::zeros(1, 3)], &mut st).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.steps(), 5);
    }

    #[test]
    fn unit_gradient_decreases_param() {
        let mut p = Tensor::scalar(0.5);
        let mut st = OptimizerState::new(AdamWConfig::new(0.01, 0.0));
        let mut prev = p.item();
        for _ in 0..20 {
            adamw_step(&mut [&mut p], &[Tensor::scalar(1.0)], &mut st).unwrap();
            assert!(p.item() < prev);
            prev = p.item();
        }
    }

    #[test]
    fn converges_on_convex_scalar() {
        let mut p = Tensor::scalar(0.0);
        let mut st = OptimizerState::new(AdamWConfig::new(0.1, 0.0));
        for _ in 0..100 {
            let g = 2.0 * (p.item() - 3.0);
            adamw_step(&mut [&mut p], &[Tensor::scalar(g)], &mut st).unwrap();
        }
        assert!((p.item() - 3.0).abs() < 0.1, "p = {}", p.item());
    }

    #[test]
    fn skipped_parameters_are_untouched() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut st = OptimizerState::new(AdamWConfig::new(0.1, 0.5));
        let g = Tensor::scalar(2.0);
        adamw_step_partial(&mut [&mut a, &mut b], &[Some(&g), None], &mut st).unwrap();
        assert_eq!(b.item(), 1.0);
        // first update of `b` gets a fresh bias correction: step = lr * sign(g)
        adamw_step_partial(&mut [&mut a, &mut b], &[None, Some(&g)], &mut st).unwrap();
        let expected = 1.0 * (1.0 - 0.1 * 0.5) - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((b.item() - expected).abs() < 1e-15);
        assert_eq!(st.steps(), 2);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = Tensor::zeros(2, 2);
        let mut st = OptimizerState::new(AdamWConfig::new(0.1, 0.0));
        assert!(adamw_step(&mut [&mut p], &[Tensor::zeros(1, 2)], &mut st).is_err());
    }

    // Objective: E_q[log N(y | u, noise I)] - KL(q || N(0, K)). Its optimum
    // is the conjugate posterior, reached by a single unit natural step.
    fn conjugate_grads(m: &Tensor, s: &Tensor, k: &Tensor, y: &Tensor, noise: f64) -> (Tensor, Tensor) {
        let (lk, _) = linalg::cholesky_with(k, 0.0).map(|l| (l, ())).unwrap();
        let kinv = linalg::cho_inverse(&lk);
        let (ls, _) = linalg::cholesky_with(s, 0.0).map(|l| (l, ())).unwrap();
        let sinv = linalg::cho_inverse(&ls);
        let n = m.rows();
        let kinv_m = kinv.matmul(m).unwrap();
        let mut gm = Tensor::zeros(n, 1);
        let mut gs = Tensor::zeros(n, n);
        for i in 0..n {
            gm.set(i, 0, (y.get(i, 0) - m.get(i, 0)) / noise - kinv_m.get(i, 0));
            for j in 0..n {
                let lik = if i == j { -0.5 / noise } else { 0.0 };
                gs.set(i, j, lik - 0.5 * kinv.get(i, j) + 0.5 * sinv.get(i, j));
            }
        }
        (gm, gs)
    }

    #[test]
    fn unit_step_reaches_conjugate_posterior() {
        let k = Tensor::new(3, 3, vec![1.0, 0.5, 0.2, 0.5, 1.0, 0.5, 0.2, 0.5, 1.0]).unwrap();
        let y = Tensor::column(vec![0.3, -1.0, 2.0]);
        let noise = 0.1;
        let m0 = Tensor::column(vec![0.1, 0.2, -0.3]);
        let s0 = Tensor::new(3, 3, vec![0.5, 0.1, 0.0, 0.1, 0.4, 0.0, 0.0, 0.0, 0.3]).unwrap();
        let (gm, gs) = conjugate_grads(&m0, &s0, &k, &y, noise);
        let (m1, s1) = natgrad_step(&m0, &s0, &gm, &gs, 1.0).unwrap();

        // posterior: S* = (K^{-1} + I/noise)^{-1}, m* = S* y / noise
        let lk = linalg::cholesky_with(&k, 0.0).unwrap();
        let mut prec = linalg::cho_inverse(&lk);
        for i in 0..3 {
            prec.set(i, i, prec.get(i, i) + 1.0 / noise);
        }
        let lp = linalg::cholesky_with(&prec, 0.0).unwrap();
        let s_star = linalg::cho_inverse(&lp);
        let m_star = s_star.matmul(&y).unwrap().map(|v| v / noise);
        assert!(m1.max_abs_diff(&m_star) < 1e-9);
        assert!(s1.max_abs_diff(&s_star) < 1e-9);
    }

    #[test]
    fn zero_step_is_identity_and_result_factors() {
        let m = Tensor::column(vec![1.0, 2.0]);
        let s = Tensor::new(2, 2, vec![1.0, 0.3, 0.3, 2.0]).unwrap();
        let g = Tensor::zeros(2, 2);
        let (m1, s1) = natgrad_step(&m, &s, &Tensor::zeros(2, 1), &g, 0.0).unwrap();
        assert_eq!(m1, m);
        assert_eq!(s1, s);
        let gs = Tensor::new(2, 2, vec![-0.2, 0.0, 0.0, -0.1]).unwrap();
        let (_, s2) = natgrad_step(&m, &s, &Tensor::column(vec![0.5, -0.5]), &gs, 0.1).unwrap();
        assert!(linalg::cholesky_with(&s2, 0.0).is_some());
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let m = Tensor::column(vec![0.0, 0.0]);
        let s = Tensor::new(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        let z = Tensor::zeros(2, 2);
        assert!(natgrad_step(&m, &s, &Tensor::zeros(2, 1), &z, 0.5).is_err());
    }
}
