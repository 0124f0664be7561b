use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{linalg, natgrad_step, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gp::exact::clamp_variance;
use crate::gp::{GaussianPrediction, KernelParams, KernelVars};

/// Inducing inputs `Z` and the variational distribution `q(u) = N(m, S)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvgpState {
    pub inducing: Tensor,
    pub mean: Tensor,
    pub cov: Tensor,
}

impl SvgpState {
    /// `q(u) = p(u)`: zero mean, covariance `K_MM`.
    pub fn prior(inducing: Tensor, params: &KernelParams) -> Result<Self> {
        let m = inducing.rows();
        if m == 0 {
            return Err(Error::invalid("at least one inducing point is required"));
        }
        let mut cov = params.gram(&inducing, &inducing);
        for i in 0..m {
            cov.set(i, i, cov.get(i, i) + linalg::JITTER);
        }
        linalg::cholesky_covariance(&cov)?;
        Ok(Self {
            inducing,
            mean: Tensor::zeros(m, 1),
            cov,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.rows()
    }

    /// Cholesky factor of `S`.
    pub fn cov_cholesky(&self) -> Result<Tensor> {
        linalg::cholesky_covariance(&self.cov)
    }

    pub fn register(&self, g: &mut Graph, train_inducing: bool, train_variational: bool) -> Result<SvgpVars> {
        let ls = self.cov_cholesky()?;
        let inducing = if train_inducing {
            g.param(&self.inducing)
        } else {
            g.constant(self.inducing.clone())
        };
        let (mean, cov_chol) = if train_variational {
            (g.param(&self.mean), g.param(&ls))
        } else {
            (g.constant(self.mean.clone()), g.constant(ls))
        };
        Ok(SvgpVars {
            inducing,
            mean,
            cov_chol,
        })
    }
}

pub struct SvgpVars {
    pub inducing: Var,
    pub mean: Var,
    /// Lower Cholesky factor of `S`.
    pub cov_chol: Var,
}

/// Evidence lower bound for a minibatch on the graph:
/// `(total_n / b) * sum_i E_q[log N(y_i | f_i, noise)] - KL(q(u) || p(u))`.
pub fn elbo_graph(
    g: &mut Graph,
    x: Var,
    y: &[f64],
    sv: &SvgpVars,
    kv: &KernelVars,
    total_n: usize,
) -> Result<Var> {
    let b = y.len();
    if b == 0 || g.value(x).rows() != b {
        return Err(Error::shape("svgp_elbo", "batch inputs and targets differ or are empty"));
    }
    if total_n < b {
        return Err(Error::invalid("total_n smaller than batch"));
    }
    let m = g.value(sv.inducing).rows();
    let kmm = kv.gram(g, sv.inducing, sv.inducing);
    let lm = g.cholesky(kmm)?;
    let kmn = kv.gram(g, sv.inducing, x);
    let a = g.solve_lower(lm, kmn);
    let mw = g.solve_lower(lm, sv.mean);
    let at = g.transpose(a);
    let mu = g.matmul(at, mw);
    let bm = g.solve_lower(lm, sv.cov_chol);
    let bmt = g.transpose(bm);
    let bta = g.matmul(bmt, a);

    let kdiag = kv.diag(g, x);
    let a2 = g.square(a);
    let qdiag = g.col_sums(a2);
    let qdiag = g.transpose(qdiag);
    let bta2 = g.square(bta);
    let sdiag = g.col_sums(bta2);
    let sdiag = g.transpose(sdiag);
    let var = g.sub(kdiag, qdiag);
    let var = g.add(var, sdiag);

    let yv = g.constant(Tensor::column(y.to_vec()));
    let resid = g.sub(yv, mu);
    let r2 = g.square(resid);
    let ssr = g.sum(r2);
    let svar = g.sum(var);
    let err = g.add(ssr, svar);
    let inv_noise = g.recip(kv.noise);
    let err = g.mul(err, inv_noise);
    let err = g.scale(err, -0.5);
    let log_noise = g.ln(kv.noise);
    let log_noise = g.scale(log_noise, -0.5 * b as f64);
    let ell = g.add(err, log_noise);
    let c = g.scalar(-0.5 * b as f64 * (2.0 * PI).ln());
    let ell = g.add(ell, c);
    let ell = g.scale(ell, total_n as f64 / b as f64);

    let bm2 = g.square(bm);
    let trace = g.sum(bm2);
    let mw2 = g.square(mw);
    let maha = g.sum(mw2);
    let dm = g.diag(lm);
    let ldm = g.ln(dm);
    let logdet_k = g.sum(ldm);
    let ds = g.diag(sv.cov_chol);
    let lds = g.ln(ds);
    let logdet_s = g.sum(lds);
    let kl = g.add(trace, maha);
    let k2 = g.scale(logdet_k, 2.0);
    let kl = g.add(kl, k2);
    let s2 = g.scale(logdet_s, -2.0);
    let kl = g.add(kl, s2);
    let mc = g.scalar(-(m as f64));
    let kl = g.add(kl, mc);
    let kl = g.scale(kl, 0.5);

    let elbo = g.sub(ell, kl);
    g.check_finite(elbo, "svgp elbo")?;
    Ok(elbo)
}

/// ELBO value for encoded inputs `x` (rows) and targets `y`.
pub fn svgp_elbo(x: &Tensor, y: &[f64], state: &SvgpState, params: &KernelParams, total_n: usize) -> Result<f64> {
    let mut g = Graph::new();
    let kv = params.register(&mut g, false);
    let sv = state.register(&mut g, false, false)?;
    let xv = g.constant(x.clone());
    let e = elbo_graph(&mut g, xv, y, &sv, &kv, total_n)?;
    Ok(g.value(e).item())
}

/// Gradients of the ELBO with respect to the variational mean and covariance
/// `(dL/dm, dL/dS)`, in closed form.
pub fn variational_grads(
    x: &Tensor,
    y: &[f64],
    state: &SvgpState,
    params: &KernelParams,
    total_n: usize,
) -> Result<(Tensor, Tensor)> {
    let b = y.len();
    if b == 0 || x.rows() != b {
        return Err(Error::shape("variational_grads", "batch inputs and targets differ or are empty"));
    }
    let m = state.num_inducing();
    let scale = total_n as f64 / b as f64 / params.noise();
    let (lm, _) = linalg::cholesky(&params.gram(&state.inducing, &state.inducing))?;
    let kmn = params.gram(&state.inducing, x);
    let phi = linalg::cho_solve(&lm, &kmn);
    let kinv = linalg::cho_inverse(&lm);
    let sinv = linalg::cho_inverse(&state.cov_cholesky()?);
    let pred = phi.transpose().matmul(&state.mean)?;
    let resid = Tensor::column((0..b).map(|i| y[i] - pred.get(i, 0)).collect());
    let mut gm = phi.matmul(&resid)?;
    let kinv_m = kinv.matmul(&state.mean)?;
    for i in 0..m {
        gm.set(i, 0, scale * gm.get(i, 0) - kinv_m.get(i, 0));
    }
    let mut gs = phi.matmul(&phi.transpose())?;
    for (i, v) in gs.data_mut().iter_mut().enumerate() {
        *v = -0.5 * scale * *v - 0.5 * kinv.data()[i] + 0.5 * sinv.data()[i];
    }
    Ok((gm, gs))
}

/// One natural-gradient update of `q(u)` on a batch.
pub fn natgrad_update(
    x: &Tensor,
    y: &[f64],
    state: &mut SvgpState,
    params: &KernelParams,
    total_n: usize,
    step: f64,
) -> Result<()> {
    let (gm, gs) = variational_grads(x, y, state, params, total_n)?;
    let (m, s) = natgrad_step(&state.mean, &state.cov, &gm, &gs, step)?;
    state.mean = m;
    state.cov = s;
    Ok(())
}

/// Closed-form optimal `q(u)` for a Gaussian likelihood on the full data.
pub fn optimal_state(x: &Tensor, y: &[f64], inducing: Tensor, params: &KernelParams) -> Result<SvgpState> {
    let mut state = SvgpState::prior(inducing, params)?;
    natgrad_update(x, y, &mut state, params, y.len(), 1.0)?;
    Ok(state)
}

/// Cached factors for repeated SVGP prediction.
#[derive(Clone, Debug)]
pub struct SvgpPredictor {
    params: KernelParams,
    inducing: Tensor,
    lm: Tensor,
    mean_w: Tensor,
    cov_w: Tensor,
}

impl SvgpPredictor {
    pub fn new(state: &SvgpState, params: &KernelParams) -> Result<Self> {
        let (lm, _) = linalg::cholesky(&params.gram(&state.inducing, &state.inducing))?;
        let mean_w = linalg::solve_lower(&lm, &state.mean);
        let cov_w = linalg::solve_lower(&lm, &state.cov_cholesky()?);
        Ok(Self {
            params: params.clone(),
            inducing: state.inducing.clone(),
            lm,
            mean_w,
            cov_w,
        })
    }

    pub fn predict(&self, query: &Tensor) -> Vec<GaussianPrediction> {
        let prior = self.params.diag(query);
        let kmq = self.params.gram(&self.inducing, query);
        let a = linalg::solve_lower(&self.lm, &kmq);
        let bta = self.cov_w.transpose().matmul(&a).expect("inducing dimensions agree");
        let m = a.rows();
        (0..query.rows())
            .map(|j| {
                let mut mean = 0.0;
                let mut q = 0.0;
                for i in 0..m {
                    let aij = a.get(i, j);
                    mean += aij * self.mean_w.get(i, 0);
                    q += aij * aij;
                }
                let s: f64 = (0..bta.rows()).map(|i| bta.get(i, j) * bta.get(i, j)).sum();
                GaussianPrediction::new(mean, clamp_variance(prior[j] - q + s).sqrt())
            })
            .collect()
    }
}

pub fn svgp_predict(query: &Tensor, state: &SvgpState, params: &KernelParams) -> Result<Vec<GaussianPrediction>> {
    Ok(SvgpPredictor::new(state, params)?.predict(query))
}

/// k-means++ seeding followed by Lloyd iterations. When there are fewer
/// distinct points than centers, the remaining centers are jittered copies.
pub fn kmeans<R: Rng + ?Sized>(points: &Tensor, k: usize, iters: usize, rng: &mut R) -> Result<Tensor> {
    let n = points.rows();
    let d = points.cols();
    if n == 0 || k == 0 {
        return Err(Error::invalid("k-means needs points and at least one center"));
    }
    let sq = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    if k >= n {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        for &i in &idx {
            centers.push(points.row_slice(i).to_vec());
        }
        let spread = (0..d)
            .map(|c| {
                let col: Vec<f64> = (0..n).map(|r| points.get(r, c)).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt()
            })
            .fold(0.0, f64::max)
            .max(1e-3);
        while centers.len() < k {
            let base = centers[rng.random_range(0..n)].clone();
            centers.push(base.iter().map(|v| v + 0.05 * spread * (rng.random::<f64>() * 2.0 - 1.0)).collect());
        }
        return Tensor::from_rows(&centers);
    }
    centers.push(points.row_slice(rng.random_range(0..n)).to_vec());
    let mut dist: Vec<f64> = (0..n).map(|i| sq(points.row_slice(i), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if t < w {
                    chosen = i;
                    break;
                }
                t -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row_slice(pick).to_vec();
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq(points.row_slice(i), &c));
        }
        centers.push(c);
    }
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let p = points.row_slice(i);
            let best = (0..k)
                .min_by(|&x, &y| sq(p, &centers[x]).total_cmp(&sq(p, &centers[y])))
                .expect("k > 0");
            if best != *a {
                *a = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(points.row_slice(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Tensor::from_rows(&centers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::exact::{exact_lml, exact_posterior};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize) -> (Tensor, Vec<f64>) {
        let x = Tensor::new(n, 1, (0..n).map(|i| -2.0 + 4.0 * i as f64 / (n - 1) as f64).collect()).unwrap();
        let y = (0..n).map(|i| (1.3 * x.get(i, 0)).sin() + 0.1 * x.get(i, 0)).collect();
        (x, y)
    }

    #[test]
    fn kl_vanishes_at_prior() {
        let p = KernelParams::new(0.7, 1.0, Some(0.2), 0.1).unwrap();
        let (x, y) = toy(6);
        let state = SvgpState::prior(x.clone(), &p).unwrap();
        // With q = p the ELBO reduces to the expected log-likelihood term.
        let mut g = Graph::new();
        let kv = p.register(&mut g, false);
        let sv = state.register(&mut g, false, false).unwrap();
        let xv = g.constant(x.clone());
        let elbo = elbo_graph(&mut g, xv, &y, &sv, &kv, 6).unwrap();
        let noise = p.noise();
        let kdiag = p.diag(&x);
        let ell: f64 = y
            .iter()
            .zip(&kdiag)
            .map(|(yi, ki)| -0.5 * (2.0 * PI * noise).ln() - (yi * yi + ki + linalg::JITTER) / (2.0 * noise))
            .sum();
        assert!((g.value(elbo).item() - ell).abs() < 1e-6);
    }

    #[test]
    fn optimal_state_with_z_equal_x_matches_lml() {
        let p = KernelParams::new(0.8, 1.0, None, 0.05).unwrap();
        let (x, y) = toy(20);
        let state = optimal_state(&x, &y, x.clone(), &p).unwrap();
        let elbo = svgp_elbo(&x, &y, &state, &p, 20).unwrap();
        let lml = exact_lml(&x, &y, &p).unwrap();
        assert!(elbo <= lml + 1e-6);
        assert!(lml - elbo < 1e-3, "gap {}", lml - elbo);
    }

    #[test]
    fn predictions_match_exact_gp_at_optimum() {
        let p = KernelParams::new(0.8, 1.0, Some(0.3), 0.05).unwrap();
        let (x, y) = toy(12);
        let state = optimal_state(&x, &y, x.clone(), &p).unwrap();
        let q = Tensor::new(10, 1, (0..10).map(|i| -2.5 + 0.55 * i as f64).collect()).unwrap();
        let a = svgp_predict(&q, &state, &p).unwrap();
        let b = exact_posterior(&x, &y, &q, &p).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u.mean - v.mean).abs() < 1e-4);
            assert!((u.std.powi(2) - v.std.powi(2)).abs() < 1e-4);
        }
    }

    #[test]
    fn far_field_reverts_to_prior() {
        let p = KernelParams::new(0.5, 1.7, None, 0.05).unwrap();
        let (x, y) = toy(8);
        let state = optimal_state(&x, &y, x.clone(), &p).unwrap();
        let q = Tensor::new(1, 1, vec![1e3]).unwrap();
        let pred = svgp_predict(&q, &state, &p).unwrap();
        assert!(pred[0].mean.abs() < 1e-8);
        assert!((pred[0].std.powi(2) - 1.7).abs() < 1e-8);
        let again = svgp_predict(&q, &state, &p).unwrap();
        assert_eq!(pred, again);
    }

    #[test]
    fn kmeans_returns_requested_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = Tensor::randn(50, 3, 1.0, &mut rng);
        assert_eq!(kmeans(&pts, 7, 10, &mut rng).unwrap().shape(), (7, 3));
        let few = Tensor::randn(3, 3, 1.0, &mut rng);
        let c = kmeans(&few, 5, 10, &mut rng).unwrap();
        assert_eq!(c.shape(), (5, 3));
        assert!(c.is_finite());
    }
}
