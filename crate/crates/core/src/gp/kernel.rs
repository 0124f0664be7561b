use serde::{Deserialize, Serialize};

use crate::diffmath::{matern32_value, softplus, softplus_inverse, Graph, Tensor, Var, PRIOR_JITTER};
use crate::error::{Error, Result};

/// Lower bound added to the softplus-mapped noise variance.
pub const NOISE_FLOOR: f64 = 1e-6;

/// Additive Matérn-3/2 plus (optional) linear kernel with Gaussian noise.
/// All values are stored unconstrained and mapped through softplus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub raw_lengthscale: Tensor,
    pub raw_matern_variance: Tensor,
    pub raw_linear_variance: Option<Tensor>,
    pub raw_noise: Tensor,
}

impl KernelParams {
    pub fn new(lengthscale: f64, matern_variance: f64, linear_variance: Option<f64>, noise: f64) -> Result<Self> {
        let positive = [Some(lengthscale), Some(matern_variance), linear_variance]
            .into_iter()
            .flatten()
            .all(|v| v > 0.0 && v.is_finite());
        if !positive || !(noise > NOISE_FLOOR) {
            return Err(Error::invalid("kernel parameters must be positive"));
        }
        Ok(Self {
            raw_lengthscale: Tensor::scalar(softplus_inverse(lengthscale)),
            raw_matern_variance: Tensor::scalar(softplus_inverse(matern_variance)),
            raw_linear_variance: linear_variance.map(|v| Tensor::scalar(softplus_inverse(v))),
            raw_noise: Tensor::scalar(softplus_inverse(noise - NOISE_FLOOR)),
        })
    }

    pub fn lengthscale(&self) -> f64 {
        softplus(self.raw_lengthscale.item())
    }

    pub fn matern_variance(&self) -> f64 {
        softplus(self.raw_matern_variance.item())
    }

    /// Zero when the linear component is disabled.
    pub fn linear_variance(&self) -> f64 {
        self.raw_linear_variance.as_ref().map_or(0.0, |t| softplus(t.item()))
    }

    pub fn noise(&self) -> f64 {
        softplus(self.raw_noise.item()) + NOISE_FLOOR
    }

    pub fn set_linear_variance(&mut self, v: f64) {
        self.raw_linear_variance = Some(Tensor::scalar(softplus_inverse(v)));
    }

    /// `k(a, b)`.
    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        let lin: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        matern32_value(d2, self.lengthscale(), self.matern_variance()) + self.linear_variance() * lin
    }

    /// Cross-covariance matrix between the rows of `a` and `b`.
    pub fn gram(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.rows());
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                out.set(i, j, self.eval(a.row_slice(i), b.row_slice(j)));
            }
        }
        out
    }

    /// Prior variances `k(x, x)` of each row.
    pub fn diag(&self, a: &Tensor) -> Vec<f64> {
        (0..a.rows()).map(|i| self.eval(a.row_slice(i), a.row_slice(i))).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.raw_lengthscale, &mut self.raw_matern_variance];
        if let Some(t) = self.raw_linear_variance.as_mut() {
            out.push(t);
        }
        out.push(&mut self.raw_noise);
        out
    }

    /// Places the raw parameters on the graph and derives the constrained
    /// values.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> KernelVars {
        let raw: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        KernelVars::from_raw(g, &raw).expect("three or four raw parameters")
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.raw_lengthscale, &self.raw_matern_variance];
        out.extend(self.raw_linear_variance.as_ref());
        out.push(&self.raw_noise);
        out
    }
}

pub struct KernelVars {
    raw: Vec<Var>,
    pub lengthscale: Var,
    pub matern_variance: Var,
    pub linear_variance: Option<Var>,
    pub noise: Var,
}

impl KernelVars {
    /// Derives the constrained values from raw 1x1 leaves in
    /// [`KernelParams::tensors_mut`] order: lengthscale, Matérn variance,
    /// optional linear variance, noise.
    pub fn from_raw(g: &mut Graph, raw: &[Var]) -> Result<Self> {
        let (lin, noise) = match raw.len() {
            3 => (None, raw[2]),
            4 => (Some(raw[2]), raw[3]),
            n => return Err(Error::shape("KernelVars", format!("{n} raw parameters"))),
        };
        let lengthscale = g.softplus(raw[0]);
        let matern_variance = g.softplus(raw[1]);
        let linear_variance = lin.map(|v| g.softplus(v));
        let sp = g.softplus(noise);
        let floor = g.scalar(NOISE_FLOOR);
        let noise = g.add(sp, floor);
        Ok(Self {
            raw: raw.to_vec(),
            lengthscale,
            matern_variance,
            linear_variance,
            noise,
        })
    }

    /// Raw leaves in [`KernelParams::tensors_mut`] order.
    pub fn all(&self) -> &[Var] {
        &self.raw
    }

    /// Cross-covariance `K(a, b)` on the graph.
    pub fn gram(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let d2 = g.sq_dist(a, b);
        let k = g.matern32(d2, self.lengthscale, self.matern_variance);
        match self.linear_variance {
            Some(lv) => {
                let bt = g.transpose(b);
                let ip = g.matmul(a, bt);
                let lin = g.mul_scalar(ip, lv);
                g.add(k, lin)
            }
            None => k,
        }
    }

    /// Prior variances `k(x, x) + jitter` of the rows of `a`, as `n x 1`.
    pub fn diag(&self, g: &mut Graph, a: Var) -> Var {
        let n = g.value(a).rows();
        let ones = g.constant(Tensor::full(n, 1, 1.0));
        let mut out = g.mul_scalar(ones, self.matern_variance);
        if let Some(lv) = self.linear_variance {
            let sq = g.square(a);
            let norms = g.row_sums(sq);
            let lin = g.mul_scalar(norms, lv);
            out = g.add(out, lin);
        }
        g.add_const(out, &Tensor::full(n, 1, PRIOR_JITTER))
    }
}
