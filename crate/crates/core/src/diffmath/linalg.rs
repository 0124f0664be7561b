//! Small dense linear algebra on [`Tensor`]s: Cholesky with a fixed jitter
//! schedule and triangular solves.

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Diagonal jitter added before every Cholesky factorization.
pub const JITTER: f64 = 1e-6;
/// Jitter used for the single retry when the first factorization fails.
pub const JITTER_RETRY: f64 = 1e-4;

/// Lower Cholesky factor of `a + jitter * I`, or `None` if a pivot is not
/// strictly positive. Only the lower triangle of `a` is read.
pub fn cholesky_with(a: &Tensor, jitter: f64) -> Option<Tensor> {
    let n = a.rows();
    debug_assert_eq!(a.rows(), a.cols());
    let mut l = Tensor::zeros(n, n);
    let ld = l.data_mut();
    let ad = a.data();
    for j in 0..n {
        let mut d = ad[j * n + j] + jitter;
        for k in 0..j {
            d -= ld[j * n + k] * ld[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        let djj = d.sqrt();
        ld[j * n + j] = djj;
        for i in j + 1..n {
            let mut s = ad[i * n + j];
            for k in 0..j {
                s -= ld[i * n + k] * ld[j * n + k];
            }
            ld[i * n + j] = s / djj;
        }
    }
    Some(l)
}

/// Cholesky factor with the standard jitter schedule. Returns the factor
/// and the jitter that was actually applied.
pub fn cholesky(a: &Tensor) -> Result<(Tensor, f64)> {
    if a.rows() != a.cols() {
        return Err(Error::shape("cholesky", format!("{:?}", a.shape())));
    }
    if let Some(l) = cholesky_with(a, JITTER) {
        return Ok((l, JITTER));
    }
    log::debug!("cholesky failed with jitter {JITTER:e}, retrying with {JITTER_RETRY:e}");
    cholesky_with(a, JITTER_RETRY)
        .map(|l| (l, JITTER_RETRY))
        .ok_or(Error::NotPositiveDefinite {
            jitter: JITTER_RETRY,
        })
}

/// Factors a matrix that is already a covariance (such as a variational
/// `S`) without perturbing it, falling back to the jitter schedule only when
/// the plain factorization fails.
pub fn cholesky_covariance(a: &Tensor) -> Result<Tensor> {
    if a.rows() != a.cols() {
        return Err(Error::shape("cholesky", format!("{:?}", a.shape())));
    }
    match cholesky_with(a, 0.0) {
        Some(l) => Ok(l),
        None => Ok(cholesky(a)?.0),
    }
}

/// Solves `L X = B` for lower-triangular `L`.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let m = b.cols();
    debug_assert_eq!(b.rows(), n);
    let mut x = b.clone();
    let ld = l.data();
    let xd = x.data_mut();
    for i in 0..n {
        let (done, rest) = xd.split_at_mut(i * m);
        let row = &mut rest[..m];
        for k in 0..i {
            let lik = ld[i * n + k];
            if lik != 0.0 {
                let src = &done[k * m..(k + 1) * m];
                for (r, s) in row.iter_mut().zip(src) {
                    *r -= lik * s;
                }
            }
        }
        let inv = 1.0 / ld[i * n + i];
        for r in row.iter_mut() {
            *r *= inv;
        }
    }
    x
}

/// Solves `L^T X = B` for lower-triangular `L`.
pub fn solve_lower_transpose(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let m = b.cols();
    debug_assert_eq!(b.rows(), n);
    let mut x = b.clone();
    let ld = l.data();
    let xd = x.data_mut();
    for i in (0..n).rev() {
        let (head, tail) = xd.split_at_mut((i + 1) * m);
        let row = &mut head[i * m..];
        for k in i + 1..n {
            let lki = ld[k * n + i];
            if lki != 0.0 {
                let src = &tail[(k - i - 1) * m..(k - i) * m];
                for (r, s) in row.iter_mut().zip(src) {
                    *r -= lki * s;
                }
            }
        }
        let inv = 1.0 / ld[i * n + i];
        for r in row.iter_mut() {
            *r *= inv;
        }
    }
    x
}

/// Solves `(L L^T) X = B`.
pub fn cho_solve(l: &Tensor, b: &Tensor) -> Tensor {
    solve_lower_transpose(l, &solve_lower(l, b))
}

/// `(L L^T)^{-1}`.
pub fn cho_inverse(l: &Tensor) -> Tensor {
    let inv = cho_solve(l, &Tensor::identity(l.rows()));
    symmetrize(&inv)
}

pub fn log_det_from_cholesky(l: &Tensor) -> f64 {
    (0..l.rows()).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0
}

pub fn symmetrize(a: &Tensor) -> Tensor {
    let n = a.rows();
    let mut out = a.clone();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// `L L^T` for a lower-triangular factor.
pub fn outer_from_cholesky(l: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(l.rows(), l.rows());
    super::tensor::gemm(l, false, l, true, &mut out, 0.0);
    out
}
