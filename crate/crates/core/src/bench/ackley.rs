use std::cell::RefCell;
use std::f64::consts::{E, PI};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bo::{optimize_acquisition_with, AcquisitionConfig};
use crate::data::{ParamSpace, SourceDataset};
use crate::error::{Error, Result};
use crate::gp::GaussianPrediction;

const A: f64 = 20.0;
const B: f64 = 0.2;
const C: f64 = 2.0 * PI;

/// Ackley function with a random per-dimension scale and offset, searched
/// over `[-1, 1]^D`. The minimum is 0 at `x = offset`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AckleyInstance {
    pub scale: Vec<f64>,
    pub offset: Vec<f64>,
    pub seed: u64,
}

impl AckleyInstance {
    /// Scale and offset are drawn alternately per dimension, so instances
    /// of different dimension from the same seed share their leading
    /// dimensions.
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut scale, mut offset) = (Vec::with_capacity(dim), Vec::with_capacity(dim));
        for _ in 0..dim {
            scale.push(rng.random_range(0.01..2.0));
            offset.push(rng.random_range(-0.8..0.8));
        }
        Self { scale, offset, seed }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    /// `x1 .. xD` on `[-1, 1]`.
    pub fn space(&self) -> ParamSpace {
        ParamSpace::uniform_box("x", self.dim(), -1.0, 1.0).expect("valid box")
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!("expected {} values, got {}", self.dim(), x.len())));
        }
        if let Some(v) = x.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("{v} is outside [-1, 1]")));
        }
        let n = self.dim() as f64;
        let (mut sq, mut cos) = (0.0, 0.0);
        for ((xi, s), o) in x.iter().zip(&self.scale).zip(&self.offset) {
            let z = s * (xi - o);
            sq += z * z;
            cos += (C * z).cos();
        }
        Ok(A * (1.0 - (-B * (sq / n).sqrt()).exp()) + (E - (cos / n).exp()))
    }
}

/// Trajectory of a differential-evolution run on `inst` (population 50,
/// 40 generations, more if needed), uniformly subsampled to `n_points`
/// rows without replacement.
pub fn make_source_corpus_ackley(inst: &AckleyInstance, n_points: usize, seed: u64) -> Result<SourceDataset> {
    if n_points == 0 {
        return Err(Error::invalid("source corpus needs at least one point"));
    }
    let space = inst.space();
    let population = 50;
    let generations = 40usize.max(n_points.div_ceil(population).saturating_sub(1));
    let trajectory = de_trajectory(inst, population, generations, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut idx = sample_indices(&mut rng, trajectory.len(), n_points).into_vec();
    idx.sort_unstable();
    let (rows, y) = idx.into_iter().map(|i| trajectory[i].clone()).unzip();
    SourceDataset::new(format!("ackley{}", inst.dim()), space, rows, y)
}

/// Every point the DE engine evaluates, in evaluation order.
pub fn de_trajectory(inst: &AckleyInstance, population: usize, generations: usize, seed: u64) -> Result<Vec<(Vec<f64>, f64)>> {
    let visited = RefCell::new(Vec::new());
    let objective = |rows: &[Vec<f64>]| -> Result<Vec<GaussianPrediction>> {
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            let y = inst.eval(r)?;
            visited.borrow_mut().push((r.clone(), y));
            out.push(GaussianPrediction::new(y, 0.0));
        }
        Ok(out)
    };
    let cfg = AcquisitionConfig {
        kappa: 0.0,
        population,
        generations,
        polish_steps: 0,
        seed,
        ..Default::default()
    };
    optimize_acquisition_with(&objective, &inst.space(), &cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(visited.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook Ackley written independently of the optimized form above.
    fn reference(inst: &AckleyInstance, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for i in 0..x.len() {
            let z = inst.scale[i] * (x[i] - inst.offset[i]);
            s1 += z.powi(2);
            s2 += (2.0 * PI * z).cos();
        }
        -20.0 * (-0.2 * (s1 / d).sqrt()).exp() - (s2 / d).exp() + 20.0 + E
    }

    #[test]
    fn minimum_at_offset_and_prefix_consistency() {
        for seed in 0..20 {
            let inst = AckleyInstance::new(7, seed);
            assert!(inst.eval(&inst.offset).unwrap().abs() < 1e-12);
            assert!(inst.scale.iter().all(|&s| (0.01..2.0).contains(&s)));
            let big = AckleyInstance::new(12, seed);
            assert_eq!(big.scale[..7], inst.scale[..]);
            assert_eq!(big.offset[..7], inst.offset[..]);
        }
    }

    #[test]
    fn matches_reference_and_is_nonnegative() {
        let inst = AckleyInstance::new(5, 42);
        assert!((inst.eval(&[0.0; 5]).unwrap() - reference(&inst, &[0.0; 5])).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let x = inst.space().sample(&mut rng);
            let v = inst.eval(&x).unwrap();
            assert!(v >= 0.0);
            assert!((v - reference(&inst, &x)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_bounds() {
        let inst = AckleyInstance::new(2, 1);
        assert!(inst.eval(&[0.0, 1.5]).is_err());
        assert!(inst.eval(&[0.0]).is_err());
    }

    #[test]
    fn corpus_is_in_bounds_and_deterministic() {
        let inst = AckleyInstance::new(4, 3);
        let a = make_source_corpus_ackley(&inst, 300, 9).unwrap();
        assert_eq!(a.len(), 300);
        assert!(a.rows.iter().all(|r| r.iter().all(|v| (-1.0..=1.0).contains(v))));
        assert_eq!(a.names(), vec!["x1", "x2", "x3", "x4"]);
        assert_eq!(a, make_source_corpus_ackley(&inst, 300, 9).unwrap());

        let traj = de_trajectory(&inst, 50, 40, 9).unwrap();
        let gen_best: Vec<f64> = traj.chunks(50).map(|c| c.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)).collect();
        let mut running = f64::INFINITY;
        let running_best: Vec<f64> = gen_best.iter().map(|&b| { running = running.min(b); running }).collect();
        assert!(running_best.windows(2).all(|w| w[1] <= w[0]));
        assert!(running_best[running_best.len() - 1] < running_best[0]);
    }
}
