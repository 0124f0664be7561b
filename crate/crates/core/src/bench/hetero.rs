use std::f64::consts::PI;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ParamSpace, SourceDataset};
use crate::error::{Error, Result};

/// Names shared across the task family.
pub const NAME_POOL: usize = 8;
const SOURCE_DIMS: [usize; 6] = [2, 3, 4, 5, 6, 4];
const TARGET_DIM: usize = 4;
/// Per-task jitter of the shared per-name optimum.
const CENTER_JITTER: f64 = 0.05;
const RIPPLE: f64 = 0.05;

/// Separable task: each named variable contributes a weighted bowl with a
/// small ripple, centered near a per-name location shared by all tasks.
/// The minimum is 0 at `center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroTask {
    pub id: String,
    pub names: Vec<String>,
    pub center: Vec<f64>,
    pub weight: Vec<f64>,
}

impl HeteroTask {
    pub fn space(&self) -> ParamSpace {
        ParamSpace::new(
            self.names
                .iter()
                .map(|n| crate::data::Param::numeric(n.clone(), -1.0, 1.0))
                .collect(),
        )
        .expect("distinct names")
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.names.len() {
            return Err(Error::invalid(format!("expected {} values, got {}", self.names.len(), x.len())));
        }
        Ok(x.iter()
            .zip(&self.center)
            .zip(&self.weight)
            .map(|((v, c), w)| {
                let d = v - c;
                w * (d * d + RIPPLE * (1.0 - (4.0 * PI * d).cos()))
            })
            .sum())
    }

    /// `n` uniformly random rows with their objective values.
    pub fn dataset<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SourceDataset> {
        let space = self.space();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| space.sample(rng)).collect();
        let y = rows.iter().map(|r| self.eval(r)).collect::<Result<_>>()?;
        SourceDataset::new(self.id.clone(), space, rows, y)
    }
}

/// Six source tasks of dimension 2 to 6 and one 4-dimensional target, all
/// drawing their variables from a common pool of named parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroBenchmark {
    pub sources: Vec<HeteroTask>,
    pub target: HeteroTask,
}

impl HeteroBenchmark {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<f64> = (0..NAME_POOL).map(|_| rng.random_range(-0.6..0.6)).collect();
        let weights: Vec<f64> = (0..NAME_POOL).map(|_| rng.random_range(0.5..2.0)).collect();
        let jitter = Normal::new(0.0, CENTER_JITTER).expect("valid std");
        let task = |id: String, dim: usize, rng: &mut ChaCha8Rng| {
            let mut pick = sample_indices(rng, NAME_POOL, dim).into_vec();
            pick.sort_unstable();
            HeteroTask {
                id,
                names: pick.iter().map(|i| format!("h{}", i + 1)).collect(),
                center: pick.iter().map(|&i| (centers[i] + jitter.sample(rng)).clamp(-0.9, 0.9)).collect(),
                weight: pick.iter().map(|&i| weights[i]).collect(),
            }
        };
        let sources = SOURCE_DIMS
            .iter()
            .enumerate()
            .map(|(k, &d)| task(format!("source{}", k + 1), d, &mut rng))
            .collect();
        let target = task("target".into(), TARGET_DIM, &mut rng);
        Self { sources, target }
    }

    pub fn source_datasets(&self, rows: usize, seed: u64) -> Result<Vec<SourceDataset>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sources.iter().map(|t| t.dataset(rows, &mut rng)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn family_shape() {
        let b = HeteroBenchmark::new(1);
        let dims: Vec<usize> = b.sources.iter().map(|t| t.names.len()).collect();
        assert_eq!(dims, SOURCE_DIMS);
        assert_eq!(b.target.eval(&b.target.center).unwrap(), 0.0);
        let shared = b
            .target
            .names
            .iter()
            .filter(|n| b.sources.iter().any(|s| s.names.contains(n)))
            .count();
        assert!(shared >= 3);
        let data = b.source_datasets(500, 0).unwrap();
        assert!(data.iter().all(|d| d.len() == 500 && d.y.iter().all(|&v| v >= 0.0)));
        assert_eq!(b, HeteroBenchmark::new(1));
    }
}
