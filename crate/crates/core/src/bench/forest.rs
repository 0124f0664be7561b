use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bo::{FitDiagnostics, Surrogate};
use crate::error::{Error, Result};
use crate::gp::GaussianPrediction;

enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    fn predict(&self, x: &[f64]) -> f64 {
        match self {
            Node::Leaf(v) => *v,
            Node::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

/// Fully grown CART regression tree on the rows `idx`, splitting on the
/// squared-error reduction over all features.
fn grow(rows: &[Vec<f64>], y: &[f64], idx: &mut [usize]) -> Node {
    let n = idx.len() as f64;
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n;
    if idx.len() < 2 || idx.iter().all(|&i| y[i] == y[idx[0]]) {
        return Node::Leaf(mean);
    }
    let total: f64 = idx.iter().map(|&i| y[i]).sum();
    let mut best: Option<(f64, usize, f64)> = None;
    for f in 0..rows[idx[0]].len() {
        idx.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]));
        let mut left_sum = 0.0;
        for k in 1..idx.len() {
            left_sum += y[idx[k - 1]];
            let (lo, hi) = (rows[idx[k - 1]][f], rows[idx[k]][f]);
            if lo == hi {
                continue;
            }
            let (nl, nr) = (k as f64, n - k as f64);
            let right_sum = total - left_sum;
            // maximizing this is minimizing the within-child squared error
            let gain = left_sum * left_sum / nl + right_sum * right_sum / nr;
            if best.is_none_or(|b| gain > b.0) {
                best = Some((gain, f, 0.5 * (lo + hi)));
            }
        }
    }
    let Some((_, feature, threshold)) = best else {
        return Node::Leaf(mean);
    };
    let mut left: Vec<usize> = idx.iter().copied().filter(|&i| rows[i][feature] <= threshold).collect();
    let mut right: Vec<usize> = idx.iter().copied().filter(|&i| rows[i][feature] > threshold).collect();
    Node::Split {
        feature,
        threshold,
        left: Box::new(grow(rows, y, &mut left)),
        right: Box::new(grow(rows, y, &mut right)),
    }
}

/// Bagged CART regressors. The predictive standard deviation is the spread
/// of the individual tree predictions.
pub struct RandomForest {
    trees: Vec<Node>,
}

impl RandomForest {
    pub fn fit<R: Rng + ?Sized>(rows: &[Vec<f64>], y: &[f64], n_trees: usize, rng: &mut R) -> Result<Self> {
        if rows.is_empty() || rows.len() != y.len() || n_trees == 0 {
            return Err(Error::invalid("random forest needs matching, non-empty rows and targets"));
        }
        let n = rows.len();
        let trees = (0..n_trees)
            .map(|_| {
                let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                grow(rows, y, &mut idx)
            })
            .collect();
        Ok(Self { trees })
    }

    pub fn predict(&self, x: &[f64]) -> GaussianPrediction {
        let p: Vec<f64> = self.trees.iter().map(|t| t.predict(x)).collect();
        let k = p.len() as f64;
        let mean = p.iter().sum::<f64>() / k;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k;
        GaussianPrediction::new(mean, var.sqrt())
    }
}

pub const FOREST_TREES: usize = 100;

/// Random-forest surrogate for the BO loop; refit from scratch each time.
pub struct ForestSurrogate {
    forest: Option<RandomForest>,
    rng: ChaCha8Rng,
}

impl ForestSurrogate {
    pub fn new(seed: u64) -> Self {
        Self {
            forest: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Surrogate for ForestSurrogate {
    fn label(&self) -> String {
        "rf".into()
    }

    fn fit(&mut self, rows: &[Vec<f64>], y: &[f64]) -> Result<FitDiagnostics> {
        self.forest = Some(RandomForest::fit(rows, y, FOREST_TREES, &mut self.rng)?);
        Ok(FitDiagnostics::default().with("trees", FOREST_TREES as f64))
    }

    fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<GaussianPrediction>> {
        let f = self.forest.as_ref().ok_or_else(|| Error::invalid("forest used before fitting"))?;
        Ok(rows.iter().map(|r| f.predict(r)).collect())
    }
}
