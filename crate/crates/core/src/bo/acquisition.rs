use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::ParamSpace;
use crate::error::{Error, Result};
use crate::gp::GaussianPrediction;

/// Lower confidence bound `mean - kappa * std` (smaller is better).
pub fn lcb(pred: GaussianPrediction, kappa: f64) -> f64 {
    pred.mean - kappa * pred.std
}

/// LCB weight and differential-evolution settings for the inner search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionConfig {
    pub kappa: f64,
    pub population: usize,
    pub generations: usize,
    /// Mutation scale `F` in `a + F (b - c)`.
    pub differential_weight: f64,
    /// Per-coordinate crossover probability.
    pub crossover: f64,
    /// Random perturbations of the DE winner, with geometrically shrinking
    /// radius.
    pub polish_steps: usize,
    pub seed: u64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        Self {
            kappa: 3.0,
            population: 50,
            generations: 100,
            differential_weight: 0.8,
            crossover: 0.9,
            polish_steps: 200,
            seed: 0,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::invalid(format!("kappa must be finite and >= 0, got {}", self.kappa)));
        }
        if self.population < 4 {
            return Err(Error::invalid("DE population must be at least 4"));
        }
        if !(self.differential_weight > 0.0 && self.differential_weight <= 2.0) {
            return Err(Error::invalid("differential weight must lie in (0, 2]"));
        }
        if !(0.0..=1.0).contains(&self.crossover) {
            return Err(Error::invalid("crossover probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Polish candidates evaluated together per radius.
const POLISH_BATCH: usize = 10;
/// Polish radius relative to each variable's range, first and last round.
const POLISH_RADIUS: (f64, f64) = (0.1, 0.001);

/// Best point found and its acquisition value.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub x: Vec<f64>,
    pub value: f64,
}

fn score<F>(predict: &F, rows: &[Vec<f64>], kappa: f64) -> Result<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<GaussianPrediction>> + ?Sized,
{
    let preds = predict(rows)?;
    if preds.len() != rows.len() {
        return Err(Error::shape("acquisition", format!("{} predictions for {} rows", preds.len(), rows.len())));
    }
    Ok(preds
        .into_iter()
        .map(|p| {
            let v = lcb(p, kappa);
            if v.is_nan() {
                f64::INFINITY
            } else {
                v
            }
        })
        .collect())
}

/// Minimizes the LCB of `predict` over `space` by DE rand/1/bin followed by
/// a local polish. Every evaluated point is projected onto the bounds and
/// the integer/categorical grid.
pub fn optimize_acquisition_with<F, R>(predict: &F, space: &ParamSpace, cfg: &AcquisitionConfig, rng: &mut R) -> Result<Proposal>
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<GaussianPrediction>> + ?Sized,
    R: Rng + ?Sized,
{
    cfg.validate()?;
    if space.is_empty() {
        return Err(Error::invalid("cannot optimize over an empty space"));
    }
    let np = cfg.population;
    let dim = space.len();
    let mut pop: Vec<Vec<f64>> = (0..np).map(|_| space.sample(rng)).collect();
    let mut fit = score(predict, &pop, cfg.kappa)?;

    for _ in 0..cfg.generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let mut pick = || loop {
                    let j = rng.random_range(0..np);
                    if j != i {
                        break j;
                    }
                };
                let a = pick();
                let b = loop {
                    let j = pick();
                    if j != a {
                        break j;
                    }
                };
                let c = loop {
                    let j = pick();
                    if j != a && j != b {
                        break j;
                    }
                };
                let forced = rng.random_range(0..dim);
                let mut t: Vec<f64> = (0..dim)
                    .map(|d| {
                        if d == forced || rng.random::<f64>() < cfg.crossover {
                            pop[a][d] + cfg.differential_weight * (pop[b][d] - pop[c][d])
                        } else {
                            pop[i][d]
                        }
                    })
                    .collect();
                space.project(&mut t);
                t
            })
            .collect();
        let tf = score(predict, &trials, cfg.kappa)?;
        for (i, (t, v)) in trials.into_iter().zip(tf).enumerate() {
            if v <= fit[i] {
                pop[i] = t;
                fit[i] = v;
            }
        }
    }

    let best = (0..np).fold(0, |b, i| if fit[i] < fit[b] { i } else { b });
    let mut x = pop.swap_remove(best);
    let mut value = fit[best];

    let rounds = cfg.polish_steps.div_ceil(POLISH_BATCH);
    let ranges: Vec<f64> = space.bounds().iter().map(|(lo, hi)| hi - lo).collect();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for r in 0..rounds {
        let t = if rounds > 1 { r as f64 / (rounds - 1) as f64 } else { 0.0 };
        let radius = POLISH_RADIUS.0 * (POLISH_RADIUS.1 / POLISH_RADIUS.0).powf(t);
        let batch = POLISH_BATCH.min(cfg.polish_steps - r * POLISH_BATCH);
        let cands: Vec<Vec<f64>> = (0..batch)
            .map(|_| {
                let mut c: Vec<f64> = x
                    .iter()
                    .zip(&ranges)
                    .map(|(v, w)| v + radius * w * std_normal.sample(rng))
                    .collect();
                space.project(&mut c);
                c
            })
            .collect();
        let cf = score(predict, &cands, cfg.kappa)?;
        if let Some((i, &v)) = cf.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
            if v < value {
                value = v;
                x = cands[i].clone();
            }
        }
    }
    Ok(Proposal { x, value })
}

/// [`optimize_acquisition_with`] seeded from `cfg.seed`.
pub fn optimize_acquisition<F>(predict: &F, space: &ParamSpace, cfg: &AcquisitionConfig) -> Result<Proposal>
where
    F: Fn(&[Vec<f64>]) -> Result<Vec<GaussianPrediction>> + ?Sized,
{
    optimize_acquisition_with(predict, space, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Param;

    fn quadratic(c: [f64; 2]) -> impl Fn(&[Vec<f64>]) -> Result<Vec<GaussianPrediction>> {
        move |rows: &[Vec<f64>]| {
            Ok(rows
                .iter()
                .map(|r| GaussianPrediction::new((r[0] - c[0]).powi(2) + (r[1] - c[1]).powi(2), 0.0))
                .collect())
        }
    }

    #[test]
    fn lcb_values() {
        assert_eq!(lcb(GaussianPrediction::new(0.0, 1.0), 3.0), -3.0);
        assert_eq!(lcb(GaussianPrediction::new(1.5, 0.0), 3.0), 1.5);
    }

    #[test]
    fn finds_quadratic_minimum() {
        let space = ParamSpace::uniform_box("x", 2, -1.0, 1.0).unwrap();
        let c = [0.3, -0.55];
        let p = optimize_acquisition(&quadratic(c), &space, &AcquisitionConfig::default()).unwrap();
        let dist = ((p.x[0] - c[0]).powi(2) + (p.x[1] - c[1]).powi(2)).sqrt();
        assert!(dist < 0.05, "{:?}", p.x);
    }

    #[test]
    fn constant_predictor_stays_in_bounds_and_is_deterministic() {
        let space = ParamSpace::new(vec![
            Param::numeric("a", -2.0, 5.0),
            Param::integer("n", 1.0, 4.0),
            Param::categorical("c", vec!["u".into(), "v".into()]),
        ])
        .unwrap();
        let flat = |rows: &[Vec<f64>]| Ok(vec![GaussianPrediction::new(1.0, 0.5); rows.len()]);
        let cfg = AcquisitionConfig {
            seed: 11,
            ..Default::default()
        };
        let p = optimize_acquisition(&flat, &space, &cfg).unwrap();
        assert!(space.contains(&p.x));
        assert_eq!(p, optimize_acquisition(&flat, &space, &cfg).unwrap());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let space = ParamSpace::uniform_box("x", 1, 0.0, 1.0).unwrap();
        let cfg = AcquisitionConfig {
            population: 3,
            ..Default::default()
        };
        assert!(optimize_acquisition(&quadratic([0.0, 0.0]), &space, &cfg).is_err());
        let empty = ParamSpace::new(vec![]).unwrap();
        assert!(optimize_acquisition(&quadratic([0.0, 0.0]), &empty, &AcquisitionConfig::default()).is_err());
    }
}
