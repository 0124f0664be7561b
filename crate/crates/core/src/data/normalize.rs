use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::{ParamKind, ParamSpace, SourceDataset};
use crate::error::{Error, Result};

/// Lower bound for fitted standard deviations.
pub const STD_EPS: f64 = 1e-8;
/// Upper limit on quantile knots.
pub const QUANTILE_KNOTS: usize = 1000;
/// Gaussian outputs of the quantile transform are clamped to `±QUANTILE_CLAMP`.
pub const QUANTILE_CLAMP: f64 = 8.0;

/// Per-task objective shift and scale (population standard deviation).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveStats {
    pub mean: f64,
    pub std: f64,
}

impl ObjectiveStats {
    pub fn fit(y: &[f64]) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::invalid("cannot normalize an empty objective vector"));
        }
        let (mean, std) = mean_std(y);
        let std = if std < STD_EPS {
            log::warn!("constant objective; using std {STD_EPS:e}");
            STD_EPS
        } else {
            std
        };
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn normalize_all(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|&v| self.normalize(v)).collect()
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn denormalize_std(&self, s: f64) -> f64 {
        s * self.std
    }
}

/// Mean and population standard deviation, summed in sorted order so the
/// result does not depend on the order of the inputs.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureScaling {
    #[default]
    Standard,
    Quantile,
}

/// Monotone map applied to one named input column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureTransform {
    Identity,
    Standard { mean: f64, std: f64 },
    /// Empirical CDF through `quantiles -> references`, then the standard
    /// normal quantile function.
    Quantile { quantiles: Vec<f64>, references: Vec<f64> },
    /// Maps `[lo, hi]` onto `[-1, 1]`.
    Affine { lo: f64, hi: f64 },
}

impl FeatureTransform {
    pub fn fit(values: &[f64], scaling: FeatureScaling) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("cannot fit a feature transform on no values"));
        }
        Ok(match scaling {
            FeatureScaling::Standard => {
                let (mean, std) = mean_std(values);
                if std < STD_EPS {
                    log::warn!("constant feature; using std {STD_EPS:e}");
                }
                FeatureTransform::Standard {
                    mean,
                    std: std.max(STD_EPS),
                }
            }
            FeatureScaling::Quantile => {
                let mut sorted = values.to_vec();
                sorted.sort_by(f64::total_cmp);
                let n = sorted.len();
                let k = n.min(QUANTILE_KNOTS);
                let references: Vec<f64> = if k == 1 {
                    vec![0.5]
                } else {
                    (0..k).map(|i| i as f64 / (k - 1) as f64).collect()
                };
                let mut quantiles: Vec<f64> = references
                    .iter()
                    .map(|&r| {
                        let pos = r * (n - 1) as f64;
                        let lo = pos.floor() as usize;
                        let hi = (lo + 1).min(n - 1);
                        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
                    })
                    .collect();
                for i in 1..quantiles.len() {
                    quantiles[i] = quantiles[i].max(quantiles[i - 1]);
                }
                FeatureTransform::Quantile { quantiles, references }
            }
        })
    }

    pub fn apply(&self, v: f64) -> f64 {
        match self {
            FeatureTransform::Identity => v,
            FeatureTransform::Standard { mean, std } => (v - mean) / std,
            FeatureTransform::Affine { lo, hi } => {
                if hi > lo {
                    2.0 * (v - lo) / (hi - lo) - 1.0
                } else {
                    0.0
                }
            }
            FeatureTransform::Quantile { quantiles, references } => {
                let last = quantiles.len() - 1;
                let p = if v <= quantiles[0] && v < quantiles[last] {
                    0.0
                } else if v >= quantiles[last] && v > quantiles[0] {
                    1.0
                } else if quantiles[0] == quantiles[last] {
                    0.5
                } else {
                    // Averaging the forward and reversed interpolation places
                    // tied knots at the middle of their reference range.
                    let fwd = interp(v, quantiles, references);
                    let rq: Vec<f64> = quantiles.iter().rev().map(|q| -q).collect();
                    let rr: Vec<f64> = references.iter().rev().map(|r| -r).collect();
                    0.5 * (fwd - interp(-v, &rq, &rr))
                };
                normal_quantile(p)
            }
        }
    }
}

/// Piecewise-linear interpolation on non-decreasing knots `xp`; at tied
/// knots the last one wins.
fn interp(x: f64, xp: &[f64], fp: &[f64]) -> f64 {
    let j = xp.partition_point(|&q| q <= x);
    if j == 0 {
        return fp[0];
    }
    let j = j - 1;
    if j + 1 >= xp.len() {
        return fp[xp.len() - 1];
    }
    let t = (x - xp[j]) / (xp[j + 1] - xp[j]);
    fp[j] + t * (fp[j + 1] - fp[j])
}

fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return -QUANTILE_CLAMP;
    }
    if p >= 1.0 {
        return QUANTILE_CLAMP;
    }
    let n = Normal::standard();
    n.inverse_cdf(p).clamp(-QUANTILE_CLAMP, QUANTILE_CLAMP)
}

/// Everything needed to map raw inputs and objectives into model units.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizerState {
    pub scaling: FeatureScaling,
    pub features: BTreeMap<String, FeatureTransform>,
    pub objectives: BTreeMap<String, ObjectiveStats>,
}

impl NormalizerState {
    /// Per-column transforms for a target space: the source-fitted map for
    /// known numeric names, the bounds-to-`[-1, 1]` map for unseen numeric
    /// names and the identity for categorical columns.
    pub fn input_transforms(&self, space: &ParamSpace) -> Vec<FeatureTransform> {
        space
            .params()
            .iter()
            .map(|p| match &p.kind {
                ParamKind::Categorical { .. } => FeatureTransform::Identity,
                ParamKind::Numeric { lo, hi, .. } => self
                    .features
                    .get(&p.name)
                    .cloned()
                    .unwrap_or(FeatureTransform::Affine { lo: *lo, hi: *hi }),
            })
            .collect()
    }
}

pub fn transform_row(transforms: &[FeatureTransform], row: &[f64]) -> Vec<f64> {
    row.iter().zip(transforms).map(|(v, t)| t.apply(*v)).collect()
}

/// Rejects a name used as numeric in one source and categorical in another.
pub fn check_kinds(sources: &[SourceDataset]) -> Result<()> {
    let mut kinds: BTreeMap<&str, &'static str> = BTreeMap::new();
    for s in sources {
        for p in s.space.params() {
            let k = if p.is_categorical() { "categorical" } else { "numeric" };
            if let Some(prev) = kinds.insert(&p.name, k) {
                if prev != k {
                    return Err(Error::KindConflict {
                        name: p.name.clone(),
                        first: prev.into(),
                        second: k.into(),
                    });
                }
            }
        }
    }
    Ok(())
}

/// Per-task objective normalization.
pub fn normalize_objectives(sources: &[SourceDataset]) -> Result<(Vec<SourceDataset>, BTreeMap<String, ObjectiveStats>)> {
    let mut stats = BTreeMap::new();
    let mut out = Vec::with_capacity(sources.len());
    for s in sources {
        let st = ObjectiveStats::fit(&s.y)?;
        if stats.insert(s.task_id.clone(), st).is_some() {
            return Err(Error::invalid(format!("duplicate task id `{}`", s.task_id)));
        }
        let mut n = s.clone();
        n.y = st.normalize_all(&s.y);
        out.push(n);
    }
    Ok((out, stats))
}

/// Fits one transform per numeric name on the concatenation of that name's
/// values over all sources, then applies it to every source.
pub fn normalize_features(
    sources: &[SourceDataset],
    scaling: FeatureScaling,
) -> Result<(Vec<SourceDataset>, BTreeMap<String, FeatureTransform>)> {
    check_kinds(sources)?;
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for s in sources {
        for p in s.space.params().iter().filter(|p| !p.is_categorical()) {
            pooled
                .entry(p.name.clone())
                .or_default()
                .extend(s.column(&p.name).expect("column exists"));
        }
    }
    let features = pooled
        .into_iter()
        .map(|(name, vals)| Ok((name, FeatureTransform::fit(&vals, scaling)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let state = NormalizerState {
        scaling,
        features,
        objectives: BTreeMap::new(),
    };
    let out = sources
        .iter()
        .map(|s| {
            let tr = state.input_transforms(&s.space);
            let mut n = s.clone();
            n.rows = s.rows.iter().map(|r| transform_row(&tr, r)).collect();
            for (p, t) in s.space.params().iter().zip(&tr) {
                if let ParamKind::Numeric { lo, hi, .. } = p.kind {
                    n.space.set_bounds(&p.name, t.apply(lo), t.apply(hi))?;
                }
            }
            Ok(n)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, state.features))
}

/// Joint feature normalization followed by per-task objective normalization.
pub fn normalize_sources(sources: &[SourceDataset], scaling: FeatureScaling) -> Result<(Vec<SourceDataset>, NormalizerState)> {
    if sources.is_empty() {
        return Err(Error::invalid("no source datasets"));
    }
    let (feat, features) = normalize_features(sources, scaling)?;
    let (out, objectives) = normalize_objectives(&feat)?;
    Ok((
        out,
        NormalizerState {
            scaling,
            features,
            objectives,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Param;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ds(id: &str, names: &[&str], rows: Vec<Vec<f64>>, y: Vec<f64>) -> SourceDataset {
        let space = ParamSpace::new(names.iter().map(|n| Param::numeric(*n, -100.0, 100.0)).collect()).unwrap();
        SourceDataset::new(id, space, rows, y).unwrap()
    }

    #[test]
    fn objective_normalization_uses_population_std() {
        let st = ObjectiveStats::fit(&[1.0, 3.0]).unwrap();
        assert_eq!(st.normalize_all(&[1.0, 3.0]), vec![-1.0, 1.0]);
        let y = [0.3, 7.0, -2.5, 1e3];
        let st = ObjectiveStats::fit(&y).unwrap();
        for v in y {
            assert!((st.denormalize(st.normalize(v)) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn tasks_are_normalized_independently() {
        let a = ds("a", &["x"], vec![vec![0.0], vec![1.0], vec![2.0]], vec![1.0, 2.0, 6.0]);
        let b = ds("b", &["x"], vec![vec![0.0], vec![1.0], vec![2.0]], vec![100.0, -300.0, 50.0]);
        let (out, stats) = normalize_objectives(&[a, b]).unwrap();
        assert_eq!(stats.len(), 2);
        for s in &out {
            let (m, sd) = mean_std(&s.y);
            assert!(m.abs() < 1e-10);
            assert!((sd - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_objective_uses_epsilon() {
        let st = ObjectiveStats::fit(&[2.0, 2.0]).unwrap();
        assert_eq!(st.std, STD_EPS);
        assert_eq!(st.normalize(2.0), 0.0);
    }

    #[test]
    fn shared_features_fit_on_concatenation() {
        let a = ds("a", &["lr", "u"], vec![vec![1.0, 0.0], vec![2.0, 5.0]], vec![0.0, 1.0]);
        let b = ds("b", &["lr"], vec![vec![6.0], vec![7.0], vec![9.0]], vec![0.0, 1.0, 2.0]);
        let (_, f) = normalize_features(&[a.clone(), b.clone()], FeatureScaling::Standard).unwrap();
        match f["lr"] {
            FeatureTransform::Standard { mean, .. } => assert!((mean - 5.0).abs() < 1e-12),
            _ => panic!(),
        }
        let (_, g) = normalize_features(&[b, a], FeatureScaling::Standard).unwrap();
        assert_eq!(f, g);
    }

    #[test]
    fn quantile_transform_is_monotone_and_centred() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..1001).map(|_| rng.random::<f64>()).collect();
        let t = FeatureTransform::fit(&vals, FeatureScaling::Quantile).unwrap();
        let mut sorted = vals.clone();
        sorted.sort_by(f64::total_cmp);
        assert!(t.apply(sorted[500]).abs() < 0.05);
        let mut probe: Vec<f64> = (0..500).map(|_| rng.random_range(-0.5..1.5)).collect();
        probe.sort_by(f64::total_cmp);
        let out: Vec<f64> = probe.iter().map(|&v| t.apply(v)).collect();
        assert!(out.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(t.apply(-10.0), -QUANTILE_CLAMP);
        assert_eq!(t.apply(10.0), QUANTILE_CLAMP);
    }

    #[test]
    fn quantile_ties_map_to_middle() {
        let t = FeatureTransform::fit(&[0.0, 1.0, 1.0, 1.0, 2.0], FeatureScaling::Quantile).unwrap();
        assert!(t.apply(1.0).abs() < 1e-12);
    }

    #[test]
    fn kind_conflict_is_rejected() {
        let a = ds("a", &["m"], vec![vec![0.0]], vec![0.0]);
        let space = ParamSpace::new(vec![Param::categorical("m", vec!["p".into()])]).unwrap();
        let b = SourceDataset::new("b", space, vec![vec![0.0]], vec![0.0]).unwrap();
        assert!(matches!(
            normalize_features(&[a, b], FeatureScaling::Standard),
            Err(Error::KindConflict { .. })
        ));
    }

    #[test]
    fn target_transforms_reuse_source_fit() {
        let a = ds("a", &["x1"], vec![vec![0.0], vec![4.0]], vec![0.0, 1.0]);
        let (_, state) = normalize_sources(&[a], FeatureScaling::Standard).unwrap();
        let target = ParamSpace::new(vec![Param::numeric("x1", -1.0, 1.0), Param::numeric("x9", 0.0, 10.0)]).unwrap();
        let tr = state.input_transforms(&target);
        assert_eq!(transform_row(&tr, &[2.0, 10.0]), vec![0.0, 1.0]);
        assert_eq!(tr[1].apply(0.0), -1.0);
    }
}
