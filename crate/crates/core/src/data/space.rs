use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Domain of one named variable. Categorical values are carried as label
/// indices `0..choices.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ParamKind {
    Numeric {
        lo: f64,
        hi: f64,
        #[serde(default)]
        integer: bool,
    },
    Categorical {
        choices: Vec<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    #[serde(flatten)]
    pub kind: ParamKind,
}

impl Param {
    pub fn numeric(name: impl Into<String>, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Numeric { lo, hi, integer: false },
        }
    }

    pub fn integer(name: impl Into<String>, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Numeric { lo, hi, integer: true },
        }
    }

    pub fn categorical(name: impl Into<String>, choices: Vec<String>) -> Self {
        Self {
            name: name.into(),
            kind: ParamKind::Categorical { choices },
        }
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, ParamKind::Categorical { .. })
    }

    /// Box bounds of the encoded value.
    pub fn bounds(&self) -> (f64, f64) {
        match &self.kind {
            ParamKind::Numeric { lo, hi, .. } => (*lo, *hi),
            ParamKind::Categorical { choices } => (0.0, (choices.len() - 1) as f64),
        }
    }

    /// Clips to the bounds and snaps integer and categorical values to
    /// their grid.
    pub fn project(&self, v: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let v = if v.is_nan() { lo } else { v.clamp(lo, hi) };
        match &self.kind {
            ParamKind::Numeric { integer: false, .. } => v,
            _ => v.round().clamp(lo.ceil(), hi.floor()),
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        let (lo, hi) = self.bounds();
        v >= lo && v <= hi && (self.project(v) == v)
    }
}

/// Ordered set of named variables. A variable's identity is its name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Param>", into = "Vec<Param>")]
pub struct ParamSpace {
    params: Vec<Param>,
}

impl TryFrom<Vec<Param>> for ParamSpace {
    type Error = Error;

    fn try_from(params: Vec<Param>) -> Result<Self> {
        Self::new(params)
    }
}

impl From<ParamSpace> for Vec<Param> {
    fn from(s: ParamSpace) -> Self {
        s.params
    }
}

impl ParamSpace {
    pub fn new(params: Vec<Param>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &params {
            if p.name.is_empty() || p.name == "y" {
                return Err(Error::invalid(format!("invalid parameter name `{}`", p.name)));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(Error::invalid(format!("duplicate parameter `{}`", p.name)));
            }
            match &p.kind {
                ParamKind::Numeric { lo, hi, integer } => {
                    if !lo.is_finite() || !hi.is_finite() || lo > hi {
                        return Err(Error::invalid(format!("bad bounds [{lo}, {hi}] for `{}`", p.name)));
                    }
                    if *integer && lo.ceil() > hi.floor() {
                        return Err(Error::invalid(format!("no integer in the bounds of `{}`", p.name)));
                    }
                }
                ParamKind::Categorical { choices } => {
                    if choices.is_empty() {
                        return Err(Error::invalid(format!("categorical `{}` has no choices", p.name)));
                    }
                }
            }
        }
        Ok(Self { params })
    }

    /// `prefix1 .. prefix{dim}` on a common box.
    pub fn uniform_box(prefix: &str, dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new((1..=dim).map(|i| Param::numeric(format!("{prefix}{i}"), lo, hi)).collect())
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn bounds(&self) -> Vec<(f64, f64)> {
        self.params.iter().map(Param::bounds).collect()
    }

    /// Replaces the bounds of a numeric variable.
    pub fn set_bounds(&mut self, name: &str, lo: f64, hi: f64) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::UnknownParameter(name.into()))?;
        match &mut p.kind {
            ParamKind::Numeric { lo: l, hi: h, .. } if lo <= hi => {
                *l = lo;
                *h = hi;
                Ok(())
            }
            _ => Err(Error::invalid(format!("cannot set bounds [{lo}, {hi}] on `{name}`"))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.params
            .iter()
            .map(|p| {
                let (lo, hi) = p.bounds();
                let v = match &p.kind {
                    ParamKind::Categorical { choices } => rng.random_range(0..choices.len()) as f64,
                    ParamKind::Numeric { integer: true, .. } => {
                        rng.random_range(lo.ceil() as i64..=hi.floor() as i64) as f64
                    }
                    ParamKind::Numeric { .. } if lo == hi => lo,
                    ParamKind::Numeric { .. } => rng.random_range(lo..hi),
                };
                p.project(v)
            })
            .collect()
    }

    pub fn project(&self, x: &mut [f64]) {
        for (v, p) in x.iter_mut().zip(&self.params) {
            *v = p.project(*v);
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.params.len() && x.iter().zip(&self.params).all(|(v, p)| p.contains(*v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space() -> ParamSpace {
        ParamSpace::new(vec![
            Param::numeric("lr", -3.0, 0.0),
            Param::integer("depth", 1.0, 8.0),
            Param::categorical("algo", vec!["svm".into(), "rf".into(), "knn".into()]),
        ])
        .unwrap()
    }

    #[test]
    fn samples_are_in_bounds_and_on_grid() {
        let s = space();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let x = s.sample(&mut rng);
            assert!(s.contains(&x), "{x:?}");
        }
    }

    #[test]
    fn projection_snaps_and_clips() {
        let s = space();
        let mut x = vec![2.0, 3.6, -1.0];
        s.project(&mut x);
        assert_eq!(x, vec![0.0, 4.0, 0.0]);
        let mut x = vec![f64::NAN, 100.0, 2.7];
        s.project(&mut x);
        assert_eq!(x, vec![-3.0, 8.0, 2.0]);
    }

    #[test]
    fn rejects_duplicates_and_bad_bounds() {
        assert!(ParamSpace::new(vec![Param::numeric("a", 0.0, 1.0), Param::numeric("a", 0.0, 1.0)]).is_err());
        assert!(ParamSpace::new(vec![Param::numeric("a", 1.0, 0.0)]).is_err());
        assert!(ParamSpace::new(vec![Param::numeric("y", 0.0, 1.0)]).is_err());
        assert!(ParamSpace::new(vec![Param::categorical("c", vec![])]).is_err());
    }

    #[test]
    fn fixed_dimension_samples_its_value() {
        let mut s = ParamSpace::uniform_box("x", 2, -1.0, 1.0).unwrap();
        s.set_bounds("x1", 0.25, 0.25).unwrap();
        let x = s.sample(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(x[0], 0.25);
    }

    #[test]
    fn serde_round_trip() {
        let s = space();
        let json = serde_json::to_string(&s).unwrap();
        let back: ParamSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
