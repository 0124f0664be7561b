use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `(w, b)` pair of a numeric parameter; its token is `x * w + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericEmbedding {
    pub w: Tensor,
    pub b: Tensor,
}

/// Column vector `b` plus one value vector per category label; the token for
/// label `v` is `w_v + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoricalEmbedding {
    pub b: Tensor,
    pub labels: Vec<String>,
    pub values: Vec<Tensor>,
}

impl CategoricalEmbedding {
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Per-parameter-name token embeddings plus the shared `[CLS]` vector. This
/// is the part of a model that is keyed by parameter identity and therefore
/// the unit of transfer between tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRegistry {
    d_embed: usize,
    pub cls: Tensor,
    pub numeric: BTreeMap<String, NumericEmbedding>,
    pub categorical: BTreeMap<String, CategoricalEmbedding>,
}

/// Kind of a registry entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Numeric,
    Categorical,
}

impl EntryKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntryKind::Numeric => "numeric",
            EntryKind::Categorical => "categorical",
        }
    }
}

pub(crate) fn init_std(d_embed: usize) -> f64 {
    1.0 / (d_embed as f64).sqrt()
}

impl EmbeddingRegistry {
    pub fn new<R: Rng + ?Sized>(d_embed: usize, rng: &mut R) -> Self {
        Self {
            d_embed,
            cls: Tensor::randn(1, d_embed, init_std(d_embed), rng),
            numeric: BTreeMap::new(),
            categorical: BTreeMap::new(),
        }
    }

    pub fn d_embed(&self) -> usize {
        self.d_embed
    }

    pub fn kind(&self, name: &str) -> Option<EntryKind> {
        if self.numeric.contains_key(name) {
            Some(EntryKind::Numeric)
        } else if self.categorical.contains_key(name) {
            Some(EntryKind::Categorical)
        } else {
            None
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.kind(name).is_some()
    }

    pub fn names(&self) -> Vec<String> {
        self.numeric.keys().chain(self.categorical.keys()).cloned().collect()
    }

    /// Adds a freshly initialized numeric entry unless the name exists.
    pub fn add_numeric<R: Rng + ?Sized>(&mut self, name: &str, rng: &mut R) -> Result<()> {
        match self.kind(name) {
            Some(EntryKind::Numeric) => Ok(()),
            Some(EntryKind::Categorical) => Err(Error::KindConflict {
                name: name.into(),
                first: "categorical",
                second: "numeric",
            }),
            None => {
                let std = init_std(self.d_embed);
                let entry = NumericEmbedding {
                    w: Tensor::randn(1, self.d_embed, std, rng),
                    b: Tensor::randn(1, self.d_embed, std, rng),
                };
                self.numeric.insert(name.into(), entry);
                Ok(())
            }
        }
    }

    /// Adds a categorical entry, or extends an existing one with new labels.
    pub fn add_categorical<R: Rng + ?Sized>(&mut self, name: &str, labels: &[String], rng: &mut R) -> Result<()> {
        let std = init_std(self.d_embed);
        let d = self.d_embed;
        match self.kind(name) {
            Some(EntryKind::Numeric) => Err(Error::KindConflict {
                name: name.into(),
                first: "numeric",
                second: "categorical",
            }),
            Some(EntryKind::Categorical) => {
                let entry = self.categorical.get_mut(name).expect("present");
                for l in labels {
                    if entry.index_of(l).is_none() {
                        entry.labels.push(l.clone());
                        entry.values.push(Tensor::randn(1, d, std, rng));
                    }
                }
                Ok(())
            }
            None => {
                let entry = CategoricalEmbedding {
                    b: Tensor::randn(1, d, std, rng),
                    labels: labels.to_vec(),
                    values: labels.iter().map(|_| Tensor::randn(1, d, std, rng)).collect(),
                };
                self.categorical.insert(name.into(), entry);
                Ok(())
            }
        }
    }

    /// Token matrix (`(d + 1) x d_e`) of a single named row. Categorical
    /// values are given as label indices.
    pub fn tokenize(&self, row: &[(String, f64)]) -> Result<Tensor> {
        let names: Vec<String> = row.iter().map(|(n, _)| n.clone()).collect();
        let values: Vec<f64> = row.iter().map(|(_, v)| *v).collect();
        let batch = TokenBatch::new(names, vec![values])?;
        let mut g = Graph::new();
        let vars = self.register(&mut g, false);
        let tokens = self.tokens_in(&mut g, &vars, &batch)?;
        Ok(g.value(tokens).clone())
    }

    /// Places every tensor on the graph. Order matches [`Self::tensors_mut`].
    pub fn register(&self, g: &mut Graph, trainable: bool) -> RegistryVars {
        let leaves: Vec<Var> = self
            .tensors()
            .into_iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect();
        RegistryVars::from_leaves(self, &leaves).expect("one leaf per tensor")
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.cls];
        for e in self.numeric.values() {
            out.push(&e.w);
            out.push(&e.b);
        }
        for e in self.categorical.values() {
            out.push(&e.b);
            out.extend(e.values.iter());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.cls];
        for e in self.numeric.values_mut() {
            out.push(&mut e.w);
            out.push(&mut e.b);
        }
        for e in self.categorical.values_mut() {
            out.push(&mut e.b);
            out.extend(e.values.iter_mut());
        }
        out
    }

    /// Builds the token matrix `(batch * (d + 1)) x d_e` on the graph.
    pub fn tokens_in(&self, g: &mut Graph, vars: &RegistryVars, batch: &TokenBatch) -> Result<Var> {
        let d = batch.names.len();
        let n = batch.values.len();
        let mut w_parts = Vec::new();
        let mut b_parts = Vec::with_capacity(d);
        // column j -> offset of its first weight row, and whether categorical
        let mut offsets = Vec::with_capacity(d);
        for name in &batch.names {
            if let Some(&(w, b)) = vars.numeric.get(name) {
                offsets.push((w_parts.len(), None));
                w_parts.push(w);
                b_parts.push(b);
            } else if let Some((b, vals)) = vars.categorical.get(name) {
                offsets.push((w_parts.len(), Some(vals.len())));
                w_parts.extend(vals.iter().copied());
                b_parts.push(*b);
            } else {
                return Err(Error::UnknownParameter(name.clone()));
            }
        }
        let mut coef = Tensor::zeros(n, d);
        let mut widx = Vec::with_capacity(n * d);
        for (r, row) in batch.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                if v.is_nan() {
                    return Err(Error::invalid(format!("NaN value for `{}`", batch.names[j])));
                }
                match offsets[j] {
                    (off, None) => {
                        coef.set(r, j, v);
                        widx.push(off);
                    }
                    (off, Some(count)) => {
                        let k = v.round();
                        if k < 0.0 || k as usize >= count || (v - k).abs() > 1e-9 {
                            return Err(Error::invalid(format!(
                                "category index {v} out of range for `{}`",
                                batch.names[j]
                            )));
                        }
                        coef.set(r, j, 1.0);
                        widx.push(off + k as usize);
                    }
                }
            }
        }
        if d == 0 {
            // CLS-only sequences: tokenize with an empty feature table.
            let e = self.d_embed;
            let w = g.constant(Tensor::zeros(1, e));
            let b = g.constant(Tensor::zeros(0, e));
            return Ok(g.tokenize(coef, widx, w, b, vars.cls));
        }
        let w = g.concat_rows(&w_parts);
        let b = g.concat_rows(&b_parts);
        Ok(g.tokenize(coef, widx, w, b, vars.cls))
    }
}

/// Graph handles of a registered [`EmbeddingRegistry`].
pub struct RegistryVars {
    pub cls: Var,
    pub numeric: BTreeMap<String, (Var, Var)>,
    pub categorical: BTreeMap<String, (Var, Vec<Var>)>,
}

impl RegistryVars {
    /// Groups leaves given in [`EmbeddingRegistry::tensors`] order.
    pub fn from_leaves(registry: &EmbeddingRegistry, leaves: &[Var]) -> Result<Self> {
        let expected = 1 + 2 * registry.numeric.len()
            + registry.categorical.values().map(|e| 1 + e.values.len()).sum::<usize>();
        if leaves.len() != expected {
            return Err(Error::shape(
                "RegistryVars",
                format!("{} leaves for {expected} tensors", leaves.len()),
            ));
        }
        let mut it = leaves.iter().copied();
        let mut next = || it.next().expect("counted");
        let cls = next();
        let numeric = registry.numeric.keys().map(|k| (k.clone(), (next(), next()))).collect();
        let categorical = registry
            .categorical
            .iter()
            .map(|(k, e)| {
                let b = next();
                (k.clone(), (b, (0..e.values.len()).map(|_| next()).collect()))
            })
            .collect();
        Ok(Self {
            cls,
            numeric,
            categorical,
        })
    }

    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.cls];
        for (w, b) in self.numeric.values() {
            out.push(*w);
            out.push(*b);
        }
        for (b, vals) in self.categorical.values() {
            out.push(*b);
            out.extend(vals.iter().copied());
        }
        out
    }
}

/// Rows that share one ordered set of parameter names. Categorical entries
/// hold label indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl TokenBatch {
    pub fn new(names: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.iter().any(|r| r.len() != names.len()) {
            return Err(Error::shape("TokenBatch", "row length differs from name count"));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::invalid("duplicate parameter name in batch"));
        }
        Ok(Self { names, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> TokenBatch {
        TokenBatch {
            names: self.names.clone(),
            values: idx.iter().map(|&i| self.values[i].clone()).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn registry() -> EmbeddingRegistry {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = EmbeddingRegistry::new(4, &mut rng);
        for n in ["x1", "x2", "x3", "x4"] {
            r.add_numeric(n, &mut rng).unwrap();
        }
        r.add_categorical("algo", &["svm".into(), "rf".into()], &mut rng).unwrap();
        r
    }

    #[test]
    fn zero_value_gives_bias_row() {
        let r = registry();
        let t = r.tokenize(&[("x1".into(), 0.0)]).unwrap();
        assert_eq!(t.shape(), (2, 4));
        assert_eq!(t.row_slice(0), r.cls.data());
        assert_eq!(t.row_slice(1), r.numeric["x1"].b.data());
    }

    #[test]
    fn unit_value_gives_w_plus_b() {
        let r = registry();
        let t = r.tokenize(&[("x1".into(), 1.0)]).unwrap();
        let e = &r.numeric["x1"];
        for k in 0..4 {
            assert_eq!(t.get(1, k), e.w.get(0, k) + e.b.get(0, k));
        }
    }

    #[test]
    fn shared_name_emits_identical_token_across_tasks() {
        let r = registry();
        let t1 = r.tokenize(&[("x1".into(), 0.3), ("x2".into(), -0.7)]).unwrap();
        let t2 = r
            .tokenize(&[("x2".into(), -0.7), ("x3".into(), 1.1), ("x4".into(), 2.0)])
            .unwrap();
        assert_eq!(t1.row_slice(2), t2.row_slice(1));
    }

    #[test]
    fn categorical_token_is_value_plus_column_vector() {
        let r = registry();
        let t = r.tokenize(&[("algo".into(), 1.0)]).unwrap();
        let e = &r.categorical["algo"];
        for k in 0..4 {
            assert_eq!(t.get(1, k), e.values[1].get(0, k) + e.b.get(0, k));
        }
        assert!(r.tokenize(&[("algo".into(), 2.0)]).is_err());
    }

    #[test]
    fn unknown_name_and_nan_rejected() {
        let r = registry();
        assert!(matches!(
            r.tokenize(&[("nope".into(), 1.0)]),
            Err(Error::UnknownParameter(_))
        ));
        assert!(r.tokenize(&[("x1".into(), f64::NAN)]).is_err());
    }

    #[test]
    fn kind_conflict_detected() {
        let mut r = registry();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            r.add_categorical("x1", &["a".into()], &mut rng),
            Err(Error::KindConflict { .. })
        ));
        assert!(r.add_numeric("algo", &mut rng).is_err());
    }

    #[test]
    fn serde_round_trip_is_lossless() {
        let r = registry();
        let s = serde_json::to_string(&r).unwrap();
        let back: EmbeddingRegistry = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}
