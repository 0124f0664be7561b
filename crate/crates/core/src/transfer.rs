//! Building a target-task model from a pre-trained one: shared components
//! are copied, embeddings of unseen names are mix-up initialized.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{FeatureTransform, ParamKind, ParamSpace};
use crate::diffmath::Tensor;
use crate::encoder::{CategoricalEmbedding, EmbeddingRegistry, EntryKind, NumericEmbedding};
use crate::error::{Error, Result};
use crate::surrogate::{FtDklModel, Stage};

/// Standard deviation of the noise and of fresh embeddings used when fewer
/// than two source entries are available for mixing.
pub const FALLBACK_STD: f64 = 0.01;

/// How an unseen parameter's embedding was initialized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MixOrigin {
    /// `alpha * first + (1 - alpha) * second`.
    Mixup { first: String, second: String, alpha: f64 },
    /// The only source entry plus Gaussian noise.
    NoisyCopy { from: String },
    Fresh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedName {
    pub name: String,
    pub origin: MixOrigin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub copied_names: Vec<String>,
    pub mixed_names: Vec<MixedName>,
    pub seed: u64,
}

/// `alpha * a + (1 - alpha) * b`.
pub fn mix(a: &Tensor, b: &Tensor, alpha: f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| alpha * x + (1.0 - alpha) * y)
        .collect();
    Tensor::new(a.rows(), a.cols(), data).expect("same shape")
}

fn noisy<R: Rng + ?Sized>(t: &Tensor, rng: &mut R) -> Tensor {
    let n = Normal::new(0.0, FALLBACK_STD).expect("valid std");
    let data = t.data().iter().map(|v| v + n.sample(rng)).collect();
    Tensor::new(t.rows(), t.cols(), data).expect("same shape")
}

/// Mixes pairs drawn from `entries` (name, w, b). The same pair and `alpha`
/// are used for `w` and `b`.
fn mix_pairs<R: Rng + ?Sized>(entries: &[(&String, &Tensor, &Tensor)], d_embed: usize, rng: &mut R) -> (Tensor, Tensor, MixOrigin) {
    match entries.len() {
        0 => (
            Tensor::randn(1, d_embed, FALLBACK_STD, rng),
            Tensor::randn(1, d_embed, FALLBACK_STD, rng),
            MixOrigin::Fresh,
        ),
        1 => {
            let (name, w, b) = entries[0];
            (noisy(w, rng), noisy(b, rng), MixOrigin::NoisyCopy { from: name.clone() })
        }
        n => {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            let alpha: f64 = rng.random();
            let (a, b) = (entries[i], entries[j]);
            (
                mix(a.1, b.1, alpha),
                mix(a.2, b.2, alpha),
                MixOrigin::Mixup {
                    first: a.0.clone(),
                    second: b.0.clone(),
                    alpha,
                },
            )
        }
    }
}

/// New numeric `(w, b)` by mix-up of two distinct numeric entries of
/// `registry`.
pub fn mixup_embedding<R: Rng + ?Sized>(registry: &EmbeddingRegistry, rng: &mut R) -> (Tensor, Tensor, MixOrigin) {
    let entries: Vec<_> = registry.numeric.iter().map(|(k, e)| (k, &e.w, &e.b)).collect();
    mix_pairs(&entries, registry.d_embed(), rng)
}

/// Bias of a new categorical entry by mix-up over categorical biases; the
/// per-label vectors are fresh.
fn mixup_categorical<R: Rng + ?Sized>(
    registry: &EmbeddingRegistry,
    labels: &[String],
    rng: &mut R,
) -> (CategoricalEmbedding, MixOrigin) {
    let entries: Vec<_> = registry.categorical.iter().map(|(k, e)| (k, &e.b, &e.b)).collect();
    let (b, _, origin) = mix_pairs(&entries, registry.d_embed(), rng);
    let values = labels
        .iter()
        .map(|_| Tensor::randn(1, registry.d_embed(), FALLBACK_STD, rng))
        .collect();
    (
        CategoricalEmbedding {
            b,
            labels: labels.to_vec(),
            values,
        },
        origin,
    )
}

/// Copies `source` and adds mix-up initialized embeddings for target names
/// it has not seen. Unseen numeric names get a bounds-to-`[-1, 1]` input
/// transform. The source model is not modified.
pub fn build_target_model(source: &FtDklModel, target: &ParamSpace, seed: u64) -> Result<(FtDklModel, TransferReport)> {
    if target.is_empty() {
        return Err(Error::invalid("target space is empty"));
    }
    if source.stage() != Stage::Elbo {
        return Err(Error::invalid("transfer needs a model with a GP head"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = source.clone();
    let mut copied = Vec::new();
    let mut mixed = Vec::new();
    for p in target.params() {
        let want = match p.kind {
            ParamKind::Numeric { .. } => EntryKind::Numeric,
            ParamKind::Categorical { .. } => EntryKind::Categorical,
        };
        match source.registry.kind(&p.name) {
            Some(k) if k == want => {
                copied.push(p.name.clone());
                continue;
            }
            Some(k) => {
                return Err(Error::KindConflict {
                    name: p.name.clone(),
                    first: k.as_str(),
                    second: want.as_str(),
                })
            }
            None => {}
        }
        let origin = match &p.kind {
            ParamKind::Numeric { lo, hi, .. } => {
                let (w, b, origin) = mixup_embedding(&source.registry, &mut rng);
                model.registry.numeric.insert(p.name.clone(), NumericEmbedding { w, b });
                model
                    .normalizer
                    .features
                    .insert(p.name.clone(), FeatureTransform::Affine { lo: *lo, hi: *hi });
                origin
            }
            ParamKind::Categorical { choices } => {
                let (entry, origin) = mixup_categorical(&source.registry, choices, &mut rng);
                model.registry.categorical.insert(p.name.clone(), entry);
                origin
            }
        };
        mixed.push(MixedName {
            name: p.name.clone(),
            origin,
        });
    }
    Ok((
        model,
        TransferReport {
            copied_names: copied,
            mixed_names: mixed,
            seed,
        },
    ))
}
