use serde::{Deserialize, Serialize};

use crate::data::{transform_row, FeatureTransform, NormalizerState, ParamKind, ParamSpace};
use crate::diffmath::Tensor;
use crate::encoder::{EmbeddingRegistry, EncoderParams, TokenBatch};
use crate::error::{Error, Result};
use crate::gp::{GaussianPrediction, KernelParams, SvgpPredictor, SvgpState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Mse,
    Elbo,
}

/// Output layer on top of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Head {
    /// `z w + b`, `w` is `d_e x 1`.
    Linear { w: Tensor, b: Tensor },
    Svgp { state: SvgpState, kernel: KernelParams },
}

/// Transformer feature extractor with a linear or sparse GP head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FtDklModel {
    pub registry: EmbeddingRegistry,
    pub encoder: EncoderParams,
    pub head: Head,
    /// Input transforms for every numeric name the model knows, plus the
    /// source objective statistics.
    pub normalizer: NormalizerState,
}

impl FtDklModel {
    pub fn stage(&self) -> Stage {
        match self.head {
            Head::Linear { .. } => Stage::Mse,
            Head::Svgp { .. } => Stage::Elbo,
        }
    }

    /// Layer norm and dropout are only active in the MSE stage.
    pub fn normalization(&self) -> bool {
        self.stage() == Stage::Mse
    }

    /// Encoder outputs for rows already in model input units.
    pub fn encode(&self, batch: &TokenBatch) -> Result<Tensor> {
        self.encoder.encode(&self.registry, batch, self.normalization())
    }

    /// Predictions in normalized-objective units for rows already in model
    /// input units. The MSE stage reports a zero standard deviation.
    pub fn predict_tokens(&self, batch: &TokenBatch) -> Result<Vec<GaussianPrediction>> {
        let z = self.encode(batch)?;
        match &self.head {
            Head::Linear { w, b } => {
                let m = z.matmul(w)?;
                Ok((0..m.rows()).map(|i| GaussianPrediction::new(m.get(i, 0) + b.item(), 0.0)).collect())
            }
            Head::Svgp { state, kernel } => Ok(SvgpPredictor::new(state, kernel)?.predict(&z)),
        }
    }

    /// Maps raw rows of `space` into model input units.
    pub fn input_transforms(&self, space: &ParamSpace) -> Result<Vec<FeatureTransform>> {
        for p in space.params() {
            if !self.registry.contains(&p.name) {
                return Err(Error::UnknownParameter(p.name.clone()));
            }
        }
        Ok(self.normalizer.input_transforms(space))
    }

    /// Predictions for raw rows of `space`, in normalized-objective units.
    pub fn predict(&self, space: &ParamSpace, rows: &[Vec<f64>]) -> Result<Vec<GaussianPrediction>> {
        self.predictor(space)?.predict(rows)
    }

    /// Prediction closure with the SVGP factors and input transforms cached.
    pub fn predictor(&self, space: &ParamSpace) -> Result<ModelPredictor<'_>> {
        let transforms = self.input_transforms(space)?;
        let svgp = match &self.head {
            Head::Svgp { state, kernel } => Some(SvgpPredictor::new(state, kernel)?),
            Head::Linear { .. } => None,
        };
        Ok(ModelPredictor {
            model: self,
            names: space.names(),
            transforms,
            svgp,
        })
    }

    /// Ensures the registry has an entry of the right kind for every
    /// variable of `space`.
    pub fn covers(&self, space: &ParamSpace) -> Result<()> {
        for p in space.params() {
            let want = matches!(p.kind, ParamKind::Categorical { .. });
            match self.registry.kind(&p.name) {
                None => return Err(Error::UnknownParameter(p.name.clone())),
                Some(k) if (k == crate::encoder::EntryKind::Categorical) != want => {
                    return Err(Error::KindConflict {
                        name: p.name.clone(),
                        first: k.as_str(),
                        second: if want { "categorical" } else { "numeric" },
                    })
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

pub struct ModelPredictor<'a> {
    model: &'a FtDklModel,
    names: Vec<String>,
    transforms: Vec<FeatureTransform>,
    svgp: Option<SvgpPredictor>,
}

impl ModelPredictor<'_> {
    pub fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<GaussianPrediction>> {
        let values = rows.iter().map(|r| transform_row(&self.transforms, r)).collect();
        let batch = TokenBatch::new(self.names.clone(), values)?;
        let z = self.model.encode(&batch)?;
        match (&self.svgp, &self.model.head) {
            (Some(p), _) => Ok(p.predict(&z)),
            (None, Head::Linear { w, b }) => {
                let m = z.matmul(w)?;
                Ok((0..m.rows()).map(|i| GaussianPrediction::new(m.get(i, 0) + b.item(), 0.0)).collect())
            }
            (None, Head::Svgp { .. }) => unreachable!("predictor built for the head"),
        }
    }
}
