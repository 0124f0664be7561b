use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{transform_row, FeatureTransform, ParamSpace};
use crate::diffmath::Tensor;
use crate::encoder::TokenBatch;
use crate::error::{Error, Result};
use crate::gp::{fit_kernel, ExactGp, GaussianPrediction, KernelParams, SvgpPredictor};
use crate::surrogate::{finetune, FtDklModel, Head, Stage, TrainConfig};
use crate::transfer::{build_target_model, TransferReport};

/// Named scalar diagnostics from one surrogate fit.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics(pub BTreeMap<String, f64>);

impl FitDiagnostics {
    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }
}

/// Probabilistic model refit on every BO iteration. Targets passed to
/// [`Surrogate::fit`] are normalized; predictions are in the same units.
pub trait Surrogate: Send {
    fn label(&self) -> String;

    fn fit(&mut self, rows: &[Vec<f64>], y: &[f64]) -> Result<FitDiagnostics>;

    fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<GaussianPrediction>>;

    fn transfer_report(&self) -> Option<&TransferReport> {
        None
    }
}

/// FT-DKL with a sparse GP head, fine-tuned on the target observations.
pub struct FtDklSurrogate {
    model: FtDklModel,
    names: Vec<String>,
    transforms: Vec<FeatureTransform>,
    predictor: SvgpPredictor,
    cfg: TrainConfig,
    label: String,
    report: Option<TransferReport>,
}

impl FtDklSurrogate {
    /// Wraps a model that already knows every variable of `space`.
    pub fn new(model: FtDklModel, space: &ParamSpace, cfg: TrainConfig, label: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        model.covers(space)?;
        if model.stage() != Stage::Elbo {
            return Err(Error::invalid("BO needs a model with a GP head"));
        }
        let transforms = model.input_transforms(space)?;
        let predictor = Self::head_predictor(&model)?;
        Ok(Self {
            model,
            names: space.names(),
            transforms,
            predictor,
            cfg,
            label: label.into(),
            report: None,
        })
    }

    /// Transfers `source` to `space` and wraps the result.
    pub fn transferred(source: &FtDklModel, space: &ParamSpace, cfg: TrainConfig, seed: u64) -> Result<Self> {
        let (model, report) = build_target_model(source, space, seed)?;
        let mut s = Self::new(model, space, cfg, "ftdkl_pretrained")?;
        s.report = Some(report);
        Ok(s)
    }

    fn head_predictor(model: &FtDklModel) -> Result<SvgpPredictor> {
        match &model.head {
            Head::Svgp { state, kernel } => SvgpPredictor::new(state, kernel),
            Head::Linear { .. } => Err(Error::invalid("BO needs a model with a GP head")),
        }
    }

    fn batch(&self, rows: &[Vec<f64>]) -> Result<TokenBatch> {
        TokenBatch::new(self.names.clone(), rows.iter().map(|r| transform_row(&self.transforms, r)).collect())
    }

    pub fn model(&self) -> &FtDklModel {
        &self.model
    }
}

impl Surrogate for FtDklSurrogate {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn fit(&mut self, rows: &[Vec<f64>], y: &[f64]) -> Result<FitDiagnostics> {
        let batch = self.batch(rows)?;
        let r = finetune(&mut self.model, &batch, y, self.cfg.finetune_steps, &self.cfg)?;
        self.predictor = Self::head_predictor(&self.model)?;
        Ok(FitDiagnostics::default()
            .with("elbo_before", r.elbo_before)
            .with("elbo_after", r.elbo_after))
    }

    fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<GaussianPrediction>> {
        let z = self.model.encode(&self.batch(rows)?)?;
        Ok(self.predictor.predict(&z))
    }

    fn transfer_report(&self) -> Option<&TransferReport> {
        self.report.as_ref()
    }
}

/// Optimizer steps spent on the kernel hyperparameters per fit.
pub const GP_FIT_STEPS: usize = 50;
pub const GP_FIT_LR: f64 = 0.05;

/// Exact GP with an isotropic Matérn-3/2 kernel on inputs mapped from the
/// box to `[-1, 1]`. Hyperparameters are refit by marginal likelihood on
/// every call, warm-started from the previous fit.
pub struct GpSurrogate {
    transforms: Vec<FeatureTransform>,
    initial: KernelParams,
    params: KernelParams,
    gp: Option<ExactGp>,
    label: String,
}

impl GpSurrogate {
    pub fn new(space: &ParamSpace, label: impl Into<String>) -> Result<Self> {
        let transforms = space
            .bounds()
            .into_iter()
            .map(|(lo, hi)| FeatureTransform::Affine { lo, hi })
            .collect();
        let initial = KernelParams::new(1.0, 1.0, None, 1e-2)?;
        Ok(Self {
            transforms,
            params: initial.clone(),
            initial,
            gp: None,
            label: label.into(),
        })
    }

    fn inputs(&self, rows: &[Vec<f64>]) -> Result<Tensor> {
        let data = rows.iter().flat_map(|r| transform_row(&self.transforms, r)).collect();
        Tensor::new(rows.len(), self.transforms.len(), data)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }
}

impl Surrogate for GpSurrogate {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn fit(&mut self, rows: &[Vec<f64>], y: &[f64]) -> Result<FitDiagnostics> {
        let x = self.inputs(rows)?;
        let mut params = self.params.clone();
        let lml = match fit_kernel(&x, y, &mut params, GP_FIT_STEPS, GP_FIT_LR) {
            Ok(v) if v.is_finite() => {
                self.params = params;
                v
            }
            other => {
                log::warn!("GP hyperparameter fit failed ({other:?}); restarting from the initial kernel");
                self.params = self.initial.clone();
                f64::NAN
            }
        };
        self.gp = Some(ExactGp::new(x, y, self.params.clone())?);
        let mut d = FitDiagnostics::default()
            .with("lengthscale", self.params.lengthscale())
            .with("noise", self.params.noise());
        if lml.is_finite() {
            d = d.with("lml", lml);
        }
        Ok(d)
    }

    fn predict(&self, rows: &[Vec<f64>]) -> Result<Vec<GaussianPrediction>> {
        let q = self.inputs(rows)?;
        match &self.gp {
            Some(gp) => Ok(gp.predict(&q)),
            None => Ok(ExactGp::new(Tensor::zeros(0, q.cols()), &[], self.params.clone())?.predict(&q)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gp_surrogate_fits_a_line() {
        let space = ParamSpace::uniform_box("x", 1, 0.0, 4.0).unwrap();
        let mut s = GpSurrogate::new(&space, "gp").unwrap();
        let prior = s.predict(&[vec![2.0]]).unwrap()[0];
        assert_eq!(prior.mean, 0.0);
        let rows: Vec<Vec<f64>> = (0..9).map(|i| vec![i as f64 * 0.5]).collect();
        let y: Vec<f64> = rows.iter().map(|r| r[0] - 2.0).collect();
        let d = s.fit(&rows, &y).unwrap();
        assert!(d.0["lml"].is_finite());
        let p = s.predict(&[vec![1.25]]).unwrap()[0];
        assert!((p.mean + 0.75).abs() < 0.05, "{p:?}");
        assert!(p.std < prior.std);
    }
}
