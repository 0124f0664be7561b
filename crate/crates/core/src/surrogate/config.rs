use serde::{Deserialize, Serialize};

use crate::data::FeatureScaling;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};

/// Hyperparameters of pre-training and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub epochs_mse: usize,
    pub epochs_elbo: usize,
    /// Rows per minibatch; every batch comes from a single source task.
    pub batch_size: usize,
    /// AdamW learning rate of the transformer, embeddings and linear head.
    pub lr_encoder: f64,
    /// AdamW learning rate of the kernel hyperparameters and inducing inputs.
    pub lr_kernel: f64,
    pub weight_decay: f64,
    /// Natural-gradient step size for the variational distribution.
    pub natgrad_step: f64,
    pub inducing_points: usize,
    /// ELBO steps at the start of every BO iteration.
    pub finetune_steps: usize,
    /// AdamW learning rate of the transformer and embeddings while
    /// fine-tuning on the target task.
    pub finetune_lr_encoder: f64,
    /// AdamW learning rate of the kernel and inducing inputs while
    /// fine-tuning.
    pub finetune_lr_kernel: f64,
    pub noise_init: f64,
    pub scaling: FeatureScaling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            epochs_mse: 300,
            epochs_elbo: 50,
            batch_size: 128,
            lr_encoder: 1e-5,
            lr_kernel: 1e-3,
            weight_decay: 0.01,
            natgrad_step: 0.1,
            inducing_points: 128,
            finetune_steps: 30,
            finetune_lr_encoder: 1e-5,
            finetune_lr_kernel: 1e-3,
            noise_init: 1e-2,
            scaling: FeatureScaling::Standard,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small model and larger step sizes for single-machine experiments.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            epochs_mse: 100,
            epochs_elbo: 30,
            batch_size: 64,
            lr_encoder: 1e-3,
            lr_kernel: 1e-2,
            inducing_points: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let positive = [self.lr_encoder, self.lr_kernel, self.finetune_lr_encoder, self.finetune_lr_kernel, self.noise_init];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("learning rates and initial noise must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if !(self.natgrad_step > 0.0 && self.natgrad_step <= 1.0) {
            return Err(Error::invalid("natural-gradient step must be in (0, 1]"));
        }
        if self.batch_size == 0 || self.inducing_points == 0 {
            return Err(Error::invalid("batch size and inducing points must be positive"));
        }
        Ok(())
    }
}
