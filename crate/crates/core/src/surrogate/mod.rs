//! FT-DKL surrogate: encoder plus linear or sparse GP head, two-stage
//! multi-source pre-training and per-iteration fine-tuning.

mod checkpoint;
mod config;
mod model;
mod train;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use model::{FtDklModel, Head, ModelPredictor, Stage};
pub use train::{
    build_registry, cold_model, elbo_step, finetune, init_svgp_head, model_elbo, pretrain, pretrain_elbo, pretrain_mse,
    ElboOptimizer, FinetuneReport, TrainHistory, COLD_INIT_POINTS,
};

