//! Volumetric generative models: mirrored conv encoder/decoder construction,
//! the variational objective, the adversarial introspective variant, and
//! deterministic training loops over both.

pub mod checkpoint;
pub mod config;
pub mod infer;
pub mod loss;
pub mod net;
pub mod params;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::{check_architecture, load_checkpoint, save_checkpoint, CheckpointHeader};
pub use config::{
    canonical_digest, Activation, ArchitectureConfig, OptimizerConfig, ReconLossKind, TrainConfig,
};
pub use infer::{decode, encode, encode_batch, reconstruct, sample_prior, LatentCode};
pub use loss::{
    gan_objective_value, ivae_encoder_loss, ivae_generator_loss, kl_divergence, kl_divergence_f32,
    reconstruction_loss, EncoderStepLoss, GeneratorStepLoss,
};
pub use net::{
    apply_bn_updates, decoder_forward, encoder_forward, reparameterize, BoundModel, Trainable,
};
pub use params::{init_parameters, Component, ParamEntry, ParamKind, ParameterStore};
pub use train::{curve_to_csv, train_ivae, train_vae, EpochStats, TrainOutput};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch} (last checkpoint: {last_checkpoint:?})")]
    Diverged {
        epoch: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] neurovol_tensor::TensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
