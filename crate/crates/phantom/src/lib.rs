//! Synthetic, pre-aligned 3D brain-like phantom volumes in five disease
//! classes, with class-correlated acquisition metadata and deterministic
//! generation from a master seed.

pub mod config;
pub mod generator;
pub mod manifest;

use thiserror::Error;

pub use config::{
    ClassMetadataDist, Dist, FocalLesionParams, HaloParams, ImagesPerPatient, JitterParams,
    PhantomConfig,
};
pub use generator::{
    class_counts, generate_dataset, generate_dataset_with, generate_phantom, lesion_load,
    split_by_patient, PhantomSample,
};
pub use manifest::{ClassLabel, DatasetManifest, ImageRecord, Metadata, Split};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid configuration: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Volume(#[from] neurovol_tensor::TensorError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
