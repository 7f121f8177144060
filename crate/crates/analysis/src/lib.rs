//! Latent-space analysis: discriminant projection and classification,
//! confusion metrics, per-dimension discriminability, latent traversal, and
//! the metadata-bias report.

pub mod bias;
pub mod fisher;
pub mod lda;
pub mod linalg;
pub mod metrics;
pub mod traversal;

use thiserror::Error;

pub use bias::{metadata_bias_report, BiasFlag, BiasReport};
pub use fisher::fisher_score_per_dim;
pub use lda::{lda_fit, LdaModel};
pub use metrics::{confusion_stats, precision_recall, ClassCounts, ConfusionStats};
pub use traversal::latent_traversal;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("singular matrix: {0}")]
    Singular(String),
}
