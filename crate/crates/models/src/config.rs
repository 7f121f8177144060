//! Architecture and training configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Sigmoid,
}

/// Mirrored encoder/decoder geometry. The encoder halves each spatial extent
/// once per conv stage (conv + batch norm + activation + 2x average pooling),
/// then a dense trunk feeds the (mu, log_sigma) heads; the decoder is the
/// structural reversal ending in a sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Volume extents (dx, dy, dz).
    pub input_shape: [usize; 3],
    /// Output channels per down stage; the decoder mirrors them.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dense_width: usize,
    pub latent_dim: usize,
    pub dropout_rate: f64,
    pub hidden_activation: Activation,
    /// Initial bias of the log-sigma head. Negative values start the
    /// posterior near-deterministic, which lets short training runs learn
    /// through the sampling bottleneck.
    #[serde(default)]
    pub log_sigma_bias_init: f64,
}

impl ArchitectureConfig {
    /// Desk-scale config: 20x24x20 volumes, two stages.
    pub fn desk(latent_dim: usize) -> Self {
        ArchitectureConfig {
            input_shape: [20, 24, 20],
            conv_channels: vec![8, 16],
            kernel_size: 3,
            dense_width: 128,
            latent_dim,
            dropout_rate: 0.1,
            hidden_activation: Activation::Relu,
            log_sigma_bias_init: 0.0,
        }
    }

    /// Full-scale config: 40x48x40 volumes, three stages down to 5x6x5x64.
    pub fn full_scale(latent_dim: usize) -> Self {
        ArchitectureConfig {
            input_shape: [40, 48, 40],
            conv_channels: vec![16, 32, 64],
            kernel_size: 3,
            dense_width: 512,
            latent_dim,
            dropout_rate: 0.1,
            hidden_activation: Activation::Relu,
            log_sigma_bias_init: 0.0,
        }
    }

    pub fn stages(&self) -> usize {
        self.conv_channels.len()
    }

    /// Spatial tensor extents (d, h, w) = (dz, dy, dx).
    pub fn spatial(&self) -> [usize; 3] {
        [self.input_shape[2], self.input_shape[1], self.input_shape[0]]
    }

    /// Grid extents after all pooling stages, in (d, h, w) order.
    pub fn pre_dense_grid(&self) -> [usize; 3] {
        let f = 1 << self.stages();
        let [d, h, w] = self.spatial();
        [d / f, h / f, w / f]
    }

    /// Flattened width between the conv stack and the dense trunk.
    pub fn flat_dim(&self) -> usize {
        let [d, h, w] = self.pre_dense_grid();
        d * h * w * self.conv_channels.last().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_channels.is_empty() {
            return Err(ModelError::Config("at least one conv stage required".into()));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(ModelError::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        let f = 1usize << self.stages();
        for (axis, &e) in ["x", "y", "z"].iter().zip(&self.input_shape) {
            if e == 0 || e % f != 0 {
                return Err(ModelError::Config(format!(
                    "extent {e} on {axis} is not divisible by 2^{} stages",
                    self.stages()
                )));
            }
        }
        if self.latent_dim == 0 || self.dense_width == 0 {
            return Err(ModelError::Config("latent and dense widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::Config(format!(
                "dropout rate must lie in [0,1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn content_digest(&self) -> String {
        canonical_digest(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
    SgdMomentum {
        lr: f64,
        momentum: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match self {
            OptimizerConfig::Adam { lr, .. } => *lr,
            OptimizerConfig::SgdMomentum { lr, .. } => *lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconLossKind {
    Mse,
    BernoulliXent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight on the divergence terms; 1.0 keeps the plain unweighted sums.
    pub kl_weight: f64,
    /// Hinge margin for the adversarial encoder loss.
    pub margin: f64,
    pub seed: u64,
    /// Checkpoint cadence in epochs; the final epoch is always written.
    pub checkpoint_every: usize,
    pub recon_loss: ReconLossKind,
    /// Also feed reconstructions through the adversarial terms.
    pub adversarial_recon_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::adam(1e-3),
            batch_size: 8,
            epochs: 30,
            kl_weight: 1.0,
            margin: 5.0,
            seed: 1,
            checkpoint_every: 10,
            recon_loss: ReconLossKind::Mse,
            adversarial_recon_terms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.optimizer.learning_rate() < 0.0 {
            return Err(ModelError::Config("learning rate must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(ModelError::Config("batch size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(ModelError::Config("epochs must be >= 1".into()));
        }
        if self.kl_weight < 0.0 {
            return Err(ModelError::Config("kl weight must be >= 0".into()));
        }
        if self.margin < 0.0 {
            return Err(ModelError::Config("margin must be >= 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(ModelError::Config("checkpoint cadence must be >= 1".into()));
        }
        Ok(())
    }

    pub fn content_digest(&self) -> String {
        canonical_digest(self)
    }
}

/// SHA-256 hex of the canonical (sorted-key) JSON form.
pub fn canonical_digest<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    let canonical = serde_json::to_string(&v).expect("serializable");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_full_geometry() {
        let desk = ArchitectureConfig::desk(8);
        desk.validate().unwrap();
        assert_eq!(desk.pre_dense_grid(), [5, 6, 5]);

        let full = ArchitectureConfig::full_scale(512);
        full.validate().unwrap();
        assert_eq!(full.pre_dense_grid(), [5, 6, 5]);
        assert_eq!(full.flat_dim(), 5 * 6 * 5 * 64);
    }

    #[test]
    fn indivisible_extents_rejected() {
        let mut c = ArchitectureConfig::desk(8);
        c.input_shape = [22, 24, 20];
        assert!(c.validate().is_err());
    }

    #[test]
    fn digests_depend_on_content() {
        let a = ArchitectureConfig::desk(8);
        let mut b = ArchitectureConfig::desk(8);
        assert_eq!(a.content_digest(), b.content_digest());
        b.latent_dim = 32;
        assert_ne!(a.content_digest(), b.content_digest());
    }
}
