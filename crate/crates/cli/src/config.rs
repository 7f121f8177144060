//! Experiment configuration: one JSON file wiring generation, preprocessing,
//! training, and analysis together, with a content digest stamped into every
//! artifact the run produces.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use neurovol_models::{canonical_digest, ArchitectureConfig, TrainConfig};
use neurovol_phantom::PhantomConfig;
use neurovol_preprocess::PreprocessConfig;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisParams {
    /// Within-scatter regularization; None picks the relative default.
    pub lda_epsilon: Option<f64>,
    pub traversal_values: Vec<f64>,
    pub traversal_top_k: usize,
    /// Mean-gap threshold in pooled standard deviations for bias flags.
    pub bias_flag_threshold: f64,
    pub bias_histogram_bins: usize,
    /// Also export projections with the three severity grades merged.
    pub merge_grades_projection: bool,
}

impl Default for AnalysisParams {
    fn default() -> Self {
        AnalysisParams {
            lda_epsilon: None,
            traversal_values: vec![-1.25, 0.0, 1.25],
            traversal_top_k: 2,
            bias_flag_threshold: 1.0,
            bias_histogram_bins: 10,
            merge_grades_projection: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub n_patients: usize,
    pub train_fraction: f64,
    pub master_seed: u64,
    pub phantom: PhantomConfig,
    pub preprocess: PreprocessConfig,
    pub vae: ModelSpec,
    pub ivae: ModelSpec,
    pub analysis: AnalysisParams,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 20x24x20 phantoms, latent-8 plain model and
    /// latent-32 adversarial model.
    pub fn desk_default() -> Self {
        let mut phantom = PhantomConfig::default();
        phantom.volume_shape = [20, 24, 20];
        ExperimentConfig {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            n_patients: 300,
            train_fraction: 0.9,
            master_seed: 1,
            phantom,
            preprocess: PreprocessConfig::default(),
            vae: ModelSpec {
                arch: ArchitectureConfig::desk(8),
                train: TrainConfig::default(),
            },
            ivae: ModelSpec {
                arch: ArchitectureConfig::desk(32),
                train: TrainConfig::default(),
            },
            analysis: AnalysisParams::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let config: ExperimentConfig = serde_json::from_str(&body)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Validation(e.to_string()))?;
        std::fs::write(path, body).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.phantom
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.vae
            .arch
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.vae
            .train
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.ivae
            .arch
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.ivae
            .train
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(CliError::Validation(format!(
                "train fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        if self.n_patients < 5 {
            return Err(CliError::Validation(
                "need at least 5 patients (one per class)".into(),
            ));
        }
        if self.analysis.traversal_values.is_empty() {
            return Err(CliError::Validation("no traversal values".into()));
        }
        Ok(())
    }

    /// SHA-256 digest of the canonical (sorted-key) JSON form. The digest is
    /// stamped into every artifact of a run.
    pub fn digest(&self) -> String {
        canonical_digest(self)
    }

    /// Round-trips losslessly through its text form.
    pub fn round_trips(&self) -> bool {
        let text = match serde_json::to_string(self) {
            Ok(t) => t,
            Err(_) => return false,
        };
        match serde_json::from_str::<ExperimentConfig>(&text) {
            Ok(back) => back == *self,
            Err(_) => false,
        }
    }
}
