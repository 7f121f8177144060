use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use neurovol_cli::commands::{self, ModelKind};
use neurovol_cli::config::ExperimentConfig;
use neurovol_cli::CliError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Vae,
    Ivae,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Vae => ModelKind::Vae,
            ModelArg::Ivae => ModelKind::Ivae,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "neurovol",
    about = "Phantom generation, preprocessing, generative-model training, and latent-space analysis for 3D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a default experiment config to the given path.
    Init {
        #[arg(long, default_value = "experiment.json")]
        path: PathBuf,
    },
    /// Generate the phantom dataset and its train/test split.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Trim, downsample, and normalize raw volumes.
    Preprocess {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory (defaults to the config's data_dir).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct test-split images from a checkpoint.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode prior samples from a checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Discriminant analysis of the latent space plus the bias report.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a sweep over one latent dimension.
    Traverse {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dim: usize,
        /// Comma-separated values; defaults to the config's traversal values.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<&PathBuf>) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.master_seed = s;
    }
    if let Some(o) = out {
        config.out_dir = o.clone();
    }
    Ok(config)
}

fn parse_values(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Validation(format!("bad value {t:?}: {e}")))
        })
        .collect()
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Init { path } => {
            let config = ExperimentConfig::desk_default();
            config.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Generate {
            config,
            seed,
            out,
            force,
        } => {
            let mut config = load_config(&config, seed, None)?;
            if let Some(o) = out {
                config.data_dir = o;
            }
            let summary = commands::cmd_generate(&config, force)?;
            println!(
                "generated {} images from {} patients into {}",
                summary.images,
                summary.patients,
                summary.data_dir.display()
            );
            for (class, n) in &summary.per_class_patients {
                println!("  {class:8} {n} patients");
            }
        }
        Command::Preprocess { config, data, out } => {
            let config = load_config(&config, None, None)?;
            let summary = commands::cmd_preprocess(&config, data.as_deref(), out.as_deref())?;
            println!(
                "processed {} volumes into {} (mean-image sharpness {:.6})",
                summary.processed,
                summary.out_dir.display(),
                summary.mean_sharpness.unwrap_or(f64::NAN)
            );
        }
        Command::Train {
            config,
            model,
            seed,
            data,
            out,
        } => {
            let config = load_config(&config, seed, None)?;
            let summary =
                commands::cmd_train(&config, model.into(), data.as_deref(), out.as_deref())?;
            println!(
                "trained {} for {} epochs; final checkpoint {}",
                summary.model.label(),
                summary.curve.len(),
                summary.final_checkpoint.display()
            );
        }
        Command::Reconstruct {
            config,
            model,
            checkpoint,
            n,
            data,
            out,
        } => {
            let config = load_config(&config, None, None)?;
            let written = commands::cmd_reconstruct(
                &config,
                model.into(),
                &checkpoint,
                data.as_deref(),
                out.as_deref(),
                n,
            )?;
            println!("wrote {} artifacts", written.len());
        }
        Command::Sample {
            config,
            model,
            checkpoint,
            n,
            out,
        } => {
            let config = load_config(&config, None, None)?;
            let written =
                commands::cmd_sample(&config, model.into(), &checkpoint, out.as_deref(), n)?;
            println!("wrote {} artifacts", written.len());
        }
        Command::Analyze {
            config,
            model,
            checkpoint,
            data,
            out,
        } => {
            let config = load_config(&config, None, None)?;
            let summary = commands::cmd_analyze(
                &config,
                model.into(),
                &checkpoint,
                data.as_deref(),
                out.as_deref(),
            )?;
            println!(
                "test accuracy {:.4}, ms-vs-rest {:.4}, projection dims {}",
                summary.metrics.accuracy,
                summary.metrics.ms_vs_rest_accuracy,
                summary.projection_dims
            );
            for m in &summary.metrics.per_class {
                println!(
                    "  {:8} tp {:4} fp {:4} fn {:4} tn {:4}  precision {}  recall {}",
                    m.class,
                    m.tp,
                    m.fp,
                    m.fn_,
                    m.tn,
                    m.precision.map_or("n/a".into(), |v| format!("{v:.2}")),
                    m.recall.map_or("n/a".into(), |v| format!("{v:.2}")),
                );
            }
        }
        Command::Traverse {
            config,
            model,
            checkpoint,
            dim,
            values,
            out,
        } => {
            let config = load_config(&config, None, None)?;
            let values = values.map(|t| parse_values(&t)).transpose()?;
            let written = commands::cmd_traverse(
                &config,
                model.into(),
                &checkpoint,
                dim,
                values,
                out.as_deref(),
            )?;
            println!("wrote {} artifacts", written.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
