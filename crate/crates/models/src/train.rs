//! Mini-batch training loops for the plain and adversarial autoencoders.
//!
//! Both loops are single-threaded and draw every random decision (batch
//! order, dropout masks, reparameterization noise, prior samples) from one
//! stream seeded by the config, so a run is a pure function of
//! (volumes, configs, seed).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use neurovol_tensor::{Mode, RngStream, Tape, Tensor, Volume};

use crate::checkpoint::{save_checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
use crate::config::{ArchitectureConfig, OptimizerConfig, TrainConfig};
use crate::loss::{ivae_encoder_loss, ivae_generator_loss, vae_loss_terms};
use crate::net::{
    apply_bn_updates, decoder_forward, encoder_forward, reparameterize, BoundModel, Trainable,
};
use crate::params::{init_parameters, Component, ParameterStore};
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
    /// Adversarial runs only.
    pub encoder_loss: Option<f64>,
    pub generator_loss: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub store: ParameterStore,
    pub curve: Vec<EpochStats>,
    pub checkpoints: Vec<PathBuf>,
}

struct MomentState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

/// Optimizer over named parameters. Updates are elementwise per parameter, so
/// sweep order cannot affect values; a BTreeMap keeps it deterministic anyway.
struct Optimizer {
    config: OptimizerConfig,
    state: BTreeMap<String, MomentState>,
}

impl Optimizer {
    fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            state: BTreeMap::new(),
        }
    }

    fn step(&mut self, store: &mut ParameterStore, grads: &[(String, Vec<f32>)]) {
        for (name, grad) in grads {
            let entry = match store.get_mut(name) {
                Some(e) => e,
                None => continue,
            };
            let data = &mut entry.tensor.data;
            let slot = self.state.entry(name.clone()).or_insert_with(|| MomentState {
                m: vec![0.0; data.len()],
                v: vec![0.0; data.len()],
                t: 0,
            });
            match self.config {
                OptimizerConfig::Adam {
                    lr,
                    beta1,
                    beta2,
                    eps,
                } => {
                    slot.t += 1;
                    let t = slot.t as f64;
                    let b1 = beta1 as f32;
                    let b2 = beta2 as f32;
                    let bias1 = 1.0 - (beta1).powf(t as f64 as f64).powf(1.0); // placeholder, replaced below
                    let _ = bias1;
                    let corr1 = 1.0 - beta1.powi(t as i32);
                    let corr2 = 1.0 - beta2.powi(t as i32);
                    let step = lr as f32;
                    for i in 0..data.len() {
                        let g = grad[i];
                        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * g;
                        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * g * g;
                        let m_hat = slot.m[i] / corr1 as f32;
                        let v_hat = slot.v[i] / corr2 as f32;
                        data[i] -= step * m_hat / (v_hat.sqrt() + eps as f32);
                    }
                }
                OptimizerConfig::SgdMomentum { lr, momentum } => {
                    let mu = momentum as f32;
                    let step = lr as f32;
                    for i in 0..data.len() {
                        slot.m[i] = mu * slot.m[i] + grad[i];
                        data[i] -= step * slot.m[i];
                    }
                }
            }
        }
    }
}

fn batch_tensor(volumes: &[Volume], indices: &[usize], arch: &ArchitectureConfig) -> Tensor<f32> {
    let [d, h, w] = arch.spatial();
    let voxels = d * h * w;
    let mut data = Vec::with_capacity(indices.len() * voxels);
    for &i in indices {
        data.extend_from_slice(&volumes[i].data);
    }
    Tensor::new(vec![indices.len(), 1, d, h, w], data).expect("batch shape")
}

fn check_volumes(volumes: &[Volume], arch: &ArchitectureConfig) -> Result<(), ModelError> {
    if volumes.is_empty() {
        return Err(ModelError::Config("empty training set".into()));
    }
    let [dx, dy, dz] = arch.input_shape;
    for v in volumes {
        if v.shape() != (dx, dy, dz) {
            return Err(ModelError::Config(format!(
                "volume shape {:?} does not match architecture {:?}",
                v.shape(),
                arch.input_shape
            )));
        }
    }
    Ok(())
}

fn collect_grads(
    tape: &Tape<f32>,
    bound: &BoundModel,
    loss: neurovol_tensor::TensorRef,
) -> Result<Vec<(String, Vec<f32>)>, ModelError> {
    let grads = tape.backward(loss)?;
    Ok(bound
        .trainable_refs()
        .into_iter()
        .map(|(name, r)| (name, grads.dense(r)))
        .collect())
}

struct CheckpointSink<'a> {
    out_dir: Option<&'a Path>,
    arch: &'a ArchitectureConfig,
    train_digest: String,
    experiment_digest: String,
    label: &'a str,
    written: Vec<PathBuf>,
}

impl<'a> CheckpointSink<'a> {
    fn write(&mut self, store: &ParameterStore, epoch: usize) -> Result<(), ModelError> {
        let Some(dir) = self.out_dir else {
            return Ok(());
        };
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            arch: self.arch.clone(),
            train_digest: self.train_digest.clone(),
            experiment_digest: self.experiment_digest.clone(),
            epoch,
        };
        let path = dir.join(format!("{}_epoch_{epoch:04}.nvck", self.label));
        save_checkpoint(&path, &header, store)?;
        self.written.push(path);
        Ok(())
    }
}

/// Plain autoencoder training: one joint gradient step per batch.
pub fn train_vae(
    volumes: &[Volume],
    arch: &ArchitectureConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    experiment_digest: &str,
) -> Result<TrainOutput, ModelError> {
    arch.validate()?;
    config.validate()?;
    check_volumes(volumes, arch)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    let mut store = init_parameters(arch, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut rng = RngStream::new(neurovol_tensor::derive_seed(config.seed, 0xAE));
    let mut sink = CheckpointSink {
        out_dir,
        arch,
        train_digest: config.content_digest(),
        experiment_digest: experiment_digest.to_string(),
        label: "vae",
        written: Vec::new(),
    };
    let mut curve = Vec::with_capacity(config.epochs);

    let mut order: Vec<usize> = (0..volumes.len()).collect();
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut sums = (0.0f64, 0.0f64, 0.0f64);
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue; // batch norm needs at least two samples
            }
            let batch = batch_tensor(volumes, chunk, arch);
            let mut tape = Tape::new();
            let bound = BoundModel::bind(&mut tape, &store, Trainable::Both);
            let x = tape.constant(&batch);
            let enc = encoder_forward(&mut tape, &bound, arch, x, Mode::Train, &mut rng)?;
            let z = reparameterize(&mut tape, enc.mu, enc.log_sigma, &mut rng)?;
            let dec = decoder_forward(&mut tape, &bound, arch, z, Mode::Train, &mut rng)?;
            let terms = vae_loss_terms(
                &mut tape,
                config.recon_loss,
                dec.output,
                dec.logits,
                x,
                enc.mu,
                enc.log_sigma,
                config.kl_weight,
            )?;
            let total = tape.scalar_value(terms.total) as f64;
            let recon = tape.scalar_value(terms.recon) as f64;
            let kl = tape.scalar_value(terms.kl) as f64;
            if !total.is_finite() {
                return Err(ModelError::Diverged {
                    epoch,
                    last_checkpoint: sink.written.last().cloned(),
                });
            }
            let grads = collect_grads(&tape, &bound, terms.total)?;
            optimizer.step(&mut store, &grads);
            apply_bn_updates(&mut store, &enc.bn_stats, None);
            apply_bn_updates(&mut store, &dec.bn_stats, None);
            sums.0 += total;
            sums.1 += recon;
            sums.2 += kl;
            batches += 1;
        }
        if batches == 0 {
            return Err(ModelError::Config(
                "no batch of size >= 2 could be formed".into(),
            ));
        }
        let n = batches as f64;
        curve.push(EpochStats {
            epoch,
            total: sums.0 / n,
            recon: sums.1 / n,
            kl: sums.2 / n,
            encoder_loss: None,
            generator_loss: None,
        });
        if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            sink.write(&store, epoch)?;
        }
    }
    Ok(TrainOutput {
        store,
        curve,
        checkpoints: sink.written,
    })
}

/// Adversarial training: per batch, an encoder step on the encoder loss and a
/// decoder step on the generator loss, each touching only its own partition
/// (weights, optimizer state, and batch-norm running statistics).
pub fn train_ivae(
    volumes: &[Volume],
    arch: &ArchitectureConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    experiment_digest: &str,
) -> Result<TrainOutput, ModelError> {
    arch.validate()?;
    config.validate()?;
    check_volumes(volumes, arch)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| ModelError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
    }
    let mut store = init_parameters(arch, config.seed)?;
    let mut opt_enc = Optimizer::new(config.optimizer);
    let mut opt_dec = Optimizer::new(config.optimizer);
    let mut rng = RngStream::new(neurovol_tensor::derive_seed(config.seed, 0x1A));
    let mut sink = CheckpointSink {
        out_dir,
        arch,
        train_digest: config.content_digest(),
        experiment_digest: experiment_digest.to_string(),
        label: "ivae",
        written: Vec::new(),
    };
    let mut curve = Vec::with_capacity(config.epochs);
    let latent = arch.latent_dim;

    let mut order: Vec<usize> = (0..volumes.len()).collect();
    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // recon, kl_real, L_E, L_G
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let batch = batch_tensor(volumes, chunk, arch);
            let n = chunk.len();
            let prior: Vec<f32> = (0..n * latent).map(|_| rng.normal() as f32).collect();
            let prior_t = Tensor::new(vec![n, latent], prior).expect("prior shape");

            // --- encoder step: minimize E(x) + hinge(E(G(z))) + recon ---
            let (le, e_real) = {
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, &store, Trainable::EncoderOnly);
                let x = tape.constant(&batch);
                let zp = tape.constant(&prior_t);
                let step = ivae_encoder_loss(&mut tape, &bound, arch, x, zp, config, &mut rng)?;
                let le_v = tape.scalar_value(step.total) as f64;
                if !le_v.is_finite() {
                    return Err(ModelError::Diverged {
                        epoch,
                        last_checkpoint: sink.written.last().cloned(),
                    });
                }
                let grads = collect_grads(&tape, &bound, step.total)?;
                opt_enc.step(&mut store, &grads);
                apply_bn_updates(&mut store, &step.bn_stats, Some(Component::Encoder));
                (le_v, tape.scalar_value(step.divergence_real) as f64)
            };

            // --- decoder step: minimize E(G(z)) + recon ---
            let (lg, recon_v) = {
                let mut tape = Tape::new();
                let bound = BoundModel::bind(&mut tape, &store, Trainable::DecoderOnly);
                let x = tape.constant(&batch);
                let zp = tape.constant(&prior_t);
                let step = ivae_generator_loss(&mut tape, &bound, arch, x, zp, config, &mut rng)?;
                let lg_v = tape.scalar_value(step.total) as f64;
                if !lg_v.is_finite() {
                    return Err(ModelError::Diverged {
                        epoch,
                        last_checkpoint: sink.written.last().cloned(),
                    });
                }
                let grads = collect_grads(&tape, &bound, step.total)?;
                opt_dec.step(&mut store, &grads);
                apply_bn_updates(&mut store, &step.bn_stats, Some(Component::Decoder));
                (lg_v, tape.scalar_value(step.recon) as f64)
            };

            sums.0 += recon_v;
            sums.1 += e_real;
            sums.2 += le;
            sums.3 += lg;
            batches += 1;
        }
        if batches == 0 {
            return Err(ModelError::Config(
                "no batch of size >= 2 could be formed".into(),
            ));
        }
        let nb = batches as f64;
        curve.push(EpochStats {
            epoch,
            total: (sums.2 + sums.3) / nb,
            recon: sums.0 / nb,
            kl: sums.1 / nb,
            encoder_loss: Some(sums.2 / nb),
            generator_loss: Some(sums.3 / nb),
        });
        if epoch % config.checkpoint_every == 0 || epoch == config.epochs {
            sink.write(&store, epoch)?;
        }
    }
    Ok(TrainOutput {
        store,
        curve,
        checkpoints: sink.written,
    })
}

/// Loss-curve CSV. The adversarial form appends its two step losses.
pub fn curve_to_csv(curve: &[EpochStats], digest: &str) -> String {
    let adversarial = curve.first().is_some_and(|e| e.encoder_loss.is_some());
    let mut out = String::new();
    out.push_str(&format!("# config_digest={digest}\n"));
    if adversarial {
        out.push_str("epoch,loss_total,loss_recon,loss_kl,loss_E,loss_G\n");
    } else {
        out.push_str("epoch,loss_total,loss_recon,loss_kl\n");
    }
    for e in curve {
        if adversarial {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch,
                e.total,
                e.recon,
                e.kl,
                e.encoder_loss.unwrap_or(f64::NAN),
                e.generator_loss.unwrap_or(f64::NAN)
            ));
        } else {
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.total, e.recon, e.kl));
        }
    }
    out
}
