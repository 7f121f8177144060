//! Encoder and decoder forward passes over a tape, with explicit control of
//! which parameter partition is gradient-tracked and which batch-norm layers
//! may report statistics for running-average updates.

use std::collections::HashMap;

use neurovol_tensor::tape::{BatchNormMode, BatchStats};
use neurovol_tensor::{Mode, RngStream, Tape, TensorRef};

use crate::config::{Activation, ArchitectureConfig};
use crate::params::{Component, ParamKind, ParameterStore};
use crate::ModelError;

/// Which partition receives gradients on this tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Both,
    EncoderOnly,
    DecoderOnly,
    None,
}

impl Trainable {
    fn tracks(self, component: Component) -> bool {
        matches!(
            (self, component),
            (Trainable::Both, _)
                | (Trainable::EncoderOnly, Component::Encoder)
                | (Trainable::DecoderOnly, Component::Decoder)
        )
    }
}

/// Parameter store bound onto one tape.
pub struct BoundModel<'s> {
    store: &'s ParameterStore,
    refs: HashMap<String, TensorRef>,
    pub trainable: Trainable,
}

impl<'s> BoundModel<'s> {
    pub fn bind(tape: &mut Tape<f32>, store: &'s ParameterStore, trainable: Trainable) -> Self {
        let mut refs = HashMap::new();
        for entry in store.entries() {
            if entry.kind == ParamKind::State {
                continue; // running stats enter eval-mode calls as plain slices
            }
            let r = if trainable.tracks(entry.component) {
                tape.param(&entry.tensor)
            } else {
                tape.constant(&entry.tensor)
            };
            refs.insert(entry.name.clone(), r);
        }
        BoundModel {
            store,
            refs,
            trainable,
        }
    }

    pub fn r(&self, name: &str) -> Result<TensorRef, ModelError> {
        self.refs
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::Config(format!("parameter {name} not bound")))
    }

    fn running(&self, bn: &str) -> Result<(&'s [f32], &'s [f32]), ModelError> {
        let mean = self.store.tensor(&format!("{bn}.run_mean"))?;
        let var = self.store.tensor(&format!("{bn}.run_var"))?;
        Ok((&mean.data, &var.data))
    }

    /// Gradient-tracked tape refs in store order, for optimizer sweeps.
    pub fn trainable_refs(&self) -> Vec<(String, TensorRef)> {
        self.store
            .entries()
            .iter()
            .filter(|e| e.kind == ParamKind::Weight && self.trainable.tracks(e.component))
            .map(|e| (e.name.clone(), self.refs[&e.name]))
            .collect()
    }
}

pub const BN_EPS: f64 = 1e-5;
/// Fraction of the old running statistic kept per update.
pub const BN_MOMENTUM: f32 = 0.9;
/// log sigma is clamped to this range before exponentiation.
pub const LOG_SIGMA_RANGE: (f64, f64) = (-30.0, 10.0);

pub struct EncoderOutput {
    pub mu: TensorRef,
    pub log_sigma: TensorRef,
    pub bn_stats: Vec<(String, BatchStats<f32>)>,
}

pub struct DecoderOutput {
    pub output: TensorRef,
    /// Pre-sigmoid activations, for the cross-entropy reconstruction loss.
    pub logits: TensorRef,
    pub bn_stats: Vec<(String, BatchStats<f32>)>,
}

fn activate(tape: &mut Tape<f32>, x: TensorRef, kind: Activation) -> TensorRef {
    match kind {
        Activation::Relu => tape.relu(x),
        Activation::LeakyRelu { alpha } => tape.leaky_relu(x, alpha),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

fn norm_layer(
    tape: &mut Tape<f32>,
    bound: &BoundModel,
    bn: &str,
    x: TensorRef,
    mode: Mode,
    stats: &mut Vec<(String, BatchStats<f32>)>,
) -> Result<TensorRef, ModelError> {
    let gamma = bound.r(&format!("{bn}.gamma"))?;
    let beta = bound.r(&format!("{bn}.beta"))?;
    let out = match mode {
        Mode::Train => {
            let (out, batch) = tape.batch_norm(x, gamma, beta, BN_EPS, BatchNormMode::Train)?;
            if let Some(b) = batch {
                stats.push((bn.to_string(), b));
            }
            out
        }
        Mode::Eval => {
            let (mean, var) = bound.running(bn)?;
            let (out, _) = tape.batch_norm(
                x,
                gamma,
                beta,
                BN_EPS,
                BatchNormMode::Eval {
                    running_mean: mean,
                    running_var: var,
                },
            )?;
            out
        }
    };
    Ok(out)
}

/// Maps a batch [N,1,D,H,W] to (mu, log_sigma), both [N, latent].
pub fn encoder_forward(
    tape: &mut Tape<f32>,
    bound: &BoundModel,
    arch: &ArchitectureConfig,
    x: TensorRef,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<EncoderOutput, ModelError> {
    let mut stats = Vec::new();
    let pad = (arch.kernel_size - 1) / 2;
    let mut h = x;
    for i in 0..arch.stages() {
        let w = bound.r(&format!("enc.conv{i}.weight"))?;
        let b = bound.r(&format!("enc.conv{i}.bias"))?;
        h = tape.conv3d(h, w, b, 1, pad)?;
        h = norm_layer(tape, bound, &format!("enc.bn{i}"), h, mode, &mut stats)?;
        h = activate(tape, h, arch.hidden_activation);
        h = tape.avg_pool3d(h, 2)?;
    }
    let n = tape.shape(h)[0];
    let flat: usize = tape.shape(h)[1..].iter().product();
    h = tape.reshape(h, vec![n, flat])?;
    let w = bound.r("enc.dense.weight")?;
    let b = bound.r("enc.dense.bias")?;
    h = tape.affine(h, w, b)?;
    h = norm_layer(tape, bound, "enc.bn_dense", h, mode, &mut stats)?;
    h = activate(tape, h, arch.hidden_activation);
    h = tape.dropout(h, arch.dropout_rate, rng, mode)?;

    let mu = {
        let w = bound.r("enc.head_mu.weight")?;
        let b = bound.r("enc.head_mu.bias")?;
        tape.affine(h, w, b)?
    };
    let log_sigma = {
        let w = bound.r("enc.head_log_sigma.weight")?;
        let b = bound.r("enc.head_log_sigma.bias")?;
        let raw = tape.affine(h, w, b)?;
        tape.clamp(raw, LOG_SIGMA_RANGE.0, LOG_SIGMA_RANGE.1)
    };
    Ok(EncoderOutput {
        mu,
        log_sigma,
        bn_stats: stats,
    })
}

/// Maps latent codes [N, latent] back to volumes [N,1,D,H,W] in (0,1).
pub fn decoder_forward(
    tape: &mut Tape<f32>,
    bound: &BoundModel,
    arch: &ArchitectureConfig,
    z: TensorRef,
    mode: Mode,
    rng: &mut RngStream,
) -> Result<DecoderOutput, ModelError> {
    let mut stats = Vec::new();
    let pad = (arch.kernel_size - 1) / 2;
    let mut h = z;
    {
        let w = bound.r("dec.dense0.weight")?;
        let b = bound.r("dec.dense0.bias")?;
        h = tape.affine(h, w, b)?;
        h = norm_layer(tape, bound, "dec.bn_dense0", h, mode, &mut stats)?;
        h = activate(tape, h, arch.hidden_activation);
        h = tape.dropout(h, arch.dropout_rate, rng, mode)?;
    }
    {
        let w = bound.r("dec.dense1.weight")?;
        let b = bound.r("dec.dense1.bias")?;
        h = tape.affine(h, w, b)?;
        h = norm_layer(tape, bound, "dec.bn_dense1", h, mode, &mut stats)?;
        h = activate(tape, h, arch.hidden_activation);
    }
    let n = tape.shape(h)[0];
    let [gd, gh, gw] = arch.pre_dense_grid();
    let c_last = *arch.conv_channels.last().unwrap();
    h = tape.reshape(h, vec![n, c_last, gd, gh, gw])?;
    let stages = arch.stages();
    for i in 0..stages {
        h = tape.upsample3d_nearest(h, 2)?;
        let w = bound.r(&format!("dec.deconv{i}.weight"))?;
        let b = bound.r(&format!("dec.deconv{i}.bias"))?;
        h = tape.conv3d_transpose(h, w, b, 1, pad)?;
        if i + 1 != stages {
            h = norm_layer(tape, bound, &format!("dec.bn_deconv{i}"), h, mode, &mut stats)?;
            h = activate(tape, h, arch.hidden_activation);
        }
    }
    let logits = h;
    let output = tape.sigmoid(logits);
    Ok(DecoderOutput {
        output,
        logits,
        bn_stats: stats,
    })
}

/// z = mu + exp(clamped log_sigma) * eps with eps drawn once from the stream;
/// gradient flows to mu and log_sigma, never to eps.
pub fn reparameterize(
    tape: &mut Tape<f32>,
    mu: TensorRef,
    log_sigma: TensorRef,
    rng: &mut RngStream,
) -> Result<TensorRef, ModelError> {
    let shape = tape.shape(mu).to_vec();
    let n: usize = shape.iter().product();
    let eps_data: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
    let eps = tape.constant_from(shape, eps_data)?;
    let clamped = tape.clamp(log_sigma, LOG_SIGMA_RANGE.0, LOG_SIGMA_RANGE.1);
    let sigma = tape.exp(clamped);
    let noise = tape.mul(sigma, eps)?;
    Ok(tape.add(mu, noise)?)
}

/// Applies collected batch statistics to the store's running estimates,
/// restricted to one component's layers (or both).
pub fn apply_bn_updates(
    store: &mut ParameterStore,
    stats: &[(String, BatchStats<f32>)],
    component: Option<Component>,
) {
    for (bn, batch) in stats {
        let comp = if bn.starts_with("enc.") {
            Component::Encoder
        } else {
            Component::Decoder
        };
        if let Some(only) = component {
            if comp != only {
                continue;
            }
        }
        if let Some(entry) = store.get_mut(&format!("{bn}.run_mean")) {
            for (r, &m) in entry.tensor.data.iter_mut().zip(&batch.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
        }
        if let Some(entry) = store.get_mut(&format!("{bn}.run_var")) {
            for (r, &v) in entry.tensor.data.iter_mut().zip(&batch.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
}
