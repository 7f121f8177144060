//! Named, shaped parameter tensors for the encoder and decoder partitions.

use std::collections::HashMap;

use neurovol_tensor::{derive_seed, RngStream, Tensor};

use crate::config::ArchitectureConfig;
use crate::ModelError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized by gradient descent.
    Weight,
    /// Updated outside the optimizer (batch-norm running statistics).
    State,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub component: Component,
    pub kind: ParamKind,
    pub tensor: Tensor<f32>,
}

/// Ordered name -> tensor map; registration order is fixed by construction,
/// which keeps checkpoints and optimizer sweeps deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn push(&mut self, entry: ParamEntry) -> Result<(), ModelError> {
        if self.index.contains_key(&entry.name) {
            return Err(ModelError::Config(format!(
                "duplicate parameter name {}",
                entry.name
            )));
        }
        self.index.insert(entry.name.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>, ModelError> {
        self.get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| ModelError::Config(format!("unknown parameter {name}")))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bitwise equality of one component's entries (weights and state).
    pub fn component_equal(&self, other: &ParameterStore, component: Component) -> bool {
        let mine: Vec<_> = self
            .entries
            .iter()
            .filter(|e| e.component == component)
            .collect();
        let theirs: Vec<_> = other
            .entries
            .iter()
            .filter(|e| e.component == component)
            .collect();
        if mine.len() != theirs.len() {
            return false;
        }
        mine.iter().zip(theirs).all(|(a, b)| {
            a.name == b.name
                && a.tensor.shape == b.tensor.shape
                && a.tensor.data.iter().zip(&b.tensor.data).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

fn glorot(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor<f32> {
    Tensor::glorot_uniform(shape, fan_in, fan_out, rng)
}

fn push_conv(
    store: &mut ParameterStore,
    name: &str,
    component: Component,
    c_out: usize,
    c_in: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<(), ModelError> {
    let fan_in = c_in * k * k * k;
    let fan_out = c_out * k * k * k;
    store.push(ParamEntry {
        name: format!("{name}.weight"),
        component,
        kind: ParamKind::Weight,
        tensor: glorot(vec![c_out, c_in, k, k, k], fan_in, fan_out, rng),
    })?;
    store.push(ParamEntry {
        name: format!("{name}.bias"),
        component,
        kind: ParamKind::Weight,
        tensor: Tensor::zeros(vec![c_out]),
    })
}

fn push_deconv(
    store: &mut ParameterStore,
    name: &str,
    f_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut RngStream,
) -> Result<(), ModelError> {
    // kernel shape [F, C, k, k, k]: maps F input channels to C output channels
    let fan_in = f_in * k * k * k;
    let fan_out = c_out * k * k * k;
    store.push(ParamEntry {
        name: format!("{name}.weight"),
        component: Component::Decoder,
        kind: ParamKind::Weight,
        tensor: glorot(vec![f_in, c_out, k, k, k], fan_in, fan_out, rng),
    })?;
    store.push(ParamEntry {
        name: format!("{name}.bias"),
        component: Component::Decoder,
        kind: ParamKind::Weight,
        tensor: Tensor::zeros(vec![c_out]),
    })
}

fn push_affine(
    store: &mut ParameterStore,
    name: &str,
    component: Component,
    rows: usize,
    cols: usize,
    rng: &mut RngStream,
) -> Result<(), ModelError> {
    store.push(ParamEntry {
        name: format!("{name}.weight"),
        component,
        kind: ParamKind::Weight,
        tensor: glorot(vec![rows, cols], rows, cols, rng),
    })?;
    store.push(ParamEntry {
        name: format!("{name}.bias"),
        component,
        kind: ParamKind::Weight,
        tensor: Tensor::zeros(vec![cols]),
    })
}

fn push_bn(
    store: &mut ParameterStore,
    name: &str,
    component: Component,
    ch: usize,
) -> Result<(), ModelError> {
    store.push(ParamEntry {
        name: format!("{name}.gamma"),
        component,
        kind: ParamKind::Weight,
        tensor: Tensor::full(vec![ch], 1.0),
    })?;
    store.push(ParamEntry {
        name: format!("{name}.beta"),
        component,
        kind: ParamKind::Weight,
        tensor: Tensor::zeros(vec![ch]),
    })?;
    store.push(ParamEntry {
        name: format!("{name}.run_mean"),
        component,
        kind: ParamKind::State,
        tensor: Tensor::zeros(vec![ch]),
    })?;
    store.push(ParamEntry {
        name: format!("{name}.run_var"),
        component,
        kind: ParamKind::State,
        tensor: Tensor::full(vec![ch], 1.0),
    })
}

/// Builds the full parameter set for an architecture; encoder and decoder
/// draw from independent derived streams so either can be rebuilt alone.
pub fn init_parameters(arch: &ArchitectureConfig, seed: u64) -> Result<ParameterStore, ModelError> {
    arch.validate()?;
    let mut store = ParameterStore::default();
    let k = arch.kernel_size;
    let mut rng_enc = RngStream::new(derive_seed(seed, 1));
    let mut rng_dec = RngStream::new(derive_seed(seed, 2));

    // encoder: conv stages then dense trunk and heads
    let mut c_in = 1;
    for (i, &c_out) in arch.conv_channels.iter().enumerate() {
        push_conv(&mut store, &format!("enc.conv{i}"), Component::Encoder, c_out, c_in, k, &mut rng_enc)?;
        push_bn(&mut store, &format!("enc.bn{i}"), Component::Encoder, c_out)?;
        c_in = c_out;
    }
    let flat = arch.flat_dim();
    push_affine(&mut store, "enc.dense", Component::Encoder, flat, arch.dense_width, &mut rng_enc)?;
    push_bn(&mut store, "enc.bn_dense", Component::Encoder, arch.dense_width)?;
    push_affine(&mut store, "enc.head_mu", Component::Encoder, arch.dense_width, arch.latent_dim, &mut rng_enc)?;
    push_affine(
        &mut store,
        "enc.head_log_sigma",
        Component::Encoder,
        arch.dense_width,
        arch.latent_dim,
        &mut rng_enc,
    )?;
    if arch.log_sigma_bias_init != 0.0 {
        store.get_mut("enc.head_log_sigma.bias").unwrap().tensor =
            Tensor::full(vec![arch.latent_dim], arch.log_sigma_bias_init as f32);
    }

    // decoder: dense trunk back up, then mirrored transpose-conv stages
    push_affine(&mut store, "dec.dense0", Component::Decoder, arch.latent_dim, arch.dense_width, &mut rng_dec)?;
    push_bn(&mut store, "dec.bn_dense0", Component::Decoder, arch.dense_width)?;
    push_affine(&mut store, "dec.dense1", Component::Decoder, arch.dense_width, flat, &mut rng_dec)?;
    push_bn(&mut store, "dec.bn_dense1", Component::Decoder, flat)?;
    let stages = arch.stages();
    for i in 0..stages {
        // stage i consumes the channels of encoder stage (stages-1-i)
        let f_in = arch.conv_channels[stages - 1 - i];
        let c_out = if i + 1 == stages {
            1
        } else {
            arch.conv_channels[stages - 2 - i]
        };
        push_deconv(&mut store, &format!("dec.deconv{i}"), f_in, c_out, k, &mut rng_dec)?;
        if i + 1 != stages {
            push_bn(&mut store, &format!("dec.bn_deconv{i}"), Component::Decoder, c_out)?;
        }
    }
    Ok(store)
}
