//! Inference surfaces: encoding to latent codes, decoding, prior sampling,
//! and deterministic reconstruction.

use neurovol_tensor::{Mode, RngStream, Tape, Tensor, Volume};

use crate::config::ArchitectureConfig;
use crate::net::{decoder_forward, encoder_forward, reparameterize, BoundModel, Trainable};
use crate::params::ParameterStore;
use crate::ModelError;

/// Encoder output for one image: posterior mean, log standard deviation, and
/// one reparameterized draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f32>,
    pub log_sigma: Vec<f32>,
    pub sample: Vec<f32>,
}

fn volumes_to_batch(volumes: &[&Volume], arch: &ArchitectureConfig) -> Result<Tensor<f32>, ModelError> {
    let [dx, dy, dz] = arch.input_shape;
    let voxels = dx * dy * dz;
    let mut data = Vec::with_capacity(volumes.len() * voxels);
    for v in volumes {
        if v.shape() != (dx, dy, dz) {
            return Err(ModelError::Config(format!(
                "volume shape {:?} does not match architecture {:?}",
                v.shape(),
                arch.input_shape
            )));
        }
        data.extend_from_slice(&v.data);
    }
    Ok(Tensor::new(vec![volumes.len(), 1, dz, dy, dx], data).expect("batch shape"))
}

fn batch_to_volumes(data: &[f32], n: usize, arch: &ArchitectureConfig) -> Vec<Volume> {
    let [dx, dy, dz] = arch.input_shape;
    let voxels = dx * dy * dz;
    (0..n)
        .map(|i| {
            Volume::from_data(dx, dy, dz, data[i * voxels..(i + 1) * voxels].to_vec())
                .expect("volume shape")
        })
        .collect()
}

/// Encodes volumes in eval mode. The mean and log-sigma are deterministic;
/// the sample consumes draws from `rng`.
pub fn encode_batch(
    volumes: &[&Volume],
    store: &ParameterStore,
    arch: &ArchitectureConfig,
    rng: &mut RngStream,
) -> Result<Vec<LatentCode>, ModelError> {
    if volumes.is_empty() {
        return Ok(Vec::new());
    }
    let batch = volumes_to_batch(volumes, arch)?;
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, store, Trainable::None);
    let x = tape.constant(&batch);
    let enc = encoder_forward(&mut tape, &bound, arch, x, Mode::Eval, rng)?;
    let z = reparameterize(&mut tape, enc.mu, enc.log_sigma, rng)?;
    let latent = arch.latent_dim;
    let mu = tape.value(enc.mu);
    let ls = tape.value(enc.log_sigma);
    let zv = tape.value(z);
    Ok((0..volumes.len())
        .map(|i| LatentCode {
            mu: mu[i * latent..(i + 1) * latent].to_vec(),
            log_sigma: ls[i * latent..(i + 1) * latent].to_vec(),
            sample: zv[i * latent..(i + 1) * latent].to_vec(),
        })
        .collect())
}

pub fn encode(
    volume: &Volume,
    store: &ParameterStore,
    arch: &ArchitectureConfig,
    rng: &mut RngStream,
) -> Result<LatentCode, ModelError> {
    Ok(encode_batch(&[volume], store, arch, rng)?.remove(0))
}

/// Decodes latent vectors in eval mode (deterministic).
pub fn decode_batch(
    codes: &[&[f32]],
    store: &ParameterStore,
    arch: &ArchitectureConfig,
) -> Result<Vec<Volume>, ModelError> {
    if codes.is_empty() {
        return Ok(Vec::new());
    }
    let latent = arch.latent_dim;
    let mut data = Vec::with_capacity(codes.len() * latent);
    for c in codes {
        if c.len() != latent {
            return Err(ModelError::Config(format!(
                "latent length {} does not match architecture latent dim {latent}",
                c.len()
            )));
        }
        data.extend_from_slice(c);
    }
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, store, Trainable::None);
    let z = tape.constant_from(vec![codes.len(), latent], data)?;
    let mut rng = RngStream::new(0); // eval mode consumes no draws
    let dec = decoder_forward(&mut tape, &bound, arch, z, Mode::Eval, &mut rng)?;
    Ok(batch_to_volumes(tape.value(dec.output), codes.len(), arch))
}

pub fn decode(
    code: &[f32],
    store: &ParameterStore,
    arch: &ArchitectureConfig,
) -> Result<Volume, ModelError> {
    Ok(decode_batch(&[code], store, arch)?.remove(0))
}

/// Draws n latent vectors from the standard normal prior and decodes them.
pub fn sample_prior(
    store: &ParameterStore,
    arch: &ArchitectureConfig,
    n: usize,
    rng: &mut RngStream,
) -> Result<Vec<Volume>, ModelError> {
    let latent = arch.latent_dim;
    let codes: Vec<Vec<f32>> = (0..n)
        .map(|_| (0..latent).map(|_| rng.normal() as f32).collect())
        .collect();
    let refs: Vec<&[f32]> = codes.iter().map(|c| c.as_slice()).collect();
    decode_batch(&refs, store, arch)
}

/// Reconstructs a volume. With `use_mean` the posterior mean is decoded
/// directly and the result is deterministic; otherwise one sample is drawn.
pub fn reconstruct(
    volume: &Volume,
    store: &ParameterStore,
    arch: &ArchitectureConfig,
    use_mean: bool,
    rng: &mut RngStream,
) -> Result<Volume, ModelError> {
    let code = encode(volume, store, arch, rng)?;
    let z = if use_mean { &code.mu } else { &code.sample };
    decode(z, store, arch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::init_parameters;

    fn setup() -> (ArchitectureConfig, ParameterStore, Volume) {
        let arch = ArchitectureConfig {
            input_shape: [8, 8, 8],
            conv_channels: vec![4],
            kernel_size: 3,
            dense_width: 16,
            latent_dim: 4,
            dropout_rate: 0.2,
            hidden_activation: crate::config::Activation::Relu,
            log_sigma_bias_init: 0.0,
        };
        let store = init_parameters(&arch, 9).unwrap();
        let mut rng = RngStream::new(1);
        let data = (0..512).map(|_| rng.uniform() as f32).collect();
        let vol = Volume::from_data(8, 8, 8, data).unwrap();
        (arch, store, vol)
    }

    #[test]
    fn reconstruct_with_mean_deterministic() {
        let (arch, store, vol) = setup();
        let mut rng1 = RngStream::new(10);
        let mut rng2 = RngStream::new(999);
        let a = reconstruct(&vol, &store, &arch, true, &mut rng1).unwrap();
        let b = reconstruct(&vol, &store, &arch, true, &mut rng2).unwrap();
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn sample_prior_reproducible_and_in_range() {
        let (arch, store, _) = setup();
        let a = sample_prior(&store, &arch, 3, &mut RngStream::new(7)).unwrap();
        let b = sample_prior(&store, &arch, 3, &mut RngStream::new(7)).unwrap();
        assert_eq!(a.len(), 3);
        for (va, vb) in a.iter().zip(&b) {
            assert_eq!(va.data, vb.data);
            assert_eq!(va.shape(), (8, 8, 8));
            let (lo, hi) = va.min_max();
            assert!(lo > 0.0 && hi < 1.0);
        }
    }

    #[test]
    fn latent_length_mismatch_rejected() {
        let (arch, store, _) = setup();
        assert!(decode(&[0.0; 5], &store, &arch).is_err());
        assert!(decode(&[0.0; 4], &store, &arch).is_ok());
    }

    #[test]
    fn latent_code_sample_consistent() {
        let (arch, store, vol) = setup();
        let code = encode(&vol, &store, &arch, &mut RngStream::new(3)).unwrap();
        // z = mu + exp(log_sigma) * eps stays finite and near mu for small sigma
        assert_eq!(code.mu.len(), 4);
        assert!(code.sample.iter().all(|v| v.is_finite()));
    }
}
