//! Loss algebra: diagonal-Gaussian KL against the standard normal, the
//! reconstruction term, the combined autoencoder objective, the adversarial
//! encoder/generator losses, and the two-player objective diagnostic.

use neurovol_tensor::tape::BatchStats;
use neurovol_tensor::{Mode, RngStream, Tape, TensorRef};

use crate::config::{ArchitectureConfig, ReconLossKind, TrainConfig};
use crate::net::{decoder_forward, encoder_forward, reparameterize, BoundModel};
use crate::ModelError;

/// Closed-form KL( N(mu, diag sigma^2) || N(0, I) ) =
/// 0.5 * sum_i (mu_i^2 + sigma_i^2 - 1 - 2 log sigma_i). Always >= 0.
pub fn kl_divergence(mu: &[f64], log_sigma: &[f64]) -> f64 {
    debug_assert_eq!(mu.len(), log_sigma.len());
    let mut acc = 0.0;
    for (&m, &ls) in mu.iter().zip(log_sigma) {
        let s2 = (2.0 * ls).exp();
        acc += m * m + s2 - 1.0 - 2.0 * ls;
    }
    0.5 * acc
}

pub fn kl_divergence_f32(mu: &[f32], log_sigma: &[f32]) -> f64 {
    let mu64: Vec<f64> = mu.iter().map(|&v| v as f64).collect();
    let ls64: Vec<f64> = log_sigma.iter().map(|&v| v as f64).collect();
    kl_divergence(&mu64, &ls64)
}

/// Mean squared error between two equal-shape value slices.
pub fn reconstruction_loss(x: &[f32], x_hat: &[f32]) -> Result<f64, ModelError> {
    if x.len() != x_hat.len() {
        return Err(ModelError::Config(format!(
            "reconstruction operands differ in length: {} vs {}",
            x.len(),
            x_hat.len()
        )));
    }
    let mut acc = 0.0f64;
    for (&a, &b) in x.iter().zip(x_hat) {
        let d = (a - b) as f64;
        acc += d * d;
    }
    Ok(acc / x.len() as f64)
}

/// Value of the two-player objective: mean log d_real + mean log(1 - d_fake).
/// Probabilities must lie strictly inside (0, 1).
pub fn gan_objective_value(d_real: &[f64], d_fake: &[f64]) -> Result<f64, ModelError> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(ModelError::Config("empty probability vector".into()));
    }
    for &p in d_real.iter().chain(d_fake) {
        if !(p > 0.0 && p < 1.0) {
            return Err(ModelError::Config(format!(
                "probability {p} outside (0,1)"
            )));
        }
    }
    let real: f64 = d_real.iter().map(|&p| p.ln()).sum::<f64>() / d_real.len() as f64;
    let fake: f64 = d_fake.iter().map(|&p| (1.0 - p).ln()).sum::<f64>() / d_fake.len() as f64;
    Ok(real + fake)
}

/// Per-sample KL on the tape: [N, latent] inputs -> [N] vector.
pub fn kl_per_sample(
    tape: &mut Tape<f32>,
    mu: TensorRef,
    log_sigma: TensorRef,
) -> Result<TensorRef, ModelError> {
    let mu_sq = tape.mul(mu, mu)?;
    let two_ls = tape.scale(log_sigma, 2.0);
    let sigma_sq = tape.exp(two_ls);
    let neg_two_ls = tape.scale(log_sigma, -2.0);
    let a = tape.add(mu_sq, sigma_sq)?;
    let b = tape.add(a, neg_two_ls)?;
    let c = tape.add_scalar(b, -1.0);
    let summed = tape.row_sum(c)?;
    Ok(tape.scale(summed, 0.5))
}

/// Batch-mean KL scalar.
pub fn kl_mean(
    tape: &mut Tape<f32>,
    mu: TensorRef,
    log_sigma: TensorRef,
) -> Result<TensorRef, ModelError> {
    let per = kl_per_sample(tape, mu, log_sigma)?;
    Ok(tape.mean_all(per))
}

/// Reconstruction term on the tape. MSE consumes the sigmoid output; the
/// cross-entropy form consumes the pre-sigmoid logits for stability.
pub fn recon_term(
    tape: &mut Tape<f32>,
    kind: ReconLossKind,
    output: TensorRef,
    logits: TensorRef,
    target: TensorRef,
) -> Result<TensorRef, ModelError> {
    let r = match kind {
        ReconLossKind::Mse => tape.mse(output, target)?,
        ReconLossKind::BernoulliXent => tape.bce_with_logits(logits, target)?,
    };
    Ok(r)
}

pub struct VaeLossTerms {
    pub total: TensorRef,
    pub recon: TensorRef,
    pub kl: TensorRef,
}

/// total = recon + kl_weight * kl, with both terms exposed.
pub fn vae_loss_terms(
    tape: &mut Tape<f32>,
    kind: ReconLossKind,
    output: TensorRef,
    logits: TensorRef,
    target: TensorRef,
    mu: TensorRef,
    log_sigma: TensorRef,
    kl_weight: f64,
) -> Result<VaeLossTerms, ModelError> {
    let recon = recon_term(tape, kind, output, logits, target)?;
    let kl = kl_mean(tape, mu, log_sigma)?;
    let weighted = tape.scale(kl, kl_weight);
    let total = tape.add(recon, weighted)?;
    Ok(VaeLossTerms { total, recon, kl })
}

/// Batch-mean hinge max(0, margin - kl_i) over per-sample KL values.
pub fn hinge_below_margin(
    tape: &mut Tape<f32>,
    kl_per_sample_ref: TensorRef,
    margin: f64,
) -> Result<TensorRef, ModelError> {
    let neg = tape.scale(kl_per_sample_ref, -1.0);
    let shifted = tape.add_scalar(neg, margin);
    let hinged = tape.relu(shifted);
    Ok(tape.mean_all(hinged))
}

pub struct EncoderStepLoss {
    pub total: TensorRef,
    pub divergence_real: TensorRef,
    pub hinge: TensorRef,
    pub recon: TensorRef,
    /// Statistics from the real-data encoder pass; fake-batch passes do not
    /// feed the running estimates.
    pub bn_stats: Vec<(String, BatchStats<f32>)>,
}

/// Adversarial encoder loss
/// kl_weight * [ E(x) + max(0, m - E(G(z))) ] + recon(x), where E is the
/// posterior KL and G(z) is decoded through the (frozen on this tape) decoder.
/// Gradients reach whatever partition the binding tracks; training binds the
/// encoder only.
pub fn ivae_encoder_loss(
    tape: &mut Tape<f32>,
    bound: &BoundModel,
    arch: &ArchitectureConfig,
    x: TensorRef,
    z_prior: TensorRef,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<EncoderStepLoss, ModelError> {
    let enc_real = encoder_forward(tape, bound, arch, x, Mode::Train, rng)?;
    let e_real = kl_mean(tape, enc_real.mu, enc_real.log_sigma)?;

    let fake = decoder_forward(tape, bound, arch, z_prior, Mode::Train, rng)?;
    let enc_fake = encoder_forward(tape, bound, arch, fake.output, Mode::Train, rng)?;
    let kl_fake = kl_per_sample(tape, enc_fake.mu, enc_fake.log_sigma)?;
    let mut hinge = hinge_below_margin(tape, kl_fake, config.margin)?;
    if config.adversarial_recon_terms {
        let z = reparameterize(tape, enc_real.mu, enc_real.log_sigma, rng)?;
        let z_detached = tape.detach(z);
        let rec = decoder_forward(tape, bound, arch, z_detached, Mode::Train, rng)?;
        let enc_rec = encoder_forward(tape, bound, arch, rec.output, Mode::Train, rng)?;
        let kl_rec = kl_per_sample(tape, enc_rec.mu, enc_rec.log_sigma)?;
        let hinge_rec = hinge_below_margin(tape, kl_rec, config.margin)?;
        hinge = tape.add(hinge, hinge_rec)?;
    }

    let z = reparameterize(tape, enc_real.mu, enc_real.log_sigma, rng)?;
    let rec = decoder_forward(tape, bound, arch, z, Mode::Train, rng)?;
    let recon = recon_term(tape, config.recon_loss, rec.output, rec.logits, x)?;

    let adv = tape.add(e_real, hinge)?;
    let weighted = tape.scale(adv, config.kl_weight);
    let total = tape.add(weighted, recon)?;
    Ok(EncoderStepLoss {
        total,
        divergence_real: e_real,
        hinge,
        recon,
        bn_stats: enc_real.bn_stats,
    })
}

pub struct GeneratorStepLoss {
    pub total: TensorRef,
    pub divergence_fake: TensorRef,
    pub recon: TensorRef,
    /// Decoder-layer statistics from the fake and reconstruction passes.
    pub bn_stats: Vec<(String, BatchStats<f32>)>,
}

/// Adversarial generator loss kl_weight * E(G(z)) + recon(x); the encoder is
/// evaluated as a fixed function of the generated sample, so gradients reach
/// only the decoder partition when the binding tracks the decoder.
pub fn ivae_generator_loss(
    tape: &mut Tape<f32>,
    bound: &BoundModel,
    arch: &ArchitectureConfig,
    x: TensorRef,
    z_prior: TensorRef,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<GeneratorStepLoss, ModelError> {
    let fake = decoder_forward(tape, bound, arch, z_prior, Mode::Train, rng)?;
    let enc_fake = encoder_forward(tape, bound, arch, fake.output, Mode::Train, rng)?;
    let mut e_fake = kl_mean(tape, enc_fake.mu, enc_fake.log_sigma)?;

    let enc_real = encoder_forward(tape, bound, arch, x, Mode::Train, rng)?;
    let z = reparameterize(tape, enc_real.mu, enc_real.log_sigma, rng)?;
    let rec = decoder_forward(tape, bound, arch, z, Mode::Train, rng)?;
    if config.adversarial_recon_terms {
        let enc_rec = encoder_forward(tape, bound, arch, rec.output, Mode::Train, rng)?;
        let e_rec = kl_mean(tape, enc_rec.mu, enc_rec.log_sigma)?;
        e_fake = tape.add(e_fake, e_rec)?;
    }
    let recon = recon_term(tape, config.recon_loss, rec.output, rec.logits, x)?;

    let weighted = tape.scale(e_fake, config.kl_weight);
    let total = tape.add(weighted, recon)?;
    let bn_stats = fake
        .bn_stats
        .iter()
        .chain(rec.bn_stats.iter())
        .cloned()
        .collect();
    Ok(GeneratorStepLoss {
        total,
        divergence_fake: e_fake,
        recon,
        bn_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use neurovol_tensor::Tensor;

    #[test]
    fn kl_zero_at_standard_normal() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
    }

    #[test]
    fn kl_unit_mean_shift() {
        // mu=1, sigma=1, one dim: 0.5*(1 + 1 - 1 - 0) = 0.5
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_nonnegative_random() {
        let mut rng = neurovol_tensor::RngStream::new(2);
        for _ in 0..200 {
            let mu = [rng.uniform_in(-4.0, 4.0)];
            let ls = [rng.uniform_in(-2.0, 2.0)];
            assert!(kl_divergence(&mu, &ls) >= 0.0);
        }
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let mu_v = vec![0.3f32, -1.2, 0.0, 2.0];
        let ls_v = vec![0.1f32, -0.5, 0.0, 0.7];
        let mut tape = Tape::new();
        let mu = tape.constant(&Tensor::new(vec![2, 2], mu_v.clone()).unwrap());
        let ls = tape.constant(&Tensor::new(vec![2, 2], ls_v.clone()).unwrap());
        let kl = kl_mean(&mut tape, mu, ls).unwrap();
        let expect = (kl_divergence_f32(&mu_v[..2], &ls_v[..2])
            + kl_divergence_f32(&mu_v[2..], &ls_v[2..]))
            / 2.0;
        assert!((tape.scalar_value(kl) as f64 - expect).abs() < 1e-6);
    }

    #[test]
    fn reconstruction_examples() {
        assert_eq!(reconstruction_loss(&[0.5; 8], &[0.5; 8]).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&[0.0; 4], &[1.0; 4]).unwrap(), 1.0);
        assert!(reconstruction_loss(&[0.0; 4], &[1.0; 5]).is_err());
    }

    #[test]
    fn gan_objective_examples() {
        let v = gan_objective_value(&[0.5], &[0.5]).unwrap();
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        // approaching the supremum
        let v2 = gan_objective_value(&[0.999_999], &[1e-9]).unwrap();
        assert!(v2 > -1e-5);
        assert!(gan_objective_value(&[1.0], &[0.5]).is_err());
        assert!(gan_objective_value(&[0.5], &[0.0]).is_err());
    }

    #[test]
    fn gan_objective_matches_direct_formula() {
        let mut rng = neurovol_tensor::RngStream::new(8);
        let d_real: Vec<f64> = (0..32).map(|_| rng.uniform_in(1e-3, 1.0 - 1e-3)).collect();
        let d_fake: Vec<f64> = (0..32).map(|_| rng.uniform_in(1e-3, 1.0 - 1e-3)).collect();
        let got = gan_objective_value(&d_real, &d_fake).unwrap();
        let mut expect = 0.0;
        for &p in &d_real {
            expect += p.ln() / d_real.len() as f64;
        }
        for &p in &d_fake {
            expect += (1.0 - p).ln() / d_fake.len() as f64;
        }
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn hinge_zero_above_margin() {
        let mut tape = Tape::new();
        // per-sample KL values all above the margin
        let kl = tape.constant(&Tensor::new(vec![3], vec![12.0f32, 10.5, 30.0]).unwrap());
        let h = hinge_below_margin(&mut tape, kl, 10.0).unwrap();
        assert_eq!(tape.scalar_value(h), 0.0);
        // margin zero: hinge always zero for nonnegative KL
        let h0 = hinge_below_margin(&mut tape, kl, 0.0).unwrap();
        assert_eq!(tape.scalar_value(h0), 0.0);
        // below margin: max(0, 10 - 4) = 6
        let low = tape.constant(&Tensor::new(vec![1], vec![4.0f32]).unwrap());
        let h1 = hinge_below_margin(&mut tape, low, 10.0).unwrap();
        assert!((tape.scalar_value(h1) - 6.0).abs() < 1e-6);
    }
}
