//! Latent-dimension traversal: decode z = value * e_dim with every other
//! coordinate at zero.

use neurovol_tensor::Volume;

use crate::AnalysisError;

/// Decodes one volume per value along latent axis `dim`. The decoder is
/// passed in as a closure so any model backend can drive it.
pub fn latent_traversal<F, E>(
    mut decode: F,
    latent_dim: usize,
    dim: usize,
    values: &[f64],
) -> Result<Vec<Volume>, AnalysisError>
where
    F: FnMut(&[f32]) -> Result<Volume, E>,
    E: std::fmt::Display,
{
    if dim >= latent_dim {
        return Err(AnalysisError::Invalid(format!(
            "dimension {dim} out of range for latent size {latent_dim}"
        )));
    }
    let mut out = Vec::with_capacity(values.len());
    for &v in values {
        let mut z = vec![0.0f32; latent_dim];
        z[dim] = v as f32;
        let vol = decode(&z).map_err(|e| AnalysisError::Invalid(format!("decode failed: {e}")))?;
        out.push(vol);
    }
    Ok(out)
}
