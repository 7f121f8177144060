//! Volume preprocessing: percentile bounding, normalization to [0,1],
//! centered trimming, block-average downsampling, and the mean-image
//! sharpness quality measure.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use neurovol_tensor::ops::avg_pool3d_forward;
use neurovol_tensor::Volume;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("empty input")]
    EmptyInput,

    #[error("percentile q must lie in [0,100], got {0}")]
    BadQuantile(f64),

    #[error("volume contains non-finite voxels")]
    NonFinite,

    #[error("trim target {target} exceeds source extent {extent} on axis {axis}")]
    TrimTooLarge {
        axis: &'static str,
        target: usize,
        extent: usize,
    },

    #[error("extent {extent} on axis {axis} is not divisible by block {block}")]
    NotDivisible {
        axis: &'static str,
        extent: usize,
        block: usize,
    },

    #[error("volume shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize, usize), (usize, usize, usize)),
}

pub type Result<T> = std::result::Result<T, PreprocessError>;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct VolumeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl VolumeStats {
    fn of(v: &Volume) -> Self {
        let (lo, hi) = v.min_max();
        VolumeStats {
            min: lo as f64,
            max: hi as f64,
            mean: v.mean(),
        }
    }
}

/// Per-volume record of what the pipeline did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub clamp_threshold: f64,
    pub pre: VolumeStats,
    pub post: VolumeStats,
    pub percentile_q: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim_target: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block: Option<usize>,
}

/// Pipeline parameters. Defaults follow the standard recipe:
/// trim to 160x192x160, average over 4^3 blocks, clamp at the 99.5 percentile.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PreprocessConfig {
    pub trim_target: [usize; 3],
    pub block: usize,
    pub percentile_q: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            trim_target: [160, 192, 160],
            block: 4,
            percentile_q: 99.5,
        }
    }
}

/// Linear-interpolation percentile at rank q/100 * (n-1).
pub fn percentile(values: &[f32], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(PreprocessError::EmptyInput);
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(PreprocessError::BadQuantile(q));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        return Ok(sorted[lo] as f64);
    }
    Ok(sorted[lo] as f64 * (1.0 - frac) + sorted[lo + 1] as f64 * frac)
}

/// Clamps voxels above the q-percentile to that threshold, then maps through
/// (x - min) / max with min and max taken from the clamped volume. A clamped
/// maximum at or below 1e-12 yields an all-zero volume.
pub fn bound_and_normalize(volume: &Volume, q: f64) -> Result<(Volume, PreprocessReport)> {
    if !volume.all_finite() {
        return Err(PreprocessError::NonFinite);
    }
    let pre = VolumeStats::of(volume);
    let threshold = percentile(&volume.data, q)?;
    let thr = threshold as f32;
    let mut clamped: Vec<f32> = volume.data.iter().map(|&v| v.min(thr)).collect();
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in &clamped {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    if hi as f64 <= 1e-12 {
        for v in &mut clamped {
            *v = 0.0;
        }
    } else {
        for v in &mut clamped {
            *v = (*v - lo) / hi;
        }
    }
    let out = Volume {
        dx: volume.dx,
        dy: volume.dy,
        dz: volume.dz,
        data: clamped,
    };
    let report = PreprocessReport {
        clamp_threshold: threshold,
        pre,
        post: VolumeStats::of(&out),
        percentile_q: q,
        trim_target: None,
        block: None,
    };
    Ok((out, report))
}

/// Centered crop. Odd margins drop the extra voxel from the high-index side.
pub fn trim_center(volume: &Volume, target: (usize, usize, usize)) -> Result<Volume> {
    let (tx, ty, tz) = target;
    for (axis, t, s) in [
        ("x", tx, volume.dx),
        ("y", ty, volume.dy),
        ("z", tz, volume.dz),
    ] {
        if t > s {
            return Err(PreprocessError::TrimTooLarge {
                axis,
                target: t,
                extent: s,
            });
        }
    }
    let (ox, oy, oz) = (
        (volume.dx - tx) / 2,
        (volume.dy - ty) / 2,
        (volume.dz - tz) / 2,
    );
    let mut out = Volume::zeros(tx, ty, tz);
    for z in 0..tz {
        for y in 0..ty {
            let src = volume.index(ox, oy + y, oz + z);
            let dst = out.index(0, y, z);
            out.data[dst..dst + tx].copy_from_slice(&volume.data[src..src + tx]);
        }
    }
    Ok(out)
}

/// Block-average downsampling; each output voxel is the mean of a block^3 cube.
pub fn downsample_avg(volume: &Volume, block: usize) -> Result<Volume> {
    for (axis, e) in [("x", volume.dx), ("y", volume.dy), ("z", volume.dz)] {
        if block == 0 || e % block != 0 {
            return Err(PreprocessError::NotDivisible {
                axis,
                extent: e,
                block,
            });
        }
    }
    let shape = [1, 1, volume.dz, volume.dy, volume.dx];
    let data = avg_pool3d_forward(&volume.data, &shape, block);
    Volume::from_data(volume.dx / block, volume.dy / block, volume.dz / block, data)
        .map_err(|_| PreprocessError::EmptyInput)
}

/// Voxelwise mean over a stream of same-shape volumes; memory stays constant
/// in the number of volumes.
pub fn mean_volume<'a, I>(volumes: I) -> Result<Volume>
where
    I: IntoIterator<Item = &'a Volume>,
{
    let mut iter = volumes.into_iter();
    let first = iter.next().ok_or(PreprocessError::EmptyInput)?;
    let shape = first.shape();
    let mut acc: Vec<f64> = first.data.iter().map(|&v| v as f64).collect();
    let mut count = 1usize;
    for v in iter {
        if v.shape() != shape {
            return Err(PreprocessError::ShapeMismatch(shape, v.shape()));
        }
        for (a, &x) in acc.iter_mut().zip(&v.data) {
            *a += x as f64;
        }
        count += 1;
    }
    let inv = 1.0 / count as f64;
    let data = acc.iter().map(|&a| (a * inv) as f32).collect();
    Volume::from_data(shape.0, shape.1, shape.2, data).map_err(|_| PreprocessError::EmptyInput)
}

/// Mean absolute forward difference per axis (x, y, z order).
pub fn sharpness_by_axis(volume: &Volume) -> [f64; 3] {
    let (dx, dy, dz) = volume.shape();
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for z in 0..dz {
        for y in 0..dy {
            let row = volume.index(0, y, z);
            for x in 0..dx.saturating_sub(1) {
                sums[0] += (volume.data[row + x + 1] - volume.data[row + x]).abs() as f64;
            }
        }
    }
    counts[0] = dx.saturating_sub(1) * dy * dz;
    for z in 0..dz {
        for y in 0..dy.saturating_sub(1) {
            let row = volume.index(0, y, z);
            let next = volume.index(0, y + 1, z);
            for x in 0..dx {
                sums[1] += (volume.data[next + x] - volume.data[row + x]).abs() as f64;
            }
        }
    }
    counts[1] = dx * dy.saturating_sub(1) * dz;
    for z in 0..dz.saturating_sub(1) {
        for y in 0..dy {
            let row = volume.index(0, y, z);
            let next = volume.index(0, y, z + 1);
            for x in 0..dx {
                sums[2] += (volume.data[next + x] - volume.data[row + x]).abs() as f64;
            }
        }
    }
    counts[2] = dx * dy * dz.saturating_sub(1);
    let mut out = [0.0; 3];
    for i in 0..3 {
        if counts[i] > 0 {
            out[i] = sums[i] / counts[i] as f64;
        }
    }
    out
}

/// Image-sharpness quality measure: mean of the three per-axis gradient
/// magnitudes. Higher is sharper.
pub fn sharpness_score(volume: &Volume) -> f64 {
    let by_axis = sharpness_by_axis(volume);
    (by_axis[0] + by_axis[1] + by_axis[2]) / 3.0
}

/// Full pipeline: trim -> downsample -> bound and normalize.
pub fn run_pipeline(volume: &Volume, config: &PreprocessConfig) -> Result<(Volume, PreprocessReport)> {
    let [tx, ty, tz] = config.trim_target;
    let trimmed = trim_center(volume, (tx, ty, tz))?;
    let small = downsample_avg(&trimmed, config.block)?;
    let (out, mut report) = bound_and_normalize(&small, config.percentile_q)?;
    report.trim_target = Some(config.trim_target);
    report.block = Some(config.block);
    Ok((out, report))
}
