//! Pipeline-level checks: paper-scale dimensions, oracle comparisons for the
//! clamp/normalize path, streaming-mean equivalence, and percentile
//! monotonicity.

use neurovol_preprocess::*;
use neurovol_tensor::{RngStream, Volume};
use proptest::prelude::*;

fn random_volume(dx: usize, dy: usize, dz: usize, seed: u64, lo: f64, hi: f64) -> Volume {
    let mut rng = RngStream::new(seed);
    let data = (0..dx * dy * dz)
        .map(|_| rng.uniform_in(lo, hi) as f32)
        .collect();
    Volume::from_data(dx, dy, dz, data).unwrap()
}

/// Straight-line reimplementation of clamp + normalize, kept independent of
/// the library path it checks.
fn normalize_oracle(data: &[f32], q: f64) -> Vec<f32> {
    let mut sorted = data.to_vec();
    sorted.sort_by(f32::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo_i = rank.floor() as usize;
    let frac = rank - lo_i as f64;
    let thr = if frac == 0.0 || lo_i + 1 == sorted.len() {
        sorted[lo_i] as f64
    } else {
        sorted[lo_i] as f64 * (1.0 - frac) + sorted[lo_i + 1] as f64 * frac
    } as f32;
    let clamped: Vec<f32> = data.iter().map(|&v| v.min(thr)).collect();
    let min = clamped.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = clamped.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if max as f64 <= 1e-12 {
        return vec![0.0; data.len()];
    }
    clamped.iter().map(|&v| (v - min) / max).collect()
}

#[test]
fn full_pipeline_paper_dimensions() {
    // 182x218x182 raw -> trim 160x192x160 -> downsample 40x48x40, all in [0,1]
    let raw = random_volume(182, 218, 182, 20, 0.0, 400.0);
    let config = PreprocessConfig::default();
    let trimmed = trim_center(&raw, (160, 192, 160)).unwrap();
    assert_eq!(trimmed.shape(), (160, 192, 160));
    let small = downsample_avg(&trimmed, 4).unwrap();
    assert_eq!(small.shape(), (40, 48, 40));
    // block averaging preserves the global mean
    assert!((small.mean() - trimmed.mean()).abs() < 1e-6);

    let (out, report) = run_pipeline(&raw, &config).unwrap();
    assert_eq!(out.shape(), (40, 48, 40));
    let (lo, hi) = out.min_max();
    assert!(lo >= 0.0 && hi <= 1.0);
    assert_eq!(report.trim_target, Some([160, 192, 160]));
    assert_eq!(report.block, Some(4));
}

#[test]
fn normalize_matches_oracle_with_outlier() {
    // distinct values 0..999 plus one large outlier; clamp threshold lands
    // inside the bulk, min stays 0 so the output maximum is exactly 1
    let mut data: Vec<f32> = (0..1000).map(|i| i as f32).collect();
    data.push(100_000.0);
    let v = Volume::from_data(7, 11, 13, data.clone()).unwrap();
    let (out, report) = bound_and_normalize(&v, 99.5).unwrap();
    let expect = normalize_oracle(&data, 99.5);
    for (a, b) in out.data.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-7);
    }
    let (_, hi) = out.min_max();
    assert_eq!(hi, 1.0);
    assert!(report.clamp_threshold < 1000.0);

    // all-equal bulk plus outlier: threshold equals the bulk value, the
    // clamped volume is constant, and the formula sends everything to zero
    let mut flat = vec![1.0f32; 1000];
    flat.push(100.0);
    let v2 = Volume::from_data(7, 11, 13, flat.clone()).unwrap();
    let (out2, _) = bound_and_normalize(&v2, 99.5).unwrap();
    assert!(out2.data.iter().all(|&x| x == 0.0));
    assert_eq!(out2.data, normalize_oracle(&flat, 99.5));
}

#[test]
fn normalize_matches_oracle_random() {
    for seed in [3u64, 5, 8, 13] {
        let v = random_volume(9, 8, 7, seed, 0.0, 50.0);
        let (out, _) = bound_and_normalize(&v, 99.5).unwrap();
        let expect = normalize_oracle(&v.data, 99.5);
        for (a, b) in out.data.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-7);
        }
    }
}

#[test]
fn streaming_mean_equals_two_pass() {
    let vols: Vec<Volume> = (0..7)
        .map(|i| random_volume(6, 5, 4, 100 + i, 0.0, 1.0))
        .collect();
    let streamed = mean_volume(vols.iter()).unwrap();
    // two-pass oracle: sum everything as f64 up front
    let n = vols.len() as f64;
    for idx in 0..streamed.data.len() {
        let batch: f64 = vols.iter().map(|v| v.data[idx] as f64).sum::<f64>() / n;
        assert!((streamed.data[idx] as f64 - batch).abs() < 1e-6);
    }
}

#[test]
fn blurring_reduces_sharpness() {
    // structured volume: bright ellipsoid on dark background
    let (dx, dy, dz) = (24, 24, 24);
    let mut v = Volume::zeros(dx, dy, dz);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let u = (x as f64 - 12.0) / 8.0;
                let w = (y as f64 - 12.0) / 8.0;
                let s = (z as f64 - 12.0) / 8.0;
                if u * u + w * w + s * s <= 1.0 {
                    v.set(x, y, z, 0.8);
                }
            }
        }
    }
    // 3^3 box filter
    let mut blurred = Volume::zeros(dx, dy, dz);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let mut acc = 0.0f64;
                let mut n = 0;
                for oz in -1i32..=1 {
                    for oy in -1i32..=1 {
                        for ox in -1i32..=1 {
                            let (nx, ny, nz) = (x as i32 + ox, y as i32 + oy, z as i32 + oz);
                            if nx >= 0
                                && ny >= 0
                                && nz >= 0
                                && (nx as usize) < dx
                                && (ny as usize) < dy
                                && (nz as usize) < dz
                            {
                                acc += v.get(nx as usize, ny as usize, nz as usize) as f64;
                                n += 1;
                            }
                        }
                    }
                }
                blurred.set(x, y, z, (acc / n as f64) as f32);
            }
        }
    }
    assert!(sharpness_score(&blurred) < sharpness_score(&v));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn percentile_monotone_in_q(seed in 0u64..500, qa in 0.0f64..100.0, qb in 0.0f64..100.0) {
        let v = random_volume(5, 4, 3, seed, -10.0, 10.0);
        let (qlo, qhi) = if qa <= qb { (qa, qb) } else { (qb, qa) };
        let plo = percentile(&v.data, qlo).unwrap();
        let phi = percentile(&v.data, qhi).unwrap();
        prop_assert!(plo <= phi + 1e-12);
    }

    #[test]
    fn normalized_output_in_unit_interval(seed in 0u64..500, hi in 0.5f64..300.0) {
        let v = random_volume(6, 5, 4, seed, 0.0, hi);
        let (out, _) = bound_and_normalize(&v, 99.5).unwrap();
        let (lo, max) = out.min_max();
        prop_assert!(lo >= 0.0);
        prop_assert!(max <= 1.0);
    }
}
