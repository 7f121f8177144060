//! Deterministic phantom volume generation, dataset assembly, and the
//! patient-level train/test split.
//!
//! Seed derivation: patient seeds come from `derive_seed(master, patient_idx)`,
//! per-image seeds from `derive_seed(patient_seed, 1 + image_idx)`, and the
//! per-patient image count from a stream seeded with
//! `derive_seed(patient_seed, 0)`. Every draw order is fixed, so a dataset is
//! a pure function of (config, master seed).

use std::path::Path;

use neurovol_tensor::{derive_seed, RngStream, Volume};

use crate::config::*;
use crate::manifest::{ClassLabel, DatasetManifest, ImageRecord, Metadata, Split};
use crate::PhantomError;

/// One generated image: the volume plus its acquisition metadata and the
/// number of focal lesions actually placed.
#[derive(Debug, Clone)]
pub struct PhantomSample {
    pub volume: Volume,
    pub metadata: Metadata,
    pub lesion_count: u32,
}

struct Jitter {
    scale: [f64; 3],
    shift: [f64; 3],
    rot_z: f64,
}

impl Jitter {
    fn draw(rng: &mut RngStream, params: &JitterParams, extents: [f64; 3]) -> Self {
        let mut scale = [1.0; 3];
        for s in &mut scale {
            *s = 1.0 + rng.uniform_in(-params.scale, params.scale);
        }
        let mut shift = [0.0; 3];
        for (sh, e) in shift.iter_mut().zip(extents) {
            *sh = rng.uniform_in(-params.shift, params.shift) * e;
        }
        let rot_z = rng.uniform_in(-params.rotation_rad, params.rotation_rad);
        Jitter {
            scale,
            shift,
            rot_z,
        }
    }

    /// Maps an output voxel position back into anatomy coordinates.
    fn pull_back(&self, p: [f64; 3], center: [f64; 3]) -> [f64; 3] {
        let v = [
            p[0] - center[0] - self.shift[0],
            p[1] - center[1] - self.shift[1],
            p[2] - center[2] - self.shift[2],
        ];
        let (sin, cos) = self.rot_z.sin_cos();
        let rx = cos * v[0] + sin * v[1];
        let ry = -sin * v[0] + cos * v[1];
        [
            rx / self.scale[0] + center[0],
            ry / self.scale[1] + center[1],
            v[2] / self.scale[2] + center[2],
        ]
    }
}

struct Lesion {
    center: [f64; 3],
    radius: f64,
    intensity: f64,
}

struct Anatomy {
    center: [f64; 3],
    brain_semi: [f64; 3],
    vent_centers: [[f64; 3]; 2],
    vent_semi: [f64; 3],
}

impl Anatomy {
    fn for_shape(shape: [usize; 3]) -> Self {
        let center = [
            shape[0] as f64 / 2.0,
            shape[1] as f64 / 2.0,
            shape[2] as f64 / 2.0,
        ];
        let brain_semi = [
            BRAIN_SEMI_FRAC[0] * shape[0] as f64,
            BRAIN_SEMI_FRAC[1] * shape[1] as f64,
            BRAIN_SEMI_FRAC[2] * shape[2] as f64,
        ];
        let vent_semi = [
            VENT_SEMI_FRAC[0] * brain_semi[0],
            VENT_SEMI_FRAC[1] * brain_semi[1],
            VENT_SEMI_FRAC[2] * brain_semi[2],
        ];
        let off = VENT_OFFSET_X * brain_semi[0];
        let vent_centers = [
            [center[0] - off, center[1], center[2]],
            [center[0] + off, center[1], center[2]],
        ];
        Anatomy {
            center,
            brain_semi,
            vent_centers,
            vent_semi,
        }
    }

    fn min_semi(&self) -> f64 {
        self.brain_semi[0].min(self.brain_semi[1]).min(self.brain_semi[2])
    }

    /// Normalized squared radius inside the brain ellipsoid (<= 1 inside).
    fn brain_e(&self, q: [f64; 3]) -> f64 {
        let mut e = 0.0;
        for i in 0..3 {
            let d = (q[i] - self.center[i]) / self.brain_semi[i];
            e += d * d;
        }
        e
    }

    /// Normalized radius relative to the nearest ventricle lobe (1 at surface).
    fn ventricle_rho(&self, q: [f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        for lc in &self.vent_centers {
            let mut e = 0.0;
            for i in 0..3 {
                let d = (q[i] - lc[i]) / self.vent_semi[i];
                e += d * d;
            }
            if e < best {
                best = e;
            }
        }
        best.sqrt()
    }
}

fn smooth01(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Smooth 0 -> 1 ramp of one voxel width centered on `x0`, in units where
/// `half_width` is half a voxel. Models partial-volume averaging at tissue
/// boundaries; without it sub-voxel jitter flips boundary voxels binarily.
fn edge_blend(x: f64, x0: f64, half_width: f64) -> f64 {
    smooth01((x - x0 + half_width) / (2.0 * half_width))
}

fn unit_sphere_dir(rng: &mut RngStream) -> [f64; 3] {
    loop {
        let v = [rng.normal(), rng.normal(), rng.normal()];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-9 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Focal lesion centers sit just outside a ventricle lobe surface, inside the
/// white-matter shell.
fn place_lesions(
    rng: &mut RngStream,
    anatomy: &Anatomy,
    params: &FocalLesionParams,
) -> Vec<Lesion> {
    let count = if params.count_range.0 == params.count_range.1 {
        params.count_range.0
    } else {
        rng.uniform_range_inclusive(params.count_range.0, params.count_range.1)
    };
    let min_semi = anatomy.min_semi();
    let mut lesions = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let radius = rng.uniform_in(params.radius_range.0, params.radius_range.1) * min_semi;
        let intensity = rng.uniform_in(params.intensity_range.0, params.intensity_range.1);
        let mut center = anatomy.center;
        for _try in 0..64 {
            let lobe = rng.uniform_usize(2);
            let dir = unit_sphere_dir(rng);
            // distance along dir to the lobe surface
            let mut denom = 0.0;
            for i in 0..3 {
                let d = dir[i] / anatomy.vent_semi[i];
                denom += d * d;
            }
            let t_surface = 1.0 / denom.sqrt();
            let push = rng.uniform_in(1.15, 1.55);
            let lc = anatomy.vent_centers[lobe];
            center = [
                lc[0] + dir[0] * t_surface * push,
                lc[1] + dir[1] * t_surface * push,
                lc[2] + dir[2] * t_surface * push,
            ];
            let inside_wm = anatomy.brain_e(center) < 0.70 * GM_INNER;
            let outside_vent = anatomy.ventricle_rho(center) > 1.02;
            if inside_wm && outside_vent {
                break;
            }
        }
        lesions.push(Lesion {
            center,
            radius,
            intensity,
        });
    }
    lesions
}

fn draw_metadata(rng: &mut RngStream, dist: &ClassMetadataDist) -> Metadata {
    Metadata {
        tr_ms: rng.normal_scaled(dist.tr_ms.mean, dist.tr_ms.sd).max(0.0),
        te_ms: rng.normal_scaled(dist.te_ms.mean, dist.te_ms.sd).max(0.0),
        pixel_bandwidth_hz: rng
            .normal_scaled(dist.pixel_bandwidth_hz.mean, dist.pixel_bandwidth_hz.sd)
            .max(0.0),
        age_years: rng
            .normal_scaled(dist.age_years.mean, dist.age_years.sd)
            .max(0.0),
    }
}

/// Generates one phantom volume. Identical (config, seed, class) inputs give
/// bitwise-identical outputs.
pub fn generate_phantom(
    config: &PhantomConfig,
    seed: u64,
    class: ClassLabel,
) -> Result<PhantomSample, PhantomError> {
    config.validate()?;
    let [dx, dy, dz] = config.volume_shape;
    let anatomy = Anatomy::for_shape(config.volume_shape);
    let mut rng = RngStream::new(seed);

    // Draw order: jitter, lesion layout, halo phases, metadata, then noise.
    let jitter = Jitter::draw(
        &mut rng,
        &config.jitter,
        [dx as f64, dy as f64, dz as f64],
    );
    let (lesions, halo) = match class {
        ClassLabel::Ms => (place_lesions(&mut rng, &anatomy, &config.ms_lesions), None),
        ClassLabel::Leuk1 | ClassLabel::Leuk2 | ClassLabel::Leuk3 => {
            let grade = class.leuk_grade().unwrap() as usize;
            (Vec::new(), Some(config.leuk_halos[grade - 1]))
        }
        ClassLabel::Healthy => (Vec::new(), None),
    };
    // smooth lumpiness phases for the confluent halo
    let phases = [
        rng.uniform_in(0.0, std::f64::consts::TAU),
        rng.uniform_in(0.0, std::f64::consts::TAU),
        rng.uniform_in(0.0, std::f64::consts::TAU),
    ];
    let metadata = draw_metadata(&mut rng, config.metadata_for(class));

    let te_ref = config.metadata_for(ClassLabel::Healthy).te_ms.mean;
    let contrast = if config.contrast_modulation != 0.0 {
        1.0 + config.contrast_modulation * (metadata.te_ms - te_ref) / te_ref
    } else {
        1.0
    };

    let freq = [
        std::f64::consts::TAU / dx as f64 * 2.0,
        std::f64::consts::TAU / dy as f64 * 2.0,
        std::f64::consts::TAU / dz as f64 * 2.0,
    ];

    // half a voxel, in normalized-radius units of each surface
    let blend_brain = 0.5 / anatomy.min_semi();
    let blend_vent = 0.5 / anatomy.vent_semi.iter().cloned().fold(f64::INFINITY, f64::min);
    let gm_radius = GM_INNER.sqrt();

    let mut volume = Volume::zeros(dx, dy, dz);
    for z in 0..dz {
        for y in 0..dy {
            for x in 0..dx {
                let p = [x as f64, y as f64, z as f64];
                let q = jitter.pull_back(p, anatomy.center);
                let rho_brain = anatomy.brain_e(q).sqrt();
                let mut v = if rho_brain >= 1.0 + blend_brain {
                    BACKGROUND as f64
                } else {
                    let rho_vent = anatomy.ventricle_rho(q);
                    // white matter with the darker rim blended in
                    let rim = edge_blend(rho_brain, gm_radius, blend_brain);
                    let mut val =
                        WM_INTENSITY as f64 * (1.0 - rim) + GM_INTENSITY as f64 * rim;
                    // dark ventricle core
                    let inside_vent = 1.0 - edge_blend(rho_vent, 1.0, blend_vent);
                    val = VENTRICLE_INTENSITY as f64 * inside_vent + val * (1.0 - inside_vent);
                    // hyperintensities live outside the ventricle surface
                    let gate = (1.0 - inside_vent) * (1.0 - rim);
                    if gate > 0.0 {
                        for lesion in &lesions {
                            let mut d2 = 0.0;
                            for i in 0..3 {
                                let d = q[i] - lesion.center[i];
                                d2 += d * d;
                            }
                            let profile = 1.0 - d2 / (lesion.radius * lesion.radius);
                            if profile > 0.0 {
                                let contrib = lesion.intensity * profile * gate;
                                if contrib > val {
                                    val = contrib;
                                }
                            }
                        }
                        if let Some(h) = halo {
                            if rho_vent > 1.0 && rho_vent <= 1.0 + h.band_width {
                                let u = (rho_vent - 1.0) / h.band_width;
                                // flat-topped bump: full strength once clear of
                                // the ventricle blend, decaying to the band edge
                                let rise = smooth01(u / 0.25);
                                let fall = 1.0 - smooth01((u - 0.5) / 0.5);
                                let lump = 0.9
                                    + 0.1
                                        * (freq[0] * q[0] + phases[0]).sin()
                                        * (freq[1] * q[1] + phases[1]).sin()
                                        * (freq[2] * q[2] + phases[2]).sin();
                                let contrib = h.intensity * rise * fall * lump * (1.0 - rim);
                                if contrib > val {
                                    val = contrib;
                                }
                            }
                        }
                    }
                    // fade across the brain surface into background
                    val * (1.0 - edge_blend(rho_brain, 1.0, blend_brain))
                };
                v *= contrast;
                v += config.noise_sigma * rng.normal();
                volume.set(x, y, z, v.clamp(0.0, 1.0) as f32);
            }
        }
    }

    Ok(PhantomSample {
        volume,
        metadata,
        lesion_count: lesions.len() as u32,
    })
}

/// Voxels above the configured lesion threshold.
pub fn lesion_load(volume: &Volume, threshold: f64) -> usize {
    let t = threshold as f32;
    volume.data.iter().filter(|&&v| v > t).count()
}

/// Largest-remainder apportionment of `n` patients over the class proportions;
/// remainder ties break in class order.
pub fn class_counts(n: usize, proportions: &[f64; 5]) -> [usize; 5] {
    let mut counts = [0usize; 5];
    let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(5);
    let mut assigned = 0usize;
    for (i, &p) in proportions.iter().enumerate() {
        let quota = p * n as f64;
        let floor = quota.floor() as usize;
        counts[i] = floor;
        assigned += floor;
        remainders.push((i, quota - floor as f64));
    }
    remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut left = n - assigned;
    for (idx, _) in remainders {
        if left == 0 {
            break;
        }
        counts[idx] += 1;
        left -= 1;
    }
    counts
}

/// Generates the dataset, streaming each image through `sink` in manifest
/// order. Records start unassigned; run `split_by_patient` afterwards.
pub fn generate_dataset_with<F>(
    config: &PhantomConfig,
    n_patients: usize,
    master_seed: u64,
    mut sink: F,
) -> Result<DatasetManifest, PhantomError>
where
    F: FnMut(&ImageRecord, &PhantomSample) -> Result<(), PhantomError>,
{
    config.validate()?;
    if n_patients < ClassLabel::ALL.len() {
        return Err(PhantomError::Invalid(format!(
            "need at least {} patients, got {n_patients}",
            ClassLabel::ALL.len()
        )));
    }
    let counts = class_counts(n_patients, &config.class_proportions);
    let mut records = Vec::new();
    let mut patient_idx = 0u64;
    for (class, &count) in ClassLabel::ALL.iter().zip(&counts) {
        for _ in 0..count {
            let patient_seed = derive_seed(master_seed, patient_idx);
            let patient_id = format!("P{patient_idx:05}");
            let (min_imgs, max_imgs) = config.images_per_patient.ranges[class.index()];
            let n_images = if min_imgs == max_imgs {
                min_imgs
            } else {
                RngStream::new(derive_seed(patient_seed, 0))
                    .uniform_range_inclusive(min_imgs, max_imgs)
            };
            for img_idx in 0..n_images {
                let image_seed = derive_seed(patient_seed, 1 + img_idx as u64);
                let sample = generate_phantom(config, image_seed, *class)?;
                let record = ImageRecord {
                    image_id: format!("{patient_id}_I{img_idx:02}"),
                    patient_id: patient_id.clone(),
                    class_label: *class,
                    split: Split::Unassigned,
                    metadata: sample.metadata,
                };
                sink(&record, &sample)?;
                records.push(record);
            }
            patient_idx += 1;
        }
    }
    let manifest = DatasetManifest {
        records,
        generation_seed: master_seed,
        config_hash: config.content_hash(),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Generates the dataset onto disk: one `<image_id>.v3f` per image plus
/// `manifest.jsonl` and `manifest_meta.json`.
pub fn generate_dataset(
    config: &PhantomConfig,
    n_patients: usize,
    master_seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, PhantomError> {
    std::fs::create_dir_all(out_dir).map_err(|e| PhantomError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let manifest = generate_dataset_with(config, n_patients, master_seed, |record, sample| {
        let path = out_dir.join(format!("{}.v3f", record.image_id));
        sample.volume.write_to(&path).map_err(PhantomError::from)
    })?;
    manifest.write_jsonl(&out_dir.join("manifest.jsonl"))?;
    manifest.write_meta(&out_dir.join("manifest_meta.json"))?;
    Ok(manifest)
}

/// Stratified patient-level split: per class, patients are shuffled by the
/// seed and the first ceil(fraction * P) become train, the rest test. Classes
/// with fewer than two patients go wholly to train with a warning.
pub fn split_by_patient(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, Vec<String>), PhantomError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PhantomError::Invalid(format!(
            "train fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let mut warnings = Vec::new();
    let mut split_of: std::collections::HashMap<String, Split> = std::collections::HashMap::new();
    for (class_idx, class) in ClassLabel::ALL.iter().enumerate() {
        let mut patients: Vec<String> = manifest
            .patients()
            .into_iter()
            .filter(|(_, c)| c == class)
            .map(|(p, _)| p)
            .collect();
        if patients.is_empty() {
            continue;
        }
        if patients.len() < 2 {
            warnings.push(format!(
                "class {} has {} patient(s); all assigned to train",
                class.name(),
                patients.len()
            ));
            for p in patients {
                split_of.insert(p, Split::Train);
            }
            continue;
        }
        let mut rng = RngStream::new(derive_seed(seed, class_idx as u64));
        rng.shuffle(&mut patients);
        let n_train = (train_fraction * patients.len() as f64).ceil() as usize;
        let n_train = n_train.min(patients.len());
        for (i, p) in patients.into_iter().enumerate() {
            split_of.insert(p, if i < n_train { Split::Train } else { Split::Test });
        }
    }
    let records = manifest
        .records
        .iter()
        .map(|r| {
            let mut rec = r.clone();
            rec.split = *split_of.get(&r.patient_id).unwrap_or(&Split::Unassigned);
            rec
        })
        .collect();
    let out = DatasetManifest {
        records,
        generation_seed: manifest.generation_seed,
        config_hash: manifest.config_hash.clone(),
    };
    out.validate()?;
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_counts_largest_remainder() {
        let config = PhantomConfig::default();
        let counts = class_counts(100, &config.class_proportions);
        assert_eq!(counts, [60, 20, 12, 1, 7]);
        assert_eq!(counts.iter().sum::<usize>(), 100);
    }

    #[test]
    fn class_counts_always_total() {
        let config = PhantomConfig::default();
        for n in [5usize, 17, 33, 100, 301, 1000] {
            let counts = class_counts(n, &config.class_proportions);
            assert_eq!(counts.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn phantom_deterministic() {
        let mut config = PhantomConfig::default();
        config.volume_shape = [20, 24, 20];
        let a = generate_phantom(&config, 7, ClassLabel::Ms).unwrap();
        let b = generate_phantom(&config, 7, ClassLabel::Ms).unwrap();
        assert_eq!(a.volume.data, b.volume.data);
        assert_eq!(a.metadata, b.metadata);
        let c = generate_phantom(&config, 8, ClassLabel::Ms).unwrap();
        assert_ne!(a.volume.data, c.volume.data);
    }

    #[test]
    fn phantom_values_in_unit_interval() {
        let mut config = PhantomConfig::default();
        config.volume_shape = [20, 24, 20];
        for class in ClassLabel::ALL {
            let s = generate_phantom(&config, 3, class).unwrap();
            let (lo, hi) = s.volume.min_max();
            assert!(lo >= 0.0 && hi <= 1.0, "{class:?}: [{lo}, {hi}]");
        }
    }

    #[test]
    fn healthy_has_no_lesion_load() {
        let config = PhantomConfig::default();
        for seed in 0..20 {
            let s = generate_phantom(&config, seed, ClassLabel::Healthy).unwrap();
            assert_eq!(lesion_load(&s.volume, config.lesion_threshold), 0);
        }
    }
}
