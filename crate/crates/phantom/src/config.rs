//! Phantom generator configuration and validation.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::manifest::ClassLabel;
use crate::PhantomError;

/// Fraction of each full extent taken by the brain ellipsoid semi-axes.
pub(crate) const BRAIN_SEMI_FRAC: [f64; 3] = [0.44, 0.46, 0.43];
/// Normalized squared-radius where white matter ends and the rim begins.
pub(crate) const GM_INNER: f64 = 0.78;
/// Ventricle lobe placement and size, as fractions of the brain semi-axes.
pub(crate) const VENT_OFFSET_X: f64 = 0.20;
pub(crate) const VENT_SEMI_FRAC: [f64; 3] = [0.14, 0.38, 0.20];

pub(crate) const BACKGROUND: f32 = 0.0;
pub(crate) const GM_INTENSITY: f32 = 0.32;
pub(crate) const WM_INTENSITY: f32 = 0.55;
pub(crate) const VENTRICLE_INTENSITY: f32 = 0.08;

/// Upper bound on the normalized MS lesion radius so a lesion diameter fits
/// inside the white-matter shell between ventricle and rim (the shell spans
/// roughly half the brain radius along its thinnest direction).
const MAX_LESION_RADIUS_FRAC: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dist {
    pub mean: f64,
    pub sd: f64,
}

impl Dist {
    pub fn new(mean: f64, sd: f64) -> Self {
        Dist { mean, sd }
    }
}

/// Per-class acquisition metadata distributions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetadataDist {
    pub tr_ms: Dist,
    pub te_ms: Dist,
    pub pixel_bandwidth_hz: Dist,
    pub age_years: Dist,
}

/// Focal lesion parameters for the MS class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLesionParams {
    pub count_range: (u32, u32),
    /// Radius as a fraction of the smallest brain semi-axis.
    pub radius_range: (f64, f64),
    pub intensity_range: (f64, f64),
}

/// Periventricular halo parameters for one leukoencephalopathy grade.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HaloParams {
    /// Band width in normalized ventricle-radius units.
    pub band_width: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub scale: f64,
    pub shift: f64,
    pub rotation_rad: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagesPerPatient {
    /// Inclusive (min, max) image count per class, ordered as ClassLabel::ALL.
    pub ranges: [(u32, u32); 5],
}

impl Default for ImagesPerPatient {
    fn default() -> Self {
        // MS patients contribute several scans, other classes one each.
        ImagesPerPatient {
            ranges: [(1, 1), (3, 6), (1, 1), (1, 1), (1, 1)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    /// Output volume extents (dx, dy, dz).
    pub volume_shape: [usize; 3],
    /// Patient proportions per class, ordered as ClassLabel::ALL.
    pub class_proportions: [f64; 5],
    pub ms_lesions: FocalLesionParams,
    /// Halo parameters for grades 1..=3.
    pub leuk_halos: [HaloParams; 3],
    pub jitter: JitterParams,
    pub noise_sigma: f64,
    /// Voxels above this value count as lesion load.
    pub lesion_threshold: f64,
    pub metadata: [ClassMetadataDist; 5],
    /// When nonzero, scales image contrast by the image's TE offset.
    pub contrast_modulation: f64,
    pub images_per_patient: ImagesPerPatient,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        let flair = |te: Dist, age: Dist, tr: Dist, bw: Dist| ClassMetadataDist {
            tr_ms: tr,
            te_ms: te,
            pixel_bandwidth_hz: bw,
            age_years: age,
        };
        let standard_tr = Dist::new(9000.0, 400.0);
        let standard_te = Dist::new(120.0, 8.0);
        let standard_bw = Dist::new(200.0, 15.0);
        // The MS class is deliberately acquired with different parameters,
        // reproducing the dataset bias the report generator must flag.
        let ms_tr = Dist::new(8200.0, 350.0);
        let ms_te = Dist::new(96.0, 7.0);
        let ms_bw = Dist::new(160.0, 12.0);
        PhantomConfig {
            volume_shape: [40, 48, 40],
            // 1855 / 616 / 384 / 40 / 201 patients out of 3096
            class_proportions: [
                1855.0 / 3096.0,
                616.0 / 3096.0,
                384.0 / 3096.0,
                40.0 / 3096.0,
                201.0 / 3096.0,
            ],
            ms_lesions: FocalLesionParams {
                count_range: (6, 12),
                radius_range: (0.05, 0.10),
                intensity_range: (0.85, 0.97),
            },
            leuk_halos: [
                HaloParams {
                    band_width: 0.50,
                    intensity: 0.78,
                },
                HaloParams {
                    band_width: 0.90,
                    intensity: 0.85,
                },
                HaloParams {
                    band_width: 1.50,
                    intensity: 0.93,
                },
            ],
            jitter: JitterParams {
                scale: 0.03,
                shift: 0.02,
                rotation_rad: 0.05,
            },
            noise_sigma: 0.02,
            lesion_threshold: 0.70,
            metadata: [
                flair(standard_te, Dist::new(39.0, 24.0), standard_tr, standard_bw),
                flair(ms_te, Dist::new(46.0, 14.0), ms_tr, ms_bw),
                flair(standard_te, Dist::new(73.0, 10.0), standard_tr, standard_bw),
                flair(standard_te, Dist::new(76.0, 9.0), standard_tr, standard_bw),
                flair(standard_te, Dist::new(81.0, 8.0), standard_tr, standard_bw),
            ],
            contrast_modulation: 0.0,
            images_per_patient: ImagesPerPatient::default(),
        }
    }
}

impl PhantomConfig {
    /// Raw-mode config emitting pre-trim volumes for the preprocessing path.
    pub fn raw_mode() -> Self {
        PhantomConfig {
            volume_shape: [182, 218, 182],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        for (axis, &e) in ["x", "y", "z"].iter().zip(&self.volume_shape) {
            if e < 8 {
                return Err(PhantomError::Invalid(format!(
                    "volume extent on {axis} must be >= 8, got {e}"
                )));
            }
        }
        let sum: f64 = self.class_proportions.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(PhantomError::Invalid(format!(
                "class proportions must sum to 1, got {sum}"
            )));
        }
        if self.class_proportions.iter().any(|&p| p < 0.0) {
            return Err(PhantomError::Invalid("negative class proportion".into()));
        }
        let (rlo, rhi) = self.ms_lesions.radius_range;
        if !(0.0 < rlo && rlo <= rhi) {
            return Err(PhantomError::Invalid(format!(
                "lesion radius range ({rlo}, {rhi}) must be positive and ordered"
            )));
        }
        if rhi > MAX_LESION_RADIUS_FRAC {
            return Err(PhantomError::Invalid(format!(
                "lesion radius fraction {rhi} exceeds the white-matter shell bound {MAX_LESION_RADIUS_FRAC}"
            )));
        }
        let (clo, chi) = self.ms_lesions.count_range;
        if clo > chi {
            return Err(PhantomError::Invalid("lesion count range inverted".into()));
        }
        if !(0.0..0.5).contains(&self.jitter.scale)
            || !(0.0..0.5).contains(&self.jitter.shift)
        {
            return Err(PhantomError::Invalid("jitter out of range".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(PhantomError::Invalid("negative noise sigma".into()));
        }
        for (min, max) in self.images_per_patient.ranges {
            if min == 0 || min > max {
                return Err(PhantomError::Invalid(
                    "images per patient range must satisfy 1 <= min <= max".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn metadata_for(&self, class: ClassLabel) -> &ClassMetadataDist {
        &self.metadata[class.index()]
    }

    /// SHA-256 of the canonical JSON form.
    pub fn content_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
