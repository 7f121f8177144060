//! Dataset identity: image records, class labels, splits, and the JSONL
//! manifest format (one JSON object per line).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::PhantomError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Healthy,
    Ms,
    Leuk1,
    Leuk2,
    Leuk3,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 5] = [
        ClassLabel::Healthy,
        ClassLabel::Ms,
        ClassLabel::Leuk1,
        ClassLabel::Leuk2,
        ClassLabel::Leuk3,
    ];

    pub fn index(self) -> usize {
        match self {
            ClassLabel::Healthy => 0,
            ClassLabel::Ms => 1,
            ClassLabel::Leuk1 => 2,
            ClassLabel::Leuk2 => 3,
            ClassLabel::Leuk3 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Healthy => "healthy",
            ClassLabel::Ms => "ms",
            ClassLabel::Leuk1 => "leuk1",
            ClassLabel::Leuk2 => "leuk2",
            ClassLabel::Leuk3 => "leuk3",
        }
    }

    /// Leukoencephalopathy severity grade, if any.
    pub fn leuk_grade(self) -> Option<u8> {
        match self {
            ClassLabel::Leuk1 => Some(1),
            ClassLabel::Leuk2 => Some(2),
            ClassLabel::Leuk3 => Some(3),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

/// Acquisition metadata carried by every image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tr_ms: f64,
    pub te_ms: f64,
    pub pixel_bandwidth_hz: f64,
    pub age_years: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub patient_id: String,
    pub class_label: ClassLabel,
    pub split: Split,
    pub metadata: Metadata,
}

/// Ordered image records plus the generation provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub generation_seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestMeta {
    generation_seed: u64,
    config_hash: String,
}

impl DatasetManifest {
    /// Image ids unique; all images of a patient share class and split.
    pub fn validate(&self) -> Result<(), PhantomError> {
        let mut seen_images = HashMap::new();
        let mut patient_info: HashMap<&str, (ClassLabel, Split)> = HashMap::new();
        for rec in &self.records {
            if seen_images.insert(rec.image_id.as_str(), ()).is_some() {
                return Err(PhantomError::Invalid(format!(
                    "duplicate image id {}",
                    rec.image_id
                )));
            }
            match patient_info.get(rec.patient_id.as_str()) {
                None => {
                    patient_info.insert(&rec.patient_id, (rec.class_label, rec.split));
                }
                Some(&(class, split)) => {
                    if class != rec.class_label {
                        return Err(PhantomError::Invalid(format!(
                            "patient {} has multiple class labels",
                            rec.patient_id
                        )));
                    }
                    if split != rec.split {
                        return Err(PhantomError::Invalid(format!(
                            "patient {} spans multiple splits",
                            rec.patient_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Patient ids in order of first appearance.
    pub fn patients(&self) -> Vec<(String, ClassLabel)> {
        let mut out = Vec::new();
        let mut seen = HashMap::new();
        for rec in &self.records {
            if seen.insert(rec.patient_id.clone(), ()).is_none() {
                out.push((rec.patient_id.clone(), rec.class_label));
            }
        }
        out
    }

    pub fn records_in_split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), PhantomError> {
        let io_err = |e: std::io::Error| PhantomError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        for rec in &self.records {
            let line = serde_json::to_string(rec)?;
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn write_meta(&self, path: &Path) -> Result<(), PhantomError> {
        let io_err = |e: std::io::Error| PhantomError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let meta = ManifestMeta {
            generation_seed: self.generation_seed,
            config_hash: self.config_hash.clone(),
        };
        let body = serde_json::to_string_pretty(&meta)?;
        std::fs::write(path, body).map_err(io_err)?;
        Ok(())
    }

    /// Reads records from JSONL, plus the sidecar meta file when present.
    pub fn read_jsonl(path: &Path) -> Result<Self, PhantomError> {
        let io_err = |e: std::io::Error| PhantomError::Io {
            path: path.display().to_string(),
            source: e,
        };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let meta_path = path.with_file_name("manifest_meta.json");
        let (seed, hash) = if meta_path.exists() {
            let body = std::fs::read_to_string(&meta_path).map_err(io_err)?;
            let meta: ManifestMeta = serde_json::from_str(&body)?;
            (meta.generation_seed, meta.config_hash)
        } else {
            (0, String::new())
        };
        Ok(DatasetManifest {
            records,
            generation_seed: seed,
            config_hash: hash,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(image: &str, patient: &str, class: ClassLabel, split: Split) -> ImageRecord {
        ImageRecord {
            image_id: image.into(),
            patient_id: patient.into(),
            class_label: class,
            split,
            metadata: Metadata {
                tr_ms: 9000.0,
                te_ms: 120.0,
                pixel_bandwidth_hz: 200.0,
                age_years: 50.0,
            },
        }
    }

    #[test]
    fn validate_catches_split_leak() {
        let m = DatasetManifest {
            records: vec![
                record("i1", "p1", ClassLabel::Ms, Split::Train),
                record("i2", "p1", ClassLabel::Ms, Split::Test),
            ],
            generation_seed: 0,
            config_hash: String::new(),
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn validate_catches_duplicate_image() {
        let m = DatasetManifest {
            records: vec![
                record("i1", "p1", ClassLabel::Ms, Split::Train),
                record("i1", "p2", ClassLabel::Healthy, Split::Train),
            ],
            generation_seed: 0,
            config_hash: String::new(),
        };
        assert!(m.validate().is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            records: vec![
                record("i1", "p1", ClassLabel::Leuk2, Split::Train),
                record("i2", "p2", ClassLabel::Healthy, Split::Test),
            ],
            generation_seed: 42,
            config_hash: "abc".into(),
        };
        let path = dir.path().join("manifest.jsonl");
        m.write_jsonl(&path).unwrap();
        m.write_meta(&dir.path().join("manifest_meta.json")).unwrap();
        let back = DatasetManifest::read_jsonl(&path).unwrap();
        assert_eq!(back, m);

        // one object per line, with the stated fields
        let text = std::fs::read_to_string(&path).unwrap();
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["image_id", "patient_id", "class_label", "split", "metadata"] {
            assert!(first.get(key).is_some(), "missing {key}");
        }
        assert_eq!(first["class_label"], "leuk2");
    }
}
