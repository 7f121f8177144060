//! Per-class metadata summaries and bias flags over a dataset manifest.

use serde::{Deserialize, Serialize};

use neurovol_phantom::{ClassLabel, DatasetManifest};

use crate::AnalysisError;

pub const ATTRIBUTES: [&str; 4] = ["tr_ms", "te_ms", "pixel_bandwidth_hz", "age_years"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeSummary {
    pub class: String,
    pub count: usize,
    pub mean: f64,
    pub sd: f64,
    pub histogram: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasFlag {
    pub attribute: String,
    pub class_a: String,
    pub class_b: String,
    pub mean_gap: f64,
    pub pooled_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasReport {
    /// Mean-gap threshold in pooled standard deviations.
    pub flag_threshold: f64,
    pub histogram_bins: usize,
    pub summaries: Vec<(String, Vec<AttributeSummary>)>,
    pub flags: Vec<BiasFlag>,
    pub warnings: Vec<String>,
}

fn attribute_value(rec: &neurovol_phantom::ImageRecord, attr: &str) -> f64 {
    match attr {
        "tr_ms" => rec.metadata.tr_ms,
        "te_ms" => rec.metadata.te_ms,
        "pixel_bandwidth_hz" => rec.metadata.pixel_bandwidth_hz,
        "age_years" => rec.metadata.age_years,
        _ => unreachable!("unknown attribute"),
    }
}

/// Summarizes each attribute per class and flags class pairs whose means
/// differ by more than `flag_threshold` pooled standard deviations.
pub fn metadata_bias_report(
    manifest: &DatasetManifest,
    flag_threshold: f64,
    histogram_bins: usize,
) -> Result<BiasReport, AnalysisError> {
    if manifest.records.is_empty() {
        return Err(AnalysisError::Invalid("empty manifest".into()));
    }
    if histogram_bins == 0 {
        return Err(AnalysisError::Invalid("need at least one histogram bin".into()));
    }
    let mut summaries = Vec::new();
    let mut flags = Vec::new();
    let mut warnings = Vec::new();

    for attr in ATTRIBUTES {
        let values: Vec<(ClassLabel, f64)> = manifest
            .records
            .iter()
            .map(|r| (r.class_label, attribute_value(r, attr)))
            .collect();
        let lo = values.iter().map(|(_, v)| *v).fold(f64::INFINITY, f64::min);
        let hi = values
            .iter()
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);

        let mut per_class = Vec::new();
        for class in ClassLabel::ALL {
            let vals: Vec<f64> = values
                .iter()
                .filter(|(c, _)| *c == class)
                .map(|(_, v)| *v)
                .collect();
            if vals.is_empty() {
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let sd = if vals.len() > 1 {
                (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let mut histogram = vec![0usize; histogram_bins];
            for v in &vals {
                let bin = (((v - lo) / span) * histogram_bins as f64) as usize;
                histogram[bin.min(histogram_bins - 1)] += 1;
            }
            per_class.push(AttributeSummary {
                class: class.name().to_string(),
                count: vals.len(),
                mean,
                sd,
                histogram,
            });
        }

        for i in 0..per_class.len() {
            for j in i + 1..per_class.len() {
                let (a, b) = (&per_class[i], &per_class[j]);
                if a.count < 2 || b.count < 2 {
                    warnings.push(format!(
                        "{attr}: skipping flag check for {} vs {} (too few samples)",
                        a.class, b.class
                    ));
                    continue;
                }
                let pooled = ((a.sd * a.sd + b.sd * b.sd) / 2.0).sqrt();
                let gap = (a.mean - b.mean).abs();
                if pooled > 0.0 && gap > flag_threshold * pooled {
                    flags.push(BiasFlag {
                        attribute: attr.to_string(),
                        class_a: a.class.clone(),
                        class_b: b.class.clone(),
                        mean_gap: gap,
                        pooled_sd: pooled,
                    });
                }
            }
        }
        summaries.push((attr.to_string(), per_class));
    }

    Ok(BiasReport {
        flag_threshold,
        histogram_bins,
        summaries,
        flags,
        warnings,
    })
}
