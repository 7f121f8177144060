//! Per-dimension discriminability: ratio of between-class variance of the
//! class means to the mean within-class variance, used to rank latent
//! dimensions for traversal.

use crate::AnalysisError;

/// Scores every dimension. Weighted by class size on both sides of the
/// ratio; a dimension with zero within-class variance but separated means
/// reports +infinity, a fully constant dimension reports 0.
pub fn fisher_score_per_dim(
    xs: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<f64>, AnalysisError> {
    if xs.len() != labels.len() || xs.is_empty() {
        return Err(AnalysisError::Invalid("empty or mismatched inputs".into()));
    }
    let dim = xs[0].len();
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(AnalysisError::Invalid(format!(
                "label {l} outside class list of size {n_classes}"
            )));
        }
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(AnalysisError::Invalid(
            "need samples from at least two classes".into(),
        ));
    }
    let n = xs.len() as f64;

    let mut scores = vec![0.0; dim];
    for d in 0..dim {
        let mut class_mean = vec![0.0; n_classes];
        for (x, &l) in xs.iter().zip(labels) {
            class_mean[l] += x[d];
        }
        for c in 0..n_classes {
            if counts[c] > 0 {
                class_mean[c] /= counts[c] as f64;
            }
        }
        let grand: f64 = (0..n_classes)
            .map(|c| class_mean[c] * counts[c] as f64)
            .sum::<f64>()
            / n;
        let between: f64 = (0..n_classes)
            .map(|c| counts[c] as f64 / n * (class_mean[c] - grand).powi(2))
            .sum();
        let mut within = 0.0;
        for (x, &l) in xs.iter().zip(labels) {
            within += (x[d] - class_mean[l]).powi(2);
        }
        within /= n;
        scores[d] = if within == 0.0 {
            if between == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            between / within
        };
    }
    Ok(scores)
}
