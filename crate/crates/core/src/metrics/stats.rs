use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::MetricError;
use crate::grid::Grid2D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided Welch t-test for a difference in means.
///
/// The p-value is `I_{df/(df+t²)}(df/2, 1/2)`, the regularised incomplete
/// beta form of the Student-t tail.
pub fn welch_t_test(x: &[f64], y: &[f64]) -> Result<WelchResult, MetricError> {
    if x.len() < 2 || y.len() < 2 {
        return Err(MetricError::InsufficientData {
            nx: x.len(),
            ny: y.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    let (qx, qy) = (vx / x.len() as f64, vy / y.len() as f64);
    let se2 = qx + qy;
    if !(se2 > 0.0) {
        return Err(MetricError::ZeroVariance);
    }
    let t = (mx - my) / se2.sqrt();
    let df = se2 * se2 / (qx * qx / (x.len() as f64 - 1.0) + qy * qy / (y.len() as f64 - 1.0));
    let p = if t == 0.0 {
        1.0
    } else {
        beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
    };
    Ok(WelchResult { t, df, p })
}

/// Mean and normal-approximation 95% half-width `1.96·sd/√n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub half_width: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary, MetricError> {
    if values.len() < 2 {
        return Err(MetricError::InsufficientData {
            nx: values.len(),
            ny: values.len(),
        });
    }
    let (m, v) = mean_var(values);
    Ok(Summary {
        n: values.len(),
        mean: m,
        half_width: 1.96 * v.sqrt() / (values.len() as f64).sqrt(),
    })
}

/// Pooled intensity histogram over `[0, 255]` with add-one smoothing,
/// normalised to a distribution.
fn histogram(images: &[&Grid2D], bins: usize) -> Vec<f64> {
    let mut counts = vec![1.0; bins];
    for img in images {
        for &v in img.data() {
            let b = ((v as f64 / 255.0) * bins as f64).floor().clamp(0.0, (bins - 1) as f64) as usize;
            counts[b] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    counts.iter().map(|c| c / total).collect()
}

/// Symmetrised Kullback–Leibler divergence `KL(p‖q) + KL(q‖p)` between
/// the pooled intensity histograms of two image sets.
pub fn histogram_divergence(a: &[&Grid2D], b: &[&Grid2D], bins: usize) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(MetricError::InsufficientData { nx: a.len(), ny: b.len() });
    }
    let p = histogram(a, bins);
    let q = histogram(b, bins);
    Ok(p.iter().zip(&q).map(|(p, q)| (p - q) * (p / q).ln()).sum())
}
