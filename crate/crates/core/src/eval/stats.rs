use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{PsptError, Result};

const ROUNDING: f64 = 16.0 * f64::EPSILON;

/// Two-sided paired t-test p-value over aligned per-query scores.
///
/// With zero variance in the differences the statistic is undefined: the
/// p-value is 1 when the mean difference is 0 and 0 otherwise. Variance at
/// rounding level relative to the largest difference counts as zero.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(PsptError::Input(format!(
            "paired samples differ in length ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let n = a.len();
    if n < 2 {
        return Err(PsptError::Input("paired t-test needs at least 2 pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let scale = diffs.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if var.sqrt() <= ROUNDING * scale {
        return Ok(if mean.abs() <= ROUNDING * scale { 1.0 } else { 0.0 });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| PsptError::Numeric(format!("t distribution: {e}")))?;
    Ok((2.0 * dist.cdf(-t.abs())).clamp(0.0, 1.0))
}
