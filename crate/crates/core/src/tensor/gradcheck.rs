use crate::error::{PsptError, Result};

/// Central-difference gradient estimate of `f` at `params`, one coordinate at
/// a time: `(f(p + eps·e_i) - f(p - eps·e_i)) / (2·eps)`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(PsptError::Contract(format!(
            "finite difference step {eps} outside [1e-6, 1e-3]"
        )));
    }
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = f(&p)?;
        p[i] = orig - eps;
        let minus = f(&p)?;
        p[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(PsptError::Numeric(format!(
                "objective not finite at coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// `max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let g = finite_diff_grad(|p| Ok(p[0] * p[0]), &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function_has_zero_gradient() {
        let g = finite_diff_grad(|_| Ok(4.2), &[1.0, -2.0, 0.5], 1e-4).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_finite_objective_is_numeric_error() {
        let r = finite_diff_grad(|p| Ok(1.0 / (p[0] - 1e-5)), &[0.0], 1e-5);
        assert!(matches!(r, Err(PsptError::Numeric(_))));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        assert!(finite_diff_grad(|_| Ok(0.0), &[0.0], 1e-1).is_err());
    }
}
