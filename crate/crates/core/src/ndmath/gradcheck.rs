use crate::error::{Error, Result};

/// Compares an analytic gradient with central differences, coordinate-wise.
///
/// `f` returns `(value, gradient)` at a point. The result is the largest
/// relative error `|a − n| / max(|a|, |n|, floor)`, where `floor` is `1e-3`
/// times the largest analytic gradient magnitude so coordinates that are
/// tiny relative to the rest are compared on the gradient's overall scale.
pub fn grad_check<F>(f: F, point: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let (_, analytic) = f(point);
    if analytic.len() != point.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries for a {}-dimensional point",
            analytic.len(),
            point.len()
        )));
    }
    let scale = analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let up = f(&x).0;
        x[i] = orig - eps;
        let down = f(&x).0;
        x[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        let rel = (a - numeric).abs() / denom;
        if rel.is_nan() {
            return Ok(f64::INFINITY);
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |p: &[f64]| (p[0] * p[0], vec![2.0 * p[0]]);
        let (_, g) = f(&[3.0]);
        assert_eq!(g[0], 6.0);
        let numeric = (f(&[3.0 + 1e-5]).0 - f(&[3.0 - 1e-5]).0) / 2e-5;
        assert!((numeric - 6.0).abs() < 1e-6);
        assert!(grad_check(f, &[3.0], 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let f = |p: &[f64]| (p[0] * p[0] + p[1], vec![2.0 * p[0], 2.0]);
        assert!(grad_check(f, &[1.0, 1.0], 1e-6).unwrap() > 0.1);
    }

    #[test]
    fn zero_step_rejected() {
        let f = |p: &[f64]| (p[0], vec![1.0]);
        assert!(grad_check(f, &[0.0], 0.0).is_err());
        assert!(grad_check(f, &[0.0], -1e-3).is_err());
    }
}
