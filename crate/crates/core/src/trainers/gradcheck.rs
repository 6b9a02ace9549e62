//! Central finite differences, for checking analytic gradients.

/// `(f(p + εe_i) − f(p − εe_i)) / 2ε` for every coordinate.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, params: &[f64], eps: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let up = f(&p);
            p[i] = orig - eps;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Largest `|a − b| / max(|a|, |b|, floor)` over coordinates. The floor keeps
/// coordinates whose true gradient is essentially zero from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let f = |p: &[f64]| p[0].powi(3) + 2.0 * p[0] * p[1];
        let p = [1.5, -0.5];
        let num = numeric_gradient(f, &p, 1e-5);
        let exact = [3.0 * 1.5f64.powi(2) + 2.0 * -0.5, 2.0 * 1.5];
        assert!(max_relative_error(&exact, &num, 1e-8) < 1e-8);
    }
}
