//! Trapezoidal rule helpers.

/// Trapezoid weights for a (possibly non-uniform) grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let m = grid.len();
    let mut w = vec![0.0; m];
    for k in 0..m.saturating_sub(1) {
        let h = grid[k + 1] - grid[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    trapezoid_weights(grid).iter().zip(values).map(|(w, v)| w * v).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear_functions() {
        let g = [0.0, 0.3, 1.0, 1.7, 2.0];
        let v: Vec<f64> = g.iter().map(|t| 2.0 * t - 1.0).collect();
        assert!((trapezoid(&g, &v) - 2.0).abs() < 1e-14);
        assert!((trapezoid_weights(&g).iter().sum::<f64>() - 2.0).abs() < 1e-15);
    }
}
