//! Trapezoid quadrature on a fixed grid, used for every L^2 inner product.

use crate::{Error, Result};

/// Trapezoid weights for a strictly increasing grid.
pub fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let g = grid.len();
    let mut w = vec![0.0; g];
    for i in 0..g.saturating_sub(1) {
        let half = 0.5 * (grid[i + 1] - grid[i]);
        w[i] += half;
        w[i + 1] += half;
    }
    w
}

/// Uniform grid of `size` points on [0, 1].
pub fn uniform_grid(size: usize) -> Vec<f64> {
    let last = (size - 1) as f64;
    (0..size).map(|i| i as f64 / last).collect()
}

pub fn weighted_dot(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    weights
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * x * y)
        .sum()
}

/// Weighted L^2 distance between two curves sampled on the same grid.
pub fn weighted_distance(weights: &[f64], a: &[f64], b: &[f64]) -> f64 {
    weights
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Composite trapezoid rule for `f` on [a, b] with `points` nodes.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, points: usize) -> f64 {
    let step = (b - a) / (points - 1) as f64;
    let inner: f64 = (1..points - 1).map(|i| f(a + i as f64 * step)).sum();
    step * (0.5 * f(a) + inner + 0.5 * f(b))
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::Shape("grid needs at least two points".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("grid must be strictly increasing".into()));
    }
    if grid[0] != 0.0 || grid[grid.len() - 1] != 1.0 {
        return Err(Error::Validation(
            "grid must start at 0 and end at 1".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_interval_length() {
        let w = trapezoid_weights(&uniform_grid(17));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn integrates_linear_exactly() {
        let v = integrate(|s| 3.0 * s + 1.0, 0.0, 1.0, 11);
        assert!((v - 2.5).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(check_grid(&[0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(check_grid(&[0.1, 1.0]).is_err());
        assert!(check_grid(&uniform_grid(8)).is_ok());
    }
}
