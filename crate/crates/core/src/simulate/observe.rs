//! Observation oracle: interpolated ground truth plus Gaussian noise.

use super::{Domain, FunctionSample};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Ground truth on a uniform grid, interpolated linearly (1-D) or bilinearly
/// (2-D).
#[derive(Clone, Debug, PartialEq)]
pub enum Interpolant {
    Line { lo: f64, hi: f64, values: Vec<f64> },
    /// `n x n` nodes on the unit square, row-major with `x` fastest.
    Square { n: usize, values: Vec<f64> },
}

impl Interpolant {
    pub fn domain(&self) -> Domain {
        match self {
            Interpolant::Line { lo, hi, .. } => Domain::interval(*lo, *hi),
            Interpolant::Square { .. } => Domain::unit_square(),
        }
    }

    /// Values at the grid nodes.
    pub fn nodes(&self) -> &[f64] {
        match self {
            Interpolant::Line { values, .. } | Interpolant::Square { values, .. } => values,
        }
    }

    /// Grid node coordinates, flat.
    pub fn node_points(&self) -> Vec<f64> {
        match self {
            Interpolant::Line { lo, hi, values } => super::linspace(*lo, *hi, values.len()),
            Interpolant::Square { n, .. } => super::square_grid(*n),
        }
    }

    pub fn as_sample(&self) -> FunctionSample {
        let dim = self.domain().dim();
        FunctionSample::new(dim, self.node_points(), self.nodes().to_vec()).expect("grid sample")
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Interpolant::Line { lo, hi, values } => {
                let (i, t) = locate(x[0], *lo, *hi, values.len());
                if t == 0.0 {
                    values[i]
                } else {
                    values[i] * (1.0 - t) + values[i + 1] * t
                }
            }
            Interpolant::Square { n, values } => {
                let (i, tx) = locate(x[0], 0.0, 1.0, *n);
                let (j, ty) = locate(x[1], 0.0, 1.0, *n);
                let at = |i: usize, j: usize| values[j.min(n - 1) * n + i.min(n - 1)];
                let v0 = if tx == 0.0 { at(i, j) } else { at(i, j) * (1.0 - tx) + at(i + 1, j) * tx };
                if ty == 0.0 {
                    return v0;
                }
                let v1 = if tx == 0.0 { at(i, j + 1) } else { at(i, j + 1) * (1.0 - tx) + at(i + 1, j + 1) * tx };
                v0 * (1.0 - ty) + v1 * ty
            }
        }
    }
}

/// Cell index and local coordinate of `x` on an `n`-node grid over `[lo, hi]`.
fn locate(x: f64, lo: f64, hi: f64, n: usize) -> (usize, f64) {
    let s = (x - lo) / (hi - lo) * (n - 1) as f64;
    let i = (s.floor() as usize).min(n - 2);
    let t = s - i as f64;
    if t >= 1.0 {
        (i + 1, 0.0)
    } else {
        (i, t.max(0.0))
    }
}

/// `y_j = truth(xi_j) + sigma eps_j` for a flat list of sensor coordinates.
pub fn observe(truth: &Interpolant, xi: &[f64], sigma: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) {
        return Err(Error::Invalid(format!("observation noise {sigma}")));
    }
    let domain = truth.domain();
    domain.check_points(xi)?;
    Ok(xi
        .chunks_exact(domain.dim())
        .map(|p| truth.eval(p) + if sigma > 0.0 { sigma * rng::normal(rng) } else { 0.0 })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_at_nodes_without_noise() {
        let line = Interpolant::Line { lo: -1.0, hi: 1.0, values: vec![1.0, 5.0, -2.0] };
        let y = observe(&line, &[-1.0, 0.0, 1.0, 0.5], 0.0, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(y, vec![1.0, 5.0, -2.0, 1.5]);

        let sq = Interpolant::Square { n: 3, values: (0..9).map(f64::from).collect() };
        assert_eq!(sq.eval(&[0.5, 0.5]), 4.0);
        assert_eq!(sq.eval(&[1.0, 1.0]), 8.0);
        assert!((sq.eval(&[0.25, 0.75]) - (0.5 + 3.0 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn rejects_points_outside() {
        let line = Interpolant::Line { lo: 0.0, hi: 1.0, values: vec![0.0, 1.0] };
        let err = observe(&line, &[0.5, 1.5], 0.1, &mut rng::stream(0, 0)).unwrap_err();
        assert!(matches!(err, Error::OutsideDomain { index: 1 }));
    }

    #[test]
    fn noise_variance() {
        let line = Interpolant::Line { lo: 0.0, hi: 1.0, values: vec![2.0, 2.0] };
        let xi = vec![0.3; 10_000];
        let y = observe(&line, &xi, 0.2, &mut rng::stream(8, 0)).unwrap();
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() - 1) as f64;
        assert!((var / 0.04 - 1.0).abs() < 0.05, "{var}");
    }
}
