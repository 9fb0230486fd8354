//! Ground-truth simulators and dataset generation.

pub mod bvp;
pub mod darcy;
pub mod dataset;
pub mod halton;
pub mod lv;
pub mod observe;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use halton::halton_sequence;
pub use observe::{observe, Interpolant};

/// The three forward problems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Bvp,
    Darcy,
    Lv,
}

impl Problem {
    pub fn name(self) -> &'static str {
        match self {
            Problem::Bvp => "bvp",
            Problem::Darcy => "darcy",
            Problem::Lv => "lv",
        }
    }
}

impl std::str::FromStr for Problem {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bvp" => Ok(Problem::Bvp),
            "darcy" => Ok(Problem::Darcy),
            "lv" => Ok(Problem::Lv),
            other => Err(Error::config("problem", format!("unknown problem `{other}`"))),
        }
    }
}

impl std::fmt::Display for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len());
        assert!(lo.iter().zip(&hi).all(|(a, b)| a < b), "empty domain");
        Self { lo, hi }
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        Self::new(vec![lo], vec![hi])
    }

    pub fn unit_square() -> Self {
        Self::new(vec![0.0, 0.0], vec![1.0, 1.0])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| v >= l && v <= h)
    }

    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*l, *h);
        }
    }

    /// Maps a point of the unit cube into the box.
    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        u.iter().zip(self.lo.iter().zip(&self.hi)).map(|(u, (l, h))| l + u * (h - l)).collect()
    }

    /// Checks every row of a flat `n x dim` point array.
    pub fn check_points(&self, points: &[f64]) -> Result<()> {
        let d = self.dim();
        if points.len() % d != 0 {
            return Err(Error::Dimension(format!("{} coordinates for dimension {d}", points.len())));
        }
        for (index, p) in points.chunks_exact(d).enumerate() {
            if !self.contains(p) {
                return Err(Error::OutsideDomain { index });
            }
        }
        Ok(())
    }
}

/// A function observed at arbitrary points: `values[i] = f(points[i])`.
/// Points are stored flat, `dim` coordinates each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSample {
    pub dim: usize,
    pub points: Vec<f64>,
    pub values: Vec<f64>,
}

impl FunctionSample {
    pub fn new(dim: usize, points: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() != dim * values.len() {
            return Err(Error::Dimension(format!(
                "{} coordinates for {} values in dimension {dim}",
                points.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite function value".into()));
        }
        Ok(Self { dim, points, values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Keeps the entries at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut points = Vec::with_capacity(indices.len() * self.dim);
        let mut values = Vec::with_capacity(indices.len());
        for &i in indices {
            points.extend_from_slice(self.point(i));
            values.push(self.values[i]);
        }
        Self { dim: self.dim, points, values }
    }
}

/// Uniform grid `lo + i (hi - lo) / (n - 1)`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    let h = (hi - lo) / (n - 1) as f64;
    (0..n).map(|i| if i == n - 1 { hi } else { lo + i as f64 * h }).collect()
}

/// Nodes of an `n x n` grid on the unit square, row-major with `x` varying
/// fastest.
pub fn square_grid(n: usize) -> Vec<f64> {
    let t = linspace(0.0, 1.0, n);
    let mut pts = Vec::with_capacity(2 * n * n);
    for y in &t {
        for x in &t {
            pts.push(*x);
            pts.push(*y);
        }
    }
    pts
}
