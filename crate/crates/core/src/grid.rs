//! Rectilinear state grids, time grids, and multilinear interpolation.

use crate::error::{Error, Result};

/// A rectilinear grid: one strictly increasing coordinate axis per state
/// dimension. Flat indexing is row-major with the last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrid {
    axes: Vec<Vec<f64>>,
}

impl StateGrid {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one axis".into()));
        }
        for (i, axis) in axes.iter().enumerate() {
            if axis.len() < 2 {
                return Err(Error::InvalidArgument(format!(
                    "axis {i} needs at least two points, got {}",
                    axis.len()
                )));
            }
            if axis.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("axis {i} has non-finite points")));
            }
            if axis.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::InvalidArgument(format!(
                    "axis {i} must be strictly increasing"
                )));
            }
        }
        Ok(Self { axes })
    }

    /// Uniformly spaced grid over a box.
    pub fn uniform(bounds: &[(f64, f64)], points: &[usize]) -> Result<Self> {
        if bounds.len() != points.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} bounds vs {} point counts",
                bounds.len(),
                points.len()
            )));
        }
        let axes = bounds
            .iter()
            .zip(points)
            .map(|(&(lo, hi), &n)| {
                if !(hi > lo) {
                    return Err(Error::InvalidArgument(format!(
                        "degenerate axis bounds ({lo}, {hi})"
                    )));
                }
                if n < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "axis needs at least two points, got {n}"
                    )));
                }
                let h = (hi - lo) / (n - 1) as f64;
                Ok((0..n)
                    .map(|i| if i == n - 1 { hi } else { lo + i as f64 * h })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(axes)
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Vec<f64>] {
        &self.axes
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(Vec::len).collect()
    }

    /// Total number of nodes.
    pub fn len(&self) -> usize {
        self.axes.iter().map(Vec::len).product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Smallest spacing over all axes.
    pub fn min_spacing(&self) -> f64 {
        self.axes
            .iter()
            .flat_map(|a| a.windows(2).map(|w| w[1] - w[0]))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn node(&self, multi: &[usize]) -> Result<Vec<f64>> {
        self.check_multi(multi)?;
        Ok(multi
            .iter()
            .zip(&self.axes)
            .map(|(&i, axis)| axis[i])
            .collect())
    }

    fn check_multi(&self, multi: &[usize]) -> Result<()> {
        if multi.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "index has {} components for a {}-dimensional grid",
                multi.len(),
                self.dim()
            )));
        }
        for (d, (&i, axis)) in multi.iter().zip(&self.axes).enumerate() {
            if i >= axis.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for axis {d} of length {}",
                    axis.len()
                )));
            }
        }
        Ok(())
    }

    /// Row-major flat index (last axis fastest).
    pub fn flat_index(&self, multi: &[usize]) -> Result<usize> {
        self.check_multi(multi)?;
        let mut flat = 0;
        for (&i, axis) in multi.iter().zip(&self.axes) {
            flat = flat * axis.len() + i;
        }
        Ok(flat)
    }

    pub fn multi_index(&self, mut flat: usize) -> Result<Vec<usize>> {
        if flat >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "flat index {flat} out of range for {} nodes",
                self.len()
            )));
        }
        let mut multi = vec![0; self.dim()];
        for (m, axis) in multi.iter_mut().zip(&self.axes).rev() {
            *m = flat % axis.len();
            flat /= axis.len();
        }
        Ok(multi)
    }

    /// Nearest grid node to a point (componentwise).
    pub fn nearest(&self, x: &[f64]) -> Result<Vec<usize>> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has {} coordinates for a {}-dimensional grid",
                x.len(),
                self.dim()
            )));
        }
        Ok(x.iter()
            .zip(&self.axes)
            .map(|(&xi, axis)| {
                let j = axis.partition_point(|&v| v < xi).min(axis.len() - 1);
                if j > 0 && (xi - axis[j - 1]).abs() <= (axis[j] - xi).abs() {
                    j - 1
                } else {
                    j
                }
            })
            .collect())
    }

    /// Multilinear interpolation of nodal values at a point. Points outside
    /// the domain are clamped to the boundary (constant extrapolation).
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Result<f64> {
        if values.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} grid nodes",
                values.len(),
                self.len()
            )));
        }
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has {} coordinates for a {}-dimensional grid",
                x.len(),
                self.dim()
            )));
        }
        // Lower cell corner and fractional weight per axis.
        let mut lows = Vec::with_capacity(self.dim());
        let mut fracs = Vec::with_capacity(self.dim());
        for (&xi, axis) in x.iter().zip(&self.axes) {
            let n = axis.len();
            let xi = xi.clamp(axis[0], axis[n - 1]);
            let j = axis.partition_point(|&v| v <= xi).min(n - 1);
            let low = j.saturating_sub(1);
            let frac = (xi - axis[low]) / (axis[low + 1.min(n - 1 - low)] - axis[low]);
            lows.push(low.min(n - 2));
            fracs.push(frac.clamp(0.0, 1.0));
        }
        let d = self.dim();
        let mut total = 0.0;
        let mut corner = vec![0usize; d];
        for mask in 0..(1usize << d) {
            let mut weight = 1.0;
            for i in 0..d {
                if mask >> i & 1 == 1 {
                    corner[i] = lows[i] + 1;
                    weight *= fracs[i];
                } else {
                    corner[i] = lows[i];
                    weight *= 1.0 - fracs[i];
                }
            }
            if weight != 0.0 {
                total += weight * values[self.flat_index(&corner)?];
            }
        }
        Ok(total)
    }
}

/// A uniform time grid on [t0, t1].
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t1 > t0) || !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "time grid needs t1 > t0, got [{t0}, {t1}]"
            )));
        }
        if n_steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        Ok(Self { t0, t1, n_steps })
    }

    pub fn dt(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    /// The n_steps + 1 grid times, ending exactly at t1.
    pub fn times(&self) -> Vec<f64> {
        let dt = self.dt();
        (0..=self.n_steps)
            .map(|i| {
                if i == self.n_steps {
                    self.t1
                } else {
                    self.t0 + i as f64 * dt
                }
            })
            .collect()
    }
}
