//! Regular rectangular lattices, axis-aligned working domains and
//! cell-averaged density fields.
//!
//! Cells are stored row-major: the last axis varies fastest. Cell `i` along
//! axis `k` spans `[lower[k] + i*dx[k], lower[k] + (i+1)*dx[k]]`.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Default cap on the total number of cells.
pub const DEFAULT_CELL_BUDGET: usize = 20_000_000;

/// Largest supported dimension.
pub const MAX_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkingDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl WorkingDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidArgument(
                "domain bounds must have equal, nonzero length".into(),
            ));
        }
        if lower
            .iter()
            .zip(&upper)
            .any(|(l, u)| !(l.is_finite() && u.is_finite() && u > l))
        {
            return Err(Error::InvalidArgument(
                "domain requires finite lower < upper on every axis".into(),
            ));
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    /// Closed-box membership.
    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= *l && *v <= *u)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lower: Vec<f64>,
    dx: Vec<f64>,
    cells: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, dx: Vec<f64>, cells: Vec<usize>) -> Result<Self> {
        Self::with_budget(lower, dx, cells, DEFAULT_CELL_BUDGET)
    }

    pub fn with_budget(
        lower: Vec<f64>,
        dx: Vec<f64>,
        cells: Vec<usize>,
        budget: usize,
    ) -> Result<Self> {
        let p = lower.len();
        if p == 0 || p > MAX_DIM {
            return Err(Error::InvalidGrid(format!(
                "dimension {p} outside 1..={MAX_DIM}"
            )));
        }
        if dx.len() != p || cells.len() != p {
            return Err(Error::InvalidGrid(format!(
                "lower/dx/cells lengths differ ({}, {}, {})",
                p,
                dx.len(),
                cells.len()
            )));
        }
        if lower.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidGrid("non-finite lower bound".into()));
        }
        if dx.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(Error::InvalidGrid("cell widths must be positive".into()));
        }
        if let Some(k) = cells.iter().position(|&n| n < 3) {
            return Err(Error::InvalidGrid(format!(
                "axis {k} has {} cells, need at least 3",
                cells[k]
            )));
        }
        let len = cells
            .iter()
            .try_fold(1usize, |acc, &n| acc.checked_mul(n))
            .filter(|&n| n <= budget)
            .ok_or_else(|| {
                Error::InvalidGrid(format!("cell count exceeds budget of {budget}"))
            })?;
        let mut strides = vec![1usize; p];
        for k in (0..p.saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * cells[k + 1];
        }
        Ok(Self {
            lower,
            dx,
            cells,
            strides,
            len,
        })
    }

    /// Grid whose cell centers run from `first_center` to `last_center`
    /// (inclusive) in steps of `dx` on every axis.
    pub fn cell_centered(first_center: &[f64], last_center: &[f64], dx: &[f64]) -> Result<Self> {
        let mut lower = Vec::with_capacity(dx.len());
        let mut cells = Vec::with_capacity(dx.len());
        for ((&a, &b), &h) in first_center.iter().zip(last_center).zip(dx) {
            let n = ((b - a) / h).round() as i64 + 1;
            if n < 1 {
                return Err(Error::InvalidGrid("empty center range".into()));
            }
            lower.push(a - 0.5 * h);
            cells.push(n as usize);
        }
        Self::new(lower, dx.to_vec(), cells)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn cells(&self) -> &[usize] {
        &self.cells
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn upper(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|k| self.lower[k] + self.dx[k] * self.cells[k] as f64)
            .collect()
    }

    /// Total number of cells.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.dx.iter().product()
    }

    pub fn domain(&self) -> WorkingDomain {
        WorkingDomain {
            lower: self.lower.clone(),
            upper: self.upper(),
        }
    }

    pub fn center_coord(&self, axis: usize, i: usize) -> f64 {
        self.lower[axis] + (i as f64 + 0.5) * self.dx[axis]
    }

    pub fn multi_index(&self, linear: usize) -> Vec<usize> {
        self.index_array(linear)[..self.dim()].to_vec()
    }

    /// [`GridSpec::multi_index`] without allocating; entries past `dim()`
    /// are zero.
    pub fn index_array(&self, mut linear: usize) -> [usize; MAX_DIM] {
        let mut idx = [0; MAX_DIM];
        for (k, s) in self.strides.iter().enumerate() {
            idx[k] = linear / s;
            linear %= s;
        }
        idx
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn center(&self, linear: usize) -> DVector<f64> {
        let idx = self.multi_index(linear);
        DVector::from_iterator(
            self.dim(),
            idx.iter().enumerate().map(|(k, &i)| self.center_coord(k, i)),
        )
    }

    /// All cell centers in storage order.
    pub fn centers(&self) -> Vec<DVector<f64>> {
        (0..self.len).map(|c| self.center(c)).collect()
    }

    /// Index of the cell containing `x`. Points on the upper boundary belong
    /// to the last cell.
    pub fn locate(&self, x: &DVector<f64>) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut linear = 0;
        for k in 0..self.dim() {
            let s = (x[k] - self.lower[k]) / self.dx[k];
            if !(s >= 0.0) {
                return None;
            }
            let mut i = s.floor() as usize;
            if i >= self.cells[k] {
                if s <= self.cells[k] as f64 {
                    i = self.cells[k] - 1;
                } else {
                    return None;
                }
            }
            linear += i * self.strides[k];
        }
        Some(linear)
    }

    /// Nearest cell index along one axis, clamped to the grid.
    pub fn nearest_index(&self, axis: usize, coord: f64) -> usize {
        let s = ((coord - self.lower[axis]) / self.dx[axis]).floor();
        s.clamp(0.0, (self.cells[axis] - 1) as f64) as usize
    }

    /// True when the cell touches the outer boundary.
    pub fn is_boundary_cell(&self, linear: usize) -> bool {
        self.multi_index(linear)
            .iter()
            .zip(&self.cells)
            .any(|(&i, &n)| i == 0 || i + 1 == n)
    }
}

/// Nonnegative density over a grid; `values` are densities (mass per unit
/// volume) at cell centers, so a cell holds `value * cell_volume` mass.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub time: f64,
}

impl DensityField {
    pub fn new(grid: GridSpec, values: Vec<f64>, time: f64) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::DimensionMismatch {
                expected: grid.len(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "density values must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { grid, values, time })
    }

    pub fn zeros(grid: GridSpec, time: f64) -> Self {
        let values = vec![0.0; grid.len()];
        Self { grid, values, time }
    }

    /// Uniform density with total mass one.
    pub fn uniform(grid: GridSpec, time: f64) -> Self {
        let v = 1.0 / (grid.len() as f64 * grid.cell_volume());
        let values = vec![v; grid.len()];
        Self { grid, values, time }
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Rescales to unit mass.
    pub fn normalize(&mut self) -> Result<()> {
        let m = self.mass();
        if !(m > 0.0) {
            return Err(Error::ZeroMass);
        }
        self.values.iter_mut().for_each(|v| *v /= m);
        Ok(())
    }

    /// Mass within Euclidean distance `radius` of `point`, using cell centers.
    pub fn mass_within(&self, point: &DVector<f64>, radius: f64) -> f64 {
        let vol = self.grid.cell_volume();
        (0..self.grid.len())
            .filter(|&c| self.values[c] > 0.0)
            .filter(|&c| (self.grid.center(c) - point).norm() <= radius)
            .map(|c| self.values[c] * vol)
            .sum()
    }
}
