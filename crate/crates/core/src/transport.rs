//! Continuity equation `∂ρ/∂t + div(vρ) = 0` on a regular grid.
//!
//! The update is the first-order donor-cell (upwind) finite-volume scheme in
//! conservative form. Each face carries the flux
//!
//! ```text
//! F = v_n(face midpoint) * ρ(upwind cell)
//! ```
//!
//! and a cell changes by the net flux through its faces, applied to all axes
//! at once (no dimensional splitting). Faces on the outer boundary are
//! outflow faces: outgoing flux leaves the system, nothing comes in. Interior
//! fluxes cancel pairwise, so mass only changes through the boundary.
//!
//! Positivity holds when every cell loses at most its own mass per step,
//! i.e. `dt * Σ_faces (outgoing normal speed / dx) ≤ 1`; this outflow Courant
//! number is the stability measure used by [`max_stable_dt`] and enforced by
//! [`UpwindOperator::step`].

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::fields::VelocityField;
use crate::grid::{DensityField, GridSpec};
use crate::linalg::cholesky_lower;
use crate::particles::step_count;

/// Upper cap returned by [`max_stable_dt`] when the field imposes no limit.
pub const DT_MAX: f64 = 1.0;

/// Guard added to the outflow rate in [`max_stable_dt`].
pub const RATE_EPSILON: f64 = 1e-12;

/// Negative values below `-NEGATIVITY_TOL * max density` are scheme errors;
/// smaller round-off negatives are set to zero.
pub const NEGATIVITY_TOL: f64 = 1e-14;

/// Gaussian mass that must fall inside the grid.
pub const GAUSSIAN_COVERAGE: f64 = 0.999;

/// Face-normal velocities of a field on a grid, precomputed once.
#[derive(Debug, Clone)]
pub struct UpwindOperator {
    grid: GridSpec,
    /// Per axis, velocities on that axis' faces. Face `i` along axis `k` is
    /// the lower face of cell `i`; the face array has `cells[k] + 1` entries
    /// along axis `k` and is row-major like the cell array.
    faces: Vec<Vec<f64>>,
    face_strides: Vec<Vec<usize>>,
    max_outflow_rate: f64,
}

impl UpwindOperator {
    pub fn new(field: &VelocityField, grid: &GridSpec) -> Result<Self> {
        if field.dim() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                got: field.dim(),
            });
        }
        let p = grid.dim();
        let mut faces = Vec::with_capacity(p);
        let mut face_strides = Vec::with_capacity(p);
        for k in 0..p {
            let mut shape = grid.cells().to_vec();
            shape[k] += 1;
            let strides = row_major_strides(&shape);
            let total: usize = shape.iter().product();
            let v: Vec<f64> = (0..total)
                .into_par_iter()
                .map(|f| {
                    let mut x = DVector::zeros(p);
                    let mut rem = f;
                    for a in 0..p {
                        let i = rem / strides[a];
                        rem %= strides[a];
                        x[a] = if a == k {
                            grid.lower()[a] + i as f64 * grid.dx()[a]
                        } else {
                            grid.center_coord(a, i)
                        };
                    }
                    field.eval(&x).map(|v| v[k])
                })
                .collect::<Result<_>>()?;
            faces.push(v);
            face_strides.push(strides);
        }
        let mut op = Self {
            grid: grid.clone(),
            faces,
            face_strides,
            max_outflow_rate: 0.0,
        };
        op.max_outflow_rate = (0..grid.len())
            .into_par_iter()
            .map(|c| op.outflow_rate(c))
            .reduce(|| 0.0, f64::max);
        Ok(op)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    /// Largest per-cell outflow rate `Σ_faces outgoing speed / dx`.
    pub fn max_outflow_rate(&self) -> f64 {
        self.max_outflow_rate
    }

    /// Largest stable step at the given Courant number, capped at
    /// [`DT_MAX`].
    pub fn max_stable_dt(&self, cfl: f64) -> f64 {
        (cfl / (self.max_outflow_rate + RATE_EPSILON)).min(DT_MAX)
    }

    /// Outflow Courant number `dt * max_outflow_rate`.
    pub fn courant(&self, dt: f64) -> f64 {
        dt * self.max_outflow_rate
    }

    fn lower_face(&self, k: usize, cell_idx: &[usize]) -> usize {
        cell_idx
            .iter()
            .zip(&self.face_strides[k])
            .map(|(i, s)| i * s)
            .sum()
    }

    fn outflow_rate(&self, c: usize) -> f64 {
        let idx = self.grid.index_array(c);
        (0..self.grid.dim())
            .map(|k| {
                let lo = self.lower_face(k, &idx);
                let hi = lo + self.face_strides[k][k];
                let v_lo = self.faces[k][lo];
                let v_hi = self.faces[k][hi];
                (v_hi.max(0.0) + (-v_lo).max(0.0)) / self.grid.dx()[k]
            })
            .sum()
    }

    /// Upwind flux through lower face of cell `idx` along axis `k`.
    fn flux_lower(&self, values: &[f64], k: usize, c: usize, idx: &[usize]) -> f64 {
        let v = self.faces[k][self.lower_face(k, idx)];
        if v > 0.0 {
            if idx[k] == 0 {
                0.0
            } else {
                v * values[c - self.grid.strides()[k]]
            }
        } else {
            v * values[c]
        }
    }

    /// Upwind flux through upper face of cell `idx` along axis `k`.
    fn flux_upper(&self, values: &[f64], k: usize, c: usize, idx: &[usize]) -> f64 {
        let v = self.faces[k][self.lower_face(k, idx) + self.face_strides[k][k]];
        if v > 0.0 {
            v * values[c]
        } else if idx[k] + 1 == self.grid.cells()[k] {
            0.0
        } else {
            v * values[c + self.grid.strides()[k]]
        }
    }

    /// Conservative discrete divergence of `vρ` per cell:
    /// `Σ_k (F_upper − F_lower) / dx_k`.
    pub fn flux_divergence(&self, values: &[f64]) -> Vec<f64> {
        (0..self.grid.len())
            .into_par_iter()
            .map(|c| {
                let idx = self.grid.index_array(c);
                (0..self.grid.dim())
                    .map(|k| {
                        (self.flux_upper(values, k, c, &idx) - self.flux_lower(values, k, c, &idx))
                            / self.grid.dx()[k]
                    })
                    .sum()
            })
            .collect()
    }

    /// Mass leaving through the outer boundary during one step of `dt`.
    pub fn boundary_outflow(&self, values: &[f64], dt: f64) -> f64 {
        let vol = self.grid.cell_volume();
        let mut out = 0.0;
        for (c, value) in values.iter().enumerate() {
            let idx = self.grid.index_array(c);
            for k in 0..self.grid.dim() {
                let area = vol / self.grid.dx()[k];
                if idx[k] == 0 {
                    let v = self.faces[k][self.lower_face(k, &idx)];
                    if v < 0.0 {
                        out += -v * value * area;
                    }
                }
                if idx[k] + 1 == self.grid.cells()[k] {
                    let v = self.faces[k][self.lower_face(k, &idx) + self.face_strides[k][k]];
                    if v > 0.0 {
                        out += v * value * area;
                    }
                }
            }
        }
        out * dt
    }

    /// One upwind step. Refuses steps above the outflow CFL limit.
    pub fn step(&self, rho: &DensityField, dt: f64) -> Result<StepResult> {
        if rho.grid != self.grid {
            return Err(Error::GridMismatch);
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt = {dt} must be positive")));
        }
        if self.courant(dt) > 1.0 + 1e-12 {
            return Err(Error::Stability {
                dt,
                max_dt: 1.0 / self.max_outflow_rate,
            });
        }
        let outflow = self.boundary_outflow(&rho.values, dt);
        let div = self.flux_divergence(&rho.values);
        let scale = rho.values.iter().fold(0.0_f64, |a, v| a.max(*v));
        let floor = -NEGATIVITY_TOL * scale;
        let mut values = Vec::with_capacity(rho.values.len());
        for (c, (old, d)) in rho.values.iter().zip(&div).enumerate() {
            let v = old - dt * d;
            if v < floor {
                return Err(Error::Scheme { cell: c, value: v });
            }
            values.push(v.max(0.0));
        }
        Ok(StepResult {
            density: DensityField {
                grid: self.grid.clone(),
                values,
                time: rho.time + dt,
            },
            outflow,
        })
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub density: DensityField,
    /// Mass that left through the boundary during the step.
    pub outflow: f64,
}

/// One conservative upwind step of `rho` under `field`.
pub fn transport_step(rho: &DensityField, field: &VelocityField, dt: f64) -> Result<DensityField> {
    Ok(UpwindOperator::new(field, &rho.grid)?.step(rho, dt)?.density)
}

/// `cfl / (max outflow rate + ε)`, capped at [`DT_MAX`]. In one dimension
/// with a field of constant sign this is `cfl * dx / max|v|`.
pub fn max_stable_dt(field: &VelocityField, grid: &GridSpec, cfl: f64) -> Result<f64> {
    if !(cfl > 0.0 && cfl <= 1.0) {
        return Err(Error::InvalidArgument(format!("cfl = {cfl} outside (0, 1]")));
    }
    Ok(UpwindOperator::new(field, grid)?.max_stable_dt(cfl))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    pub mass: f64,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Total momenta `E = ∫ ‖v‖² ρ`.
    pub momenta: f64,
    pub time: f64,
}

/// Mass, mean and covariance by cell-center quadrature; mean and
/// covariance are normalised by the mass.
pub fn density_moments(rho: &DensityField) -> Result<(f64, DVector<f64>, DMatrix<f64>)> {
    let g = &rho.grid;
    let p = g.dim();
    let vol = g.cell_volume();
    let mass = rho.mass();
    if !(mass > 0.0) {
        return Err(Error::ZeroMass);
    }
    let mut mean = DVector::zeros(p);
    for (c, &v) in rho.values.iter().enumerate() {
        if v > 0.0 {
            mean += g.center(c) * (v * vol);
        }
    }
    mean /= mass;
    let mut cov = DMatrix::zeros(p, p);
    for (c, &v) in rho.values.iter().enumerate() {
        if v > 0.0 {
            let d = g.center(c) - &mean;
            cov += &d * d.transpose() * (v * vol);
        }
    }
    cov /= mass;
    Ok((mass, mean, cov))
}

/// Moments of `rho` plus total momenta under `field`. Cells with zero
/// density are not evaluated.
pub fn moment_report(rho: &DensityField, field: &VelocityField) -> Result<MomentReport> {
    let (mass, mean, covariance) = density_moments(rho)?;
    let g = &rho.grid;
    let vol = g.cell_volume();
    let terms: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|c| {
            let v = rho.values[c];
            if v > 0.0 {
                Ok(field.eval(&g.center(c))?.norm_squared() * v * vol)
            } else {
                Ok(0.0)
            }
        })
        .collect::<Result<_>>()?;
    Ok(MomentReport {
        mass,
        mean,
        covariance,
        momenta: terms.iter().sum(),
        time: rho.time,
    })
}

/// Gaussian `N(mean, cov)` sampled at cell centers and renormalised to unit
/// mass.
///
/// The grid must hold at least [`GAUSSIAN_COVERAGE`] of the Gaussian mass,
/// judged by the largest Mahalanobis ellipsoid that fits in the box around
/// the mean; otherwise [`Error::GridTooSmall`] suggests sufficient extents.
pub fn gaussian_density(
    grid: &GridSpec,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<DensityField> {
    let p = grid.dim();
    if mean.len() != p || cov.nrows() != p || cov.ncols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: mean.len(),
        });
    }
    let l = cholesky_lower(cov).map_err(|_| Error::NotSpd)?;
    let upper = grid.upper();
    if (0..p).any(|k| !(mean[k] > grid.lower()[k] && mean[k] < upper[k])) {
        return Err(Error::InvalidArgument(format!(
            "mean {:?} lies outside the grid",
            mean.as_slice()
        )));
    }
    let chi2 = ChiSquared::new(p as f64).expect("positive degrees of freedom");
    let radius = (0..p)
        .map(|k| (mean[k] - grid.lower()[k]).min(upper[k] - mean[k]) / cov[(k, k)].sqrt())
        .fold(f64::INFINITY, f64::min);
    if chi2.cdf(radius * radius) < GAUSSIAN_COVERAGE {
        let needed = chi2.inverse_cdf(GAUSSIAN_COVERAGE).sqrt();
        return Err(Error::GridTooSmall {
            suggested_lower: (0..p).map(|k| mean[k] - needed * cov[(k, k)].sqrt()).collect(),
            suggested_upper: (0..p).map(|k| mean[k] + needed * cov[(k, k)].sqrt()).collect(),
        });
    }
    let values: Vec<f64> = (0..grid.len())
        .into_par_iter()
        .map(|c| {
            let d = grid.center(c) - mean;
            let z = l
                .solve_lower_triangular(&d)
                .expect("Cholesky factor is nonsingular");
            (-0.5 * z.norm_squared()).exp()
        })
        .collect();
    let mut rho = DensityField {
        grid: grid.clone(),
        values,
        time: 0.0,
    };
    rho.normalize()?;
    Ok(rho)
}

/// What [`solve_transport`] does when the requested step is above the
/// stability limit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SubstepPolicy {
    /// Fail with [`Error::Stability`].
    #[default]
    Refuse,
    /// Split each step into the fewest equal substeps whose outflow Courant
    /// number is at most `cfl`.
    Subcycle { cfl: f64 },
}

/// A requested snapshot time moved to the nearest step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnappedTime {
    pub requested: f64,
    pub actual: f64,
}

#[derive(Debug, Clone)]
pub struct TransportRun {
    pub snapshots: Vec<DensityField>,
    pub reports: Vec<MomentReport>,
    /// Cumulative boundary outflow at each snapshot.
    pub outflow: Vec<f64>,
    pub snapped: Vec<SnappedTime>,
    /// Substeps per requested step (1 unless subcycling kicked in).
    pub substeps: usize,
    /// Outflow Courant number of the requested `dt`.
    pub requested_courant: f64,
}

/// Advances `rho0` to `t_end` in steps of `dt`, recording densities and
/// moment reports at `snapshot_times` (snapped to the nearest step).
pub fn solve_transport(
    rho0: &DensityField,
    field: &VelocityField,
    dt: f64,
    t_end: f64,
    snapshot_times: &[f64],
    policy: SubstepPolicy,
) -> Result<TransportRun> {
    let op = UpwindOperator::new(field, &rho0.grid)?;
    solve_with_operator(&op, rho0, field, dt, t_end, snapshot_times, policy)
}

/// [`solve_transport`] with a prebuilt operator.
pub fn solve_with_operator(
    op: &UpwindOperator,
    rho0: &DensityField,
    field: &VelocityField,
    dt: f64,
    t_end: f64,
    snapshot_times: &[f64],
    policy: SubstepPolicy,
) -> Result<TransportRun> {
    let n_steps = step_count(dt, t_end)?;
    let mut targets = Vec::with_capacity(snapshot_times.len());
    let mut snapped = Vec::new();
    for &t in snapshot_times {
        if !(t >= 0.0 && t <= t_end + 0.5 * dt) {
            return Err(Error::InvalidArgument(format!(
                "snapshot time {t} outside [0, {t_end}]"
            )));
        }
        let i = ((t / dt).round() as usize).min(n_steps);
        let actual = i as f64 * dt;
        if (actual - t).abs() > 1e-9 * dt.max(t.abs()) {
            snapped.push(SnappedTime {
                requested: t,
                actual,
            });
        }
        targets.push(i);
    }
    targets.sort_unstable();

    let requested_courant = op.courant(dt);
    let substeps = match policy {
        SubstepPolicy::Refuse => {
            if requested_courant > 1.0 + 1e-12 {
                return Err(Error::Stability {
                    dt,
                    max_dt: 1.0 / op.max_outflow_rate(),
                });
            }
            1
        }
        SubstepPolicy::Subcycle { cfl } => {
            if !(cfl > 0.0 && cfl <= 1.0) {
                return Err(Error::InvalidArgument(format!("cfl = {cfl} outside (0, 1]")));
            }
            ((requested_courant / cfl).ceil() as usize).max(1)
        }
    };
    let h = dt / substeps as f64;

    let mut run = TransportRun {
        snapshots: Vec::with_capacity(targets.len()),
        reports: Vec::with_capacity(targets.len()),
        outflow: Vec::with_capacity(targets.len()),
        snapped,
        substeps,
        requested_courant,
    };
    let mut rho = rho0.clone();
    let t0 = rho0.time;
    let mut outflow = 0.0;
    let mut next = 0;
    for i in 0..=n_steps {
        if i > 0 {
            for _ in 0..substeps {
                let r = op.step(&rho, h).map_err(|e| e.at_time(rho.time))?;
                outflow += r.outflow;
                rho = r.density;
            }
            rho.time = t0 + i as f64 * dt;
        }
        while next < targets.len() && targets[next] == i {
            run.reports.push(moment_report(&rho, field)?);
            run.snapshots.push(rho.clone());
            run.outflow.push(outflow);
            next += 1;
        }
    }
    Ok(run)
}
