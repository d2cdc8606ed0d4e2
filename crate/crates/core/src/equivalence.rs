//! Side-by-side checks of the particle and density descriptions of a flow.
//!
//! * [`compare_densities`] and [`equivalence_experiment`]: particles and the
//!   transport solver evolved from matched initial conditions.
//! * [`drift_test`], [`variance_test`], [`lemma_halving`]: one transport step
//!   from a narrow Gaussian, compared with the first-order moment
//!   predictions.
//! * [`velocity_identification`]: which candidate field best explains an
//!   observed density change.
//! * [`delta_surrogate_test`]: the mean-value identity for a point mass with
//!   the point mass replaced by a narrow Gaussian.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::builtin::affine;
use crate::fields::VelocityField;
use crate::grid::{DensityField, GridSpec};
use crate::particles::{
    advance_ensemble, empirical_density, sample_initial, step_count, InitLaw, Method, Smoothing,
};
use crate::transport::{
    density_moments, gaussian_density, solve_with_operator, MomentReport,
    SubstepPolicy, UpwindOperator,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    /// `Σ |a − b| · cell volume`.
    pub l1_distance: f64,
    pub max_abs: f64,
    pub mass_1: f64,
    pub mass_2: f64,
    pub time: f64,
}

/// Grid-L1 and max-abs difference of two densities on the same grid.
pub fn compare_densities(a: &DensityField, b: &DensityField) -> Result<ComparisonReport> {
    if a.grid != b.grid {
        return Err(Error::GridMismatch);
    }
    let vol = a.grid.cell_volume();
    let (mut l1, mut max_abs) = (0.0, 0.0_f64);
    for (x, y) in a.values.iter().zip(&b.values) {
        let d = (x - y).abs();
        l1 += d;
        max_abs = max_abs.max(d);
    }
    Ok(ComparisonReport {
        l1_distance: l1 * vol,
        max_abs,
        mass_1: a.mass(),
        mass_2: b.mass(),
        time: a.time,
    })
}

/// Inputs of [`equivalence_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub field: VelocityField,
    pub init_mean: DVector<f64>,
    pub init_cov: DMatrix<f64>,
    pub n_particles: usize,
    pub grid: GridSpec,
    pub dt: f64,
    pub t_end: f64,
    pub snapshot_times: Vec<f64>,
    pub seed: u64,
    pub method: Method,
    pub smoothing: Smoothing,
    pub policy: SubstepPolicy,
}

#[derive(Debug, Clone)]
pub struct SnapshotComparison {
    pub report: ComparisonReport,
    /// Fraction of particles that left the grid so far.
    pub escaped_fraction: f64,
    /// Mass that left the grid through the transport boundary so far.
    pub outflow_fraction: f64,
    pub pde: DensityField,
    /// Particle density; each particle carries mass `1/n_particles`, so
    /// escaped particles show up as missing mass.
    pub particles: DensityField,
    pub pde_moments: MomentReport,
}

impl SnapshotComparison {
    /// `|escaped fraction − outflow fraction|`.
    pub fn escape_gap(&self) -> f64 {
        (self.escaped_fraction - self.outflow_fraction).abs()
    }
}

/// Evolves a Gaussian initial condition both as a particle ensemble and
/// with the transport solver, comparing the two at each snapshot.
///
/// The PDE starts from the discretised Gaussian and the particles from
/// i.i.d. draws of the same Gaussian restricted to the grid box. Particles
/// leaving the box are removed, mirroring the outflow boundary.
pub fn equivalence_experiment(spec: &ExperimentSpec) -> Result<Vec<SnapshotComparison>> {
    let grid = &spec.grid;
    let rho0 = gaussian_density(grid, &spec.init_mean, &spec.init_cov)?;
    let op = UpwindOperator::new(&spec.field, grid)?;
    let run = solve_with_operator(
        &op,
        &rho0,
        &spec.field,
        spec.dt,
        spec.t_end,
        &spec.snapshot_times,
        spec.policy,
    )?;

    let field = spec.field.clone().with_domain(grid.domain());
    let law = InitLaw::Gaussian {
        mean: spec.init_mean.clone(),
        cov: spec.init_cov.clone(),
    };
    let mut ensemble = sample_initial(&grid.domain(), &law, spec.n_particles, spec.seed)?;
    let n0 = spec.n_particles as f64;
    let mut escaped = 0usize;
    let mut step_at = 0usize;
    let mut out = Vec::with_capacity(run.snapshots.len());
    for ((pde, moments), outflow) in run.snapshots.into_iter().zip(run.reports).zip(run.outflow) {
        let target = step_count(spec.dt, pde.time - rho0.time)?;
        if target > step_at {
            let adv = advance_ensemble(
                &ensemble,
                &field,
                spec.dt,
                (target - step_at) as f64 * spec.dt,
                spec.method,
            )?;
            escaped += adv.escaped;
            ensemble = adv.ensemble;
            ensemble.time = pde.time;
            step_at = target;
        }
        let particles = if ensemble.is_empty() {
            DensityField::zeros(grid.clone(), pde.time)
        } else {
            let mut d = empirical_density(&ensemble, grid, spec.smoothing)?;
            let keep = ensemble.len() as f64 / n0;
            d.values.iter_mut().for_each(|v| *v *= keep);
            d.time = pde.time;
            d
        };
        out.push(SnapshotComparison {
            report: compare_densities(&pde, &particles)?,
            escaped_fraction: escaped as f64 / n0,
            outflow_fraction: outflow / rho0.mass(),
            pde,
            particles,
            pde_moments: moments,
        });
    }
    Ok(out)
}

/// Grid resolving `N(center, σ²I)` to eight standard deviations with a cell
/// centered on `center`.
pub fn lemma_grid(center: &DVector<f64>, sigma: f64, dx: f64) -> Result<GridSpec> {
    if !(sigma > 0.0 && dx > 0.0) {
        return Err(Error::InvalidArgument("sigma and dx must be positive".into()));
    }
    let half = (8.0 * sigma / dx).ceil();
    let p = center.len();
    let first: Vec<f64> = center.iter().map(|c| c - half * dx).collect();
    let last: Vec<f64> = center.iter().map(|c| c + half * dx).collect();
    GridSpec::cell_centered(&first, &last, &vec![dx; p])
}

struct OneStep {
    before: (f64, DVector<f64>, DMatrix<f64>),
    after: (f64, DVector<f64>, DMatrix<f64>),
}

fn one_step(
    field: &VelocityField,
    center: &DVector<f64>,
    sigma: f64,
    dt: f64,
    grid: &GridSpec,
) -> Result<OneStep> {
    let max_dx = grid.dx().iter().cloned().fold(0.0, f64::max);
    if sigma < 4.0 * max_dx * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "sigma = {sigma} under-resolved: need sigma >= 4 dx = {}",
            4.0 * max_dx
        )));
    }
    let p = grid.dim();
    let rho = gaussian_density(grid, center, &(DMatrix::identity(p, p) * (sigma * sigma)))?;
    let next = UpwindOperator::new(field, grid)?.step(&rho, dt)?.density;
    Ok(OneStep {
        before: density_moments(&rho)?,
        after: density_moments(&next)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub sigma: f64,
    pub dt: f64,
    pub observed_shift: DVector<f64>,
    /// `v(center) · dt`.
    pub predicted_shift: DVector<f64>,
    /// `‖observed − predicted‖₂`.
    pub residual: f64,
}

/// One transport step from `N(center, σ²I)`: observed mean shift against
/// `v(center) dt`.
pub fn drift_test(
    field: &VelocityField,
    center: &DVector<f64>,
    sigma: f64,
    dt: f64,
    grid: &GridSpec,
) -> Result<DriftReport> {
    let s = one_step(field, center, sigma, dt, grid)?;
    drift_from(field, center, sigma, dt, &s)
}

fn drift_from(
    field: &VelocityField,
    center: &DVector<f64>,
    sigma: f64,
    dt: f64,
    s: &OneStep,
) -> Result<DriftReport> {
    let observed = &s.after.1 - &s.before.1;
    let predicted = field.eval(center)? * dt;
    Ok(DriftReport {
        sigma,
        dt,
        residual: (&observed - &predicted).norm(),
        observed_shift: observed,
        predicted_shift: predicted,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub sigma: f64,
    pub dt: f64,
    /// `‖cov(t+dt) − cov(t)‖_max`.
    pub delta_cov_norm: f64,
    /// `delta_cov_norm / (σ² dt)`.
    pub normalized: f64,
    /// Change left after removing the change produced, with the same scheme
    /// on the same grid, by the linearisation `v(center) + A (x − center)`,
    /// `A` the Jacobian at `center`; divided by `σ² dt`.
    ///
    /// For a linear field the covariance moves at rate `AΣ + ΣAᵀ`, which is
    /// of order `Σ`, not smaller; only this remainder is expected to vanish
    /// relative to `Σ` as `σ → 0`.
    pub nonlinear_normalized: f64,
}

/// One transport step from `N(center, σ²I)`: covariance change, raw and
/// with the linearised field's contribution removed.
pub fn variance_test(
    field: &VelocityField,
    center: &DVector<f64>,
    sigma: f64,
    dt: f64,
    grid: &GridSpec,
) -> Result<VarianceReport> {
    let s = one_step(field, center, sigma, dt, grid)?;
    variance_from(field, center, sigma, dt, grid, &s)
}

fn variance_from(
    field: &VelocityField,
    center: &DVector<f64>,
    sigma: f64,
    dt: f64,
    grid: &GridSpec,
    s: &OneStep,
) -> Result<VarianceReport> {
    let delta = &s.after.2 - &s.before.2;
    let a = field.jacobian(center)?;
    let b = field.eval(center)? - &a * center;
    let lin = one_step(&affine(a, b), center, sigma, dt, grid)?;
    let delta_lin = &lin.after.2 - &lin.before.2;
    let scale = sigma * sigma * dt;
    let delta_cov_norm = delta.amax();
    Ok(VarianceReport {
        sigma,
        dt,
        delta_cov_norm,
        normalized: delta_cov_norm / scale,
        nonlinear_normalized: (&delta - &delta_lin).amax() / scale,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaLevel {
    pub dx: f64,
    pub drift: DriftReport,
    pub variance: VarianceReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LemmaHalving {
    pub levels: Vec<LemmaLevel>,
    /// Drift residual of each level over the previous one.
    pub drift_ratios: Vec<f64>,
    /// `nonlinear_normalized` of each level over the previous one.
    pub variance_ratios: Vec<f64>,
}

/// Drift and variance tests at `(σ, dt, dx)` and after each of `halvings`
/// refinements `σ → σ/2`, `dt → dt/2`, `dx → dx/4`.
///
/// The grid shrinks faster than `σ` because the scheme's own first-order
/// error in one step is of size `dx · dt`, which has to fall faster than the
/// `σ² dt` terms being measured.
pub fn lemma_halving(
    field: &VelocityField,
    center: &DVector<f64>,
    sigma: f64,
    dt: f64,
    dx: f64,
    halvings: usize,
) -> Result<LemmaHalving> {
    let mut levels = Vec::with_capacity(halvings + 1);
    let (mut s, mut h, mut d) = (sigma, dt, dx);
    for _ in 0..=halvings {
        let grid = lemma_grid(center, s, d)?;
        let step = one_step(field, center, s, h, &grid)?;
        levels.push(LemmaLevel {
            dx: d,
            drift: drift_from(field, center, s, h, &step)?,
            variance: variance_from(field, center, s, h, &grid, &step)?,
        });
        s /= 2.0;
        h /= 2.0;
        d /= 4.0;
    }
    let ratios = |f: &dyn Fn(&LemmaLevel) -> f64| -> Vec<f64> {
        levels.windows(2).map(|w| f(&w[1]) / f(&w[0])).collect()
    };
    let drift_ratios = ratios(&|l| l.drift.residual);
    let variance_ratios = ratios(&|l| l.variance.nonlinear_normalized);
    Ok(LemmaHalving {
        levels,
        drift_ratios,
        variance_ratios,
    })
}

/// Relative residual gap below which two candidates count as tied, in units
/// of `‖ρ(t)‖₂ / dt`.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationReport {
    /// Residual per candidate, in input order.
    pub residuals: Vec<f64>,
    pub best: usize,
    /// Gap between the best and second-best residual.
    pub margin: f64,
    /// False when the best candidate is tied with another one.
    pub identifiable: bool,
}

/// Ranks candidate fields by the discrete continuity-equation residual
///
/// ```text
/// r_w = (ρ(t+dt) − ρ(t)) / dt + div_h(w ρ(t))
/// ```
///
/// with `div_h` the conservative upwind flux divergence. The norm is the
/// grid L2 norm over cells not on the outer boundary.
pub fn velocity_identification(
    before: &DensityField,
    after: &DensityField,
    candidates: &[VelocityField],
) -> Result<IdentificationReport> {
    if before.grid != after.grid {
        return Err(Error::GridMismatch);
    }
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no candidate fields".into()));
    }
    let dt = after.time - before.time;
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "snapshots must be increasing in time, got dt = {dt}"
        )));
    }
    let grid = &before.grid;
    let vol = grid.cell_volume();
    let interior: Vec<usize> = (0..grid.len()).filter(|&c| !grid.is_boundary_cell(c)).collect();
    let rate: Vec<f64> = before
        .values
        .iter()
        .zip(&after.values)
        .map(|(a, b)| (b - a) / dt)
        .collect();
    let residuals = candidates
        .iter()
        .map(|w| {
            let div = UpwindOperator::new(w, grid)?.flux_divergence(&before.values);
            let sq: f64 = interior.iter().map(|&c| (rate[c] + div[c]).powi(2)).sum();
            Ok((sq * vol).sqrt())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut order: Vec<usize> = (0..residuals.len()).collect();
    order.sort_by(|&i, &j| residuals[i].total_cmp(&residuals[j]));
    let best = order[0];
    let margin = order.get(1).map_or(f64::INFINITY, |&j| residuals[j] - residuals[best]);
    let scale: f64 = interior.iter().map(|&c| before.values[c].powi(2)).sum::<f64>();
    let tol = TIE_TOLERANCE * (scale * vol).sqrt() / dt;
    Ok(IdentificationReport {
        identifiable: margin > tol,
        residuals,
        best,
        margin,
    })
}

/// Mean and covariance of a Gaussian carried by `v = A x + b` for time `t`:
/// `m' = A m + b`, `Σ' = A Σ + Σ Aᵀ`, integrated with RK4.
pub fn affine_gaussian_evolution(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    t: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = ((t.abs() / 1e-4).ceil() as usize).max(1);
    let h = t / n as f64;
    let fm = |m: &DVector<f64>| a * m + b;
    let fs = |s: &DMatrix<f64>| a * s + s * a.transpose();
    let (mut m, mut s) = (mean.clone(), cov.clone());
    for _ in 0..n {
        let k1 = fm(&m);
        let k2 = fm(&(&m + &k1 * (0.5 * h)));
        let k3 = fm(&(&m + &k2 * (0.5 * h)));
        let k4 = fm(&(&m + &k3 * h));
        m += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let l1 = fs(&s);
        let l2 = fs(&(&s + &l1 * (0.5 * h)));
        let l3 = fs(&(&s + &l2 * (0.5 * h)));
        let l4 = fs(&(&s + &l3 * h));
        s += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
    }
    (m, s)
}

/// A smooth scalar test function with a name for reports.
pub type ScalarMap = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct TestFunction {
    pub name: String,
    pub f: ScalarMap,
}

impl TestFunction {
    pub fn new<F>(name: impl Into<String>, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_tuple("TestFunction").field(&self.name).finish()
    }
}

/// Smallest quadrature resolution accepted by [`delta_surrogate_test`].
pub const MIN_CELLS_PER_SIGMA: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateRow {
    pub function: String,
    pub sigma: f64,
    /// `∫ f (δ_σ(· − x₀) − ∇δ_σ(· − x₀) · v(x₀) dt)`.
    pub lhs: f64,
    /// `f(x₀ + v(x₀) dt)`.
    pub rhs: f64,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateReport {
    /// One row per test function and level, functions outermost.
    pub rows: Vec<SurrogateRow>,
    /// Per test function, error of each level over the previous one.
    pub ratios: Vec<Vec<f64>>,
}

/// Mean-value identity `∫ f (δ_x − ∇δ_x · v dt) = f(x + v dt)` with the
/// point mass replaced by `N(x₀, σ²I)`, at `σ` and `halvings` successive
/// halvings of it.
///
/// Integrals are midpoint sums over `x₀ ± 8σ` with `cells_per_sigma`
/// cells per standard deviation.
pub fn delta_surrogate_test(
    field: &VelocityField,
    x0: &DVector<f64>,
    sigma: f64,
    dt: f64,
    test_functions: &[TestFunction],
    halvings: usize,
    cells_per_sigma: f64,
) -> Result<SurrogateReport> {
    if !(cells_per_sigma >= MIN_CELLS_PER_SIGMA) {
        return Err(Error::InvalidArgument(format!(
            "quadrature too coarse: {cells_per_sigma} cells per sigma, need >= {MIN_CELLS_PER_SIGMA}"
        )));
    }
    let v = field.eval(x0)?;
    let target = x0 + &v * dt;
    let p = x0.len();
    let mut rows = Vec::new();
    let mut ratios = Vec::new();
    for tf in test_functions {
        let rhs = (tf.f)(&target);
        let mut errs: Vec<f64> = Vec::new();
        let mut s = sigma;
        for _ in 0..=halvings {
            let grid = lemma_grid(x0, s, s / cells_per_sigma)?;
            let vol = grid.cell_volume();
            let norm = (2.0 * std::f64::consts::PI * s * s).powf(-(p as f64) / 2.0);
            let lhs: f64 = (0..grid.len())
                .into_par_iter()
                .map(|c| {
                    let y = grid.center(c);
                    let d = &y - x0;
                    let k = norm * (-0.5 * d.norm_squared() / (s * s)).exp();
                    // ∇δ_σ(y − x₀) = −(y − x₀)/σ² · δ_σ(y − x₀)
                    let grad_dot_v = -(d.dot(&v)) / (s * s) * k;
                    (tf.f)(&y) * (k - grad_dot_v * dt) * vol
                })
                .sum();
            let error = (lhs - rhs).abs();
            errs.push(error);
            rows.push(SurrogateRow {
                function: tf.name.clone(),
                sigma: s,
                lhs,
                rhs,
                error,
            });
            s /= 2.0;
        }
        ratios.push(errs.windows(2).map(|w| w[1] / w[0]).collect());
    }
    Ok(SurrogateReport { rows, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::builtin::{constant, cubic_decay, linear_decay};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn compare_identity_and_disjoint() {
        let g = GridSpec::new(vec![0.0], vec![0.1], vec![10]).unwrap();
        let mut a = DensityField::zeros(g.clone(), 0.0);
        a.values[2] = 10.0;
        let r = compare_densities(&a, &a).unwrap();
        assert_eq!((r.l1_distance, r.max_abs), (0.0, 0.0));
        let mut b = DensityField::zeros(g.clone(), 0.0);
        b.values[7] = 10.0;
        let r = compare_densities(&a, &b).unwrap();
        assert!((r.l1_distance - 2.0).abs() < 1e-12);
        assert!(r.l1_distance <= r.mass_1 + r.mass_2 + 1e-12);
        let other = DensityField::zeros(GridSpec::new(vec![0.0], vec![0.2], vec![10]).unwrap(), 0.0);
        assert!(matches!(compare_densities(&a, &other), Err(Error::GridMismatch)));
    }

    #[test]
    fn drift_of_zero_field_is_zero() {
        let c = dv(&[0.1, -0.2]);
        let g = lemma_grid(&c, 0.1, 0.025).unwrap();
        let r = drift_test(&constant(dv(&[0.0, 0.0])), &c, 0.1, 0.01, &g).unwrap();
        assert_eq!(r.residual, 0.0);
        let v = variance_test(&constant(dv(&[0.0, 0.0])), &c, 0.1, 0.01, &g).unwrap();
        assert_eq!(v.delta_cov_norm, 0.0);
    }

    #[test]
    fn drift_of_linear_field_is_exact_up_to_scheme_error() {
        // For v = -x the exact one-step shift is -m dt; the upwind scheme adds
        // a mean shift of about (dx/2)·|v'|·dt.
        let c = dv(&[0.5]);
        let (sigma, dt, dx) = (0.1, 1e-3, 0.025 / 4.0);
        let g = lemma_grid(&c, sigma, dx).unwrap();
        let r = drift_test(&linear_decay(1), &c, sigma, dt, &g).unwrap();
        assert!(r.residual <= 0.6 * dx * dt, "{}", r.residual);
    }

    #[test]
    fn drift_needs_resolved_gaussian() {
        let c = dv(&[0.0]);
        let g = lemma_grid(&c, 0.1, 0.05).unwrap();
        assert!(drift_test(&linear_decay(1), &c, 0.1, 1e-3, &g).is_err());
    }

    #[test]
    fn constant_field_keeps_covariance_nearly() {
        let c = dv(&[0.0, 0.0]);
        let g = lemma_grid(&c, 0.1, 0.025).unwrap();
        let r = variance_test(&constant(dv(&[0.3, -0.2])), &c, 0.1, 0.01, &g).unwrap();
        // only upwind diffusion |v| dx dt (1 − ν) remains
        assert!(r.delta_cov_norm <= 0.3 * 0.025 * 0.01, "{}", r.delta_cov_norm);
        assert!(r.nonlinear_normalized <= 1e-12);
    }

    #[test]
    fn linear_field_variance_change_is_order_sigma() {
        // d(σ²)/dt = −2σ² for v = −x: the normalized change stays near 2
        // instead of vanishing with σ.
        let c = dv(&[0.0]);
        let h = lemma_halving(&linear_decay(1), &c, 0.1, 1e-3, 0.025 / 4.0, 2).unwrap();
        for l in &h.levels {
            assert!((l.variance.normalized - 2.0).abs() < 0.5, "{}", l.variance.normalized);
            assert!(l.variance.nonlinear_normalized <= 1e-10);
        }
    }

    #[test]
    fn halving_shrinks_cubic_residuals() {
        let h = lemma_halving(&cubic_decay(1), &dv(&[0.5]), 0.05, 1e-3, 0.0125, 2).unwrap();
        assert!(h.drift_ratios.iter().all(|r| *r <= 0.5), "{:?}", h.drift_ratios);
        assert!(h.variance_ratios.iter().all(|r| *r < 1.0), "{:?}", h.variance_ratios);
    }

    #[test]
    fn identification_prefers_truth() {
        let g = GridSpec::cell_centered(&[-1.0], &[1.0], &[0.01]).unwrap();
        let (m, s) = (dv(&[0.2]), DMatrix::from_element(1, 1, 0.04));
        let before = gaussian_density(&g, &m, &s).unwrap();
        let dt = 1e-3;
        let (m1, s1) = affine_gaussian_evolution(&-DMatrix::identity(1, 1), &dv(&[0.0]), &m, &s, dt);
        let mut after = gaussian_density(&g, &m1, &s1).unwrap();
        after.time = dt;
        let v = linear_decay(1);
        let twice = affine(DMatrix::from_element(1, 1, -2.0), dv(&[0.0]));
        let shifted = affine(DMatrix::from_element(1, 1, -1.0), dv(&[1.0]));
        let r = velocity_identification(&before, &after, &[twice, v, shifted]).unwrap();
        assert_eq!(r.best, 1);
        assert!(r.identifiable);
    }

    #[test]
    fn uniform_density_cannot_identify_divergence_free_fields() {
        let g = GridSpec::new(vec![-1.0, -1.0], vec![0.1, 0.1], vec![20, 20]).unwrap();
        let before = DensityField::uniform(g.clone(), 0.0);
        let after = DensityField::uniform(g, 0.01);
        let rot = crate::fields::builtin::rotation();
        let shear = affine(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]), dv(&[0.0, 0.0]));
        let r = velocity_identification(&before, &after, &[rot, shear]).unwrap();
        assert!(!r.identifiable, "{r:?}");
    }

    #[test]
    fn affine_evolution_matches_closed_form() {
        let a = DMatrix::from_element(1, 1, -1.0);
        let (m, s) = affine_gaussian_evolution(&a, &dv(&[0.0]), &dv(&[0.5]), &DMatrix::from_element(1, 1, 0.04), 1.0);
        assert!((m[0] - 0.5 * (-1f64).exp()).abs() < 1e-12);
        assert!((s[(0, 0)] - 0.04 * (-2f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn surrogate_linear_function_is_exact() {
        let f = TestFunction::new("linear", |x: &DVector<f64>| 2.0 * x[0] - 1.0);
        let r = delta_surrogate_test(&cubic_decay(1), &dv(&[0.5]), 0.05, 1e-3, &[f], 1, 4.0).unwrap();
        for row in &r.rows {
            assert!(row.error <= 1e-12, "{row:?}");
        }
    }

    #[test]
    fn surrogate_at_rest_point() {
        let f = TestFunction::new("cos", |x: &DVector<f64>| x[0].cos());
        let r = delta_surrogate_test(&cubic_decay(1), &dv(&[0.0]), 0.05, 1e-2, &[f], 0, 4.0).unwrap();
        // ∫ cos(y) N(0, σ²) = exp(−σ²/2)
        let row = &r.rows[0];
        assert!((row.lhs - (-0.5 * 0.05f64 * 0.05).exp()).abs() < 1e-12);
        assert_eq!(row.rhs, 1.0);
    }

    #[test]
    fn surrogate_quadratic_error_is_sigma_squared() {
        // error = σ² − v² dt² exactly for f = x²
        let f = TestFunction::new("square", |x: &DVector<f64>| x[0] * x[0]);
        let (x0, dt) = (0.5, 1e-3);
        let v = -(x0 * x0 * x0);
        let r = delta_surrogate_test(&cubic_decay(1), &dv(&[x0]), 0.05, dt, &[f], 2, 4.0).unwrap();
        for row in &r.rows {
            let oracle = row.sigma * row.sigma - v * v * dt * dt;
            assert!((row.error - oracle).abs() <= 1e-12, "{row:?}");
        }
        assert!(delta_surrogate_test(&cubic_decay(1), &dv(&[x0]), 0.05, dt, &[], 0, 2.0).is_err());
    }

    #[test]
    fn zero_field_experiment_reproduces_initial_gap() {
        let g = GridSpec::cell_centered(&[-1.0], &[1.0], &[0.02]).unwrap();
        let spec = ExperimentSpec {
            field: constant(dv(&[0.0])),
            init_mean: dv(&[0.0]),
            init_cov: DMatrix::from_element(1, 1, 0.04),
            n_particles: 2000,
            grid: g,
            dt: 0.1,
            t_end: 0.5,
            snapshot_times: vec![0.0, 0.5],
            seed: 5,
            method: Method::Rk4,
            smoothing: Smoothing::Histogram,
            policy: SubstepPolicy::Refuse,
        };
        let r = equivalence_experiment(&spec).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].report.l1_distance, r[1].report.l1_distance);
        assert_eq!(r[1].escaped_fraction, 0.0);
        assert_eq!(r[1].outflow_fraction, 0.0);
        let again = equivalence_experiment(&spec).unwrap();
        assert_eq!(again[1].particles, r[1].particles);
    }
}
