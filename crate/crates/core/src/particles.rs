//! Particle description of the flow `ẋ = v(x)`: fixed-step trajectories,
//! ensembles, and their empirical densities on a grid.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{to_vec, Error, Result};
use crate::fields::VelocityField;
use crate::grid::{DensityField, GridSpec, WorkingDomain};
use crate::linalg::cholesky_lower;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Rk4 => "rk4",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "euler" => Ok(Method::Euler),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Parse(format!("unknown integrator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("trajectory has at least the initial time")
    }
}

/// Number of fixed steps of size `dt` covering `[0, duration]`; the last
/// step lands within `dt / 2` of `duration`.
pub fn step_count(dt: f64, duration: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt = {dt} must be positive")));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "duration = {duration} must be nonnegative"
        )));
    }
    Ok((duration / dt).round() as usize)
}

/// One explicit step.
pub fn step(field: &VelocityField, x: &DVector<f64>, dt: f64, method: Method) -> Result<DVector<f64>> {
    match method {
        Method::Euler => Ok(x + field.eval(x)? * dt),
        Method::Rk4 => {
            let k1 = field.eval(x)?;
            let k2 = field.eval(&(x + &k1 * (0.5 * dt)))?;
            let k3 = field.eval(&(x + &k2 * (0.5 * dt)))?;
            let k4 = field.eval(&(x + &k3 * dt))?;
            Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
        }
    }
}

fn check_inside(domain: Option<&WorkingDomain>, x: &DVector<f64>, time: f64) -> Result<()> {
    match domain {
        Some(d) if !d.contains(x) => Err(Error::DomainEscape {
            time,
            position: to_vec(x),
        }),
        _ => Ok(()),
    }
}

/// Integrates from `x0` at time 0, recording every step. Leaving the
/// field's working domain ends the integration with
/// [`Error::DomainEscape`]; field failures are reported with their time.
pub fn integrate(
    field: &VelocityField,
    x0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    method: Method,
) -> Result<Trajectory> {
    let (traj, escape) = integrate_recorded(field, x0, dt, t_end, method)?;
    match escape {
        Some(e) => Err(e),
        None => Ok(traj),
    }
}

/// Like [`integrate`], but an escape truncates the trajectory and is
/// returned alongside it instead of replacing it.
pub fn integrate_recorded(
    field: &VelocityField,
    x0: &DVector<f64>,
    dt: f64,
    t_end: f64,
    method: Method,
) -> Result<(Trajectory, Option<Error>)> {
    let n = step_count(dt, t_end)?;
    if x0.len() != field.dim() {
        return Err(Error::DimensionMismatch {
            expected: field.dim(),
            got: x0.len(),
        });
    }
    check_inside(field.domain(), x0, 0.0)?;
    let mut times = Vec::with_capacity(n + 1);
    let mut states = Vec::with_capacity(n + 1);
    times.push(0.0);
    states.push(x0.clone());
    for i in 1..=n {
        let t_prev = (i - 1) as f64 * dt;
        let x = step(field, &states[i - 1], dt, method).map_err(|e| e.at_time(t_prev))?;
        let t = i as f64 * dt;
        if let Err(e) = check_inside(field.domain(), &x, t) {
            return Ok((Trajectory { times, states }, Some(e)));
        }
        times.push(t);
        states.push(x);
    }
    Ok((Trajectory { times, states }, None))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    pub positions: Vec<DVector<f64>>,
    pub time: f64,
    pub seed: u64,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.positions.first().map(|x| x.len())
    }

    pub fn mean(&self) -> Option<DVector<f64>> {
        let p = self.dim()?;
        let sum = self
            .positions
            .iter()
            .fold(DVector::zeros(p), |acc, x| acc + x);
        Some(sum / self.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitLaw {
    Gaussian { mean: DVector<f64>, cov: DMatrix<f64> },
    /// Uniform on the domain box.
    Uniform,
}

/// Draws `count` i.i.d. points from `law` restricted to `domain`.
///
/// Gaussian draws falling outside the domain are redrawn, so the ensemble
/// starts entirely inside it.
pub fn sample_initial(
    domain: &WorkingDomain,
    law: &InitLaw,
    count: usize,
    seed: u64,
) -> Result<ParticleEnsemble> {
    if count == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let p = domain.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = match law {
        InitLaw::Uniform => (0..count)
            .map(|_| {
                DVector::from_iterator(
                    p,
                    (0..p).map(|k| rng.gen_range(domain.lower()[k]..domain.upper()[k])),
                )
            })
            .collect(),
        InitLaw::Gaussian { mean, cov } => {
            if mean.len() != p || cov.nrows() != p || cov.ncols() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: mean.len(),
                });
            }
            let l = cholesky_lower(cov).map_err(|_| Error::NotSpd)?;
            let max_attempts = count.saturating_mul(1000).max(10_000);
            let mut out = Vec::with_capacity(count);
            let mut attempts = 0usize;
            while out.len() < count {
                attempts += 1;
                if attempts > max_attempts {
                    return Err(Error::InvalidArgument(
                        "Gaussian has too little mass inside the domain".into(),
                    ));
                }
                let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let x = mean + &l * z;
                if domain.contains(&x) {
                    out.push(x);
                }
            }
            out
        }
    };
    Ok(ParticleEnsemble {
        positions,
        time: 0.0,
        seed,
    })
}

/// Outcome of [`advance_ensemble`].
#[derive(Debug, Clone)]
pub struct Advanced {
    pub ensemble: ParticleEnsemble,
    pub escaped: usize,
}

/// Advances every particle by `duration` with fixed steps. Particles that
/// leave the field's working domain are removed and counted.
///
/// Particles are processed independently (in parallel) and collected in
/// input order, so the result matches a sequential run.
pub fn advance_ensemble(
    e: &ParticleEnsemble,
    field: &VelocityField,
    dt: f64,
    duration: f64,
    method: Method,
) -> Result<Advanced> {
    let n = step_count(dt, duration)?;
    let domain = field.domain();
    let moved: Vec<Option<DVector<f64>>> = e
        .positions
        .par_iter()
        .map(|x0| {
            let mut x = x0.clone();
            for i in 0..n {
                let t = e.time + i as f64 * dt;
                x = step(field, &x, dt, method).map_err(|err| err.at_time(t))?;
                if let Some(d) = domain {
                    if !d.contains(&x) {
                        return Ok(None);
                    }
                }
            }
            Ok(Some(x))
        })
        .collect::<Result<_>>()?;
    let escaped = moved.iter().filter(|m| m.is_none()).count();
    Ok(Advanced {
        ensemble: ParticleEnsemble {
            positions: moved.into_iter().flatten().collect(),
            time: e.time + n as f64 * dt,
            seed: e.seed,
        },
        escaped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Smoothing {
    #[default]
    Histogram,
    /// Product Gaussian kernel with the given bandwidth (coordinate units),
    /// truncated at four bandwidths.
    GaussianKernel { bandwidth: f64 },
}

/// Mass-normalised density of the ensemble on `grid`: each particle carries
/// mass `1/n`.
pub fn empirical_density(
    e: &ParticleEnsemble,
    grid: &GridSpec,
    smoothing: Smoothing,
) -> Result<DensityField> {
    if e.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let vol = grid.cell_volume();
    let n = e.len() as f64;
    let mut mass = vec![0.0; grid.len()];
    match smoothing {
        Smoothing::Histogram => {
            for x in &e.positions {
                let c = grid
                    .locate(x)
                    .ok_or_else(|| Error::OutsideGrid { position: to_vec(x) })?;
                mass[c] += 1.0;
            }
        }
        Smoothing::GaussianKernel { bandwidth } => {
            if !(bandwidth > 0.0) {
                return Err(Error::InvalidArgument("bandwidth must be positive".into()));
            }
            for x in &e.positions {
                if grid.locate(x).is_none() {
                    return Err(Error::OutsideGrid { position: to_vec(x) });
                }
                deposit_kernel(grid, x, bandwidth, &mut mass);
            }
        }
    }
    let values = mass.into_iter().map(|m| m / n / vol).collect();
    DensityField::new(grid.clone(), values, e.time)
}

fn deposit_kernel(grid: &GridSpec, x: &DVector<f64>, h: f64, mass: &mut [f64]) {
    let p = grid.dim();
    // per-axis (first index, weights)
    let axes: Vec<(usize, Vec<f64>)> = (0..p)
        .map(|k| {
            let dx = grid.dx()[k];
            let reach = (4.0 * h / dx).ceil() as i64;
            let centre = grid.nearest_index(k, x[k]) as i64;
            let lo = (centre - reach).max(0) as usize;
            let hi = ((centre + reach) as usize).min(grid.cells()[k] - 1);
            let w = (lo..=hi)
                .map(|i| {
                    let d = (grid.center_coord(k, i) - x[k]) / h;
                    (-0.5 * d * d).exp()
                })
                .collect();
            (lo, w)
        })
        .collect();
    let total: f64 = axes.iter().map(|(_, w)| w.iter().sum::<f64>()).product();
    let mut idx = vec![0usize; p];
    loop {
        let mut w = 1.0;
        let mut lin = 0;
        for k in 0..p {
            w *= axes[k].1[idx[k]];
            lin += (axes[k].0 + idx[k]) * grid.strides()[k];
        }
        mass[lin] += w / total;
        // odometer increment
        let mut k = p;
        loop {
            if k == 0 {
                return;
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < axes[k].1.len() {
                break;
            }
            idx[k] = 0;
        }
    }
}
