//! Logistic regression with the canonical (logit) link.
//!
//! Log-likelihood, score and Fisher information:
//!
//! ```text
//! l(β) = Σ_j [ y_j x_jᵀβ − log(1 + exp(x_jᵀβ)) ]
//! S(β) = Σ_j [ y_j − σ(x_jᵀβ) ] x_j
//! I(β) = Σ_j σ(x_jᵀβ)(1 − σ(x_jᵀβ)) x_j x_jᵀ  = −∂S/∂βᵀ
//! ```
//!
//! The discrete Fisher-scoring iteration [`fisher_scoring_solve`] is the
//! maximum-likelihood oracle the flow-based code is checked against.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{to_vec, Error, Result};
use crate::fields::{
    make_fisher_field, make_gradient_field, numeric_jacobian_steps, default_steps, MatrixMap,
    VectorMap, VelocityField,
};
use crate::linalg::{inf_norm, spd_solve};

/// Iterates whose norm exceeds this are treated as diverging (separation).
pub const DIVERGENCE_NORM: f64 = 1e3;

const SOFTPLUS_BRANCH: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CovariateLaw {
    #[default]
    StandardNormal,
    /// Uniform on [-1, 1].
    Uniform,
}

impl fmt::Display for CovariateLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CovariateLaw::StandardNormal => "standard_normal",
            CovariateLaw::Uniform => "uniform",
        })
    }
}

impl FromStr for CovariateLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "standard_normal" | "normal" => Ok(CovariateLaw::StandardNormal),
            "uniform" => Ok(CovariateLaw::Uniform),
            other => Err(Error::Parse(format!("unknown covariate law '{other}'"))),
        }
    }
}

impl CovariateLaw {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            CovariateLaw::StandardNormal => rng.sample(StandardNormal),
            CovariateLaw::Uniform => rng.gen_range(-1.0..=1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlmDataset {
    x: DMatrix<f64>,
    y: DVector<f64>,
    beta_star: DVector<f64>,
    seed: u64,
    law: CovariateLaw,
    // row-major copy of x for the hot loops
    rows: Vec<f64>,
}

impl GlmDataset {
    /// Validates `y ∈ {0,1}ⁿ`, `n ≥ p` and full column rank of `x`.
    pub fn new(
        x: DMatrix<f64>,
        y: DVector<f64>,
        beta_star: DVector<f64>,
        seed: u64,
        law: CovariateLaw,
    ) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: y.len(),
            });
        }
        if beta_star.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: beta_star.len(),
            });
        }
        if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
            return Err(Error::InvalidArgument("responses must be 0 or 1".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite covariate".into()));
        }
        let rank = if n == 0 || p == 0 { 0 } else { x.rank(1e-10 * x.amax().max(1.0)) };
        if n < p || rank < p {
            return Err(Error::RankDeficient { rank, p });
        }
        Ok(Self::from_parts(x, y, beta_star, seed, law))
    }

    fn from_parts(
        x: DMatrix<f64>,
        y: DVector<f64>,
        beta_star: DVector<f64>,
        seed: u64,
        law: CovariateLaw,
    ) -> Self {
        let (n, p) = x.shape();
        let mut rows = Vec::with_capacity(n * p);
        for j in 0..n {
            rows.extend(x.row(j).iter());
        }
        Self {
            x,
            y,
            beta_star,
            seed,
            law,
            rows,
        }
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn beta_star(&self) -> &DVector<f64> {
        &self.beta_star
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn law(&self) -> CovariateLaw {
        self.law
    }

    fn row(&self, j: usize) -> &[f64] {
        let p = self.p();
        &self.rows[j * p..(j + 1) * p]
    }

    fn linear_predictor(&self, j: usize, beta: &DVector<f64>) -> f64 {
        self.row(j).iter().zip(beta.iter()).map(|(a, b)| a * b).sum()
    }

    /// First `m` observations as a new dataset.
    pub fn head(&self, m: usize) -> Result<Self> {
        let m = m.min(self.n());
        Self::new(
            self.x.rows(0, m).into_owned(),
            self.y.rows(0, m).into_owned(),
            self.beta_star.clone(),
            self.seed,
            self.law,
        )
    }

    pub fn loglik(&self, beta: &DVector<f64>) -> f64 {
        (0..self.n())
            .map(|j| {
                let t = self.linear_predictor(j, beta);
                self.y[j] * t - softplus(t)
            })
            .sum()
    }

    pub fn score(&self, beta: &DVector<f64>) -> DVector<f64> {
        let p = self.p();
        let mut s = DVector::zeros(p);
        for j in 0..self.n() {
            let r = residual(self.y[j], self.linear_predictor(j, beta));
            for (k, xk) in self.row(j).iter().enumerate() {
                s[k] += r * xk;
            }
        }
        s
    }

    pub fn fisher(&self, beta: &DVector<f64>) -> DMatrix<f64> {
        self.score_and_fisher(beta).1
    }

    /// Score and Fisher information in a single pass over the data.
    pub fn score_and_fisher(&self, beta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let p = self.p();
        let mut s = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for j in 0..self.n() {
            let t = self.linear_predictor(j, beta);
            let w = variance(t);
            let r = residual(self.y[j], t);
            let row = self.row(j);
            for a in 0..p {
                s[a] += r * row[a];
                let wa = w * row[a];
                for b in 0..=a {
                    info[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        (s, info)
    }
}

/// `y - sigmoid(t)` without cancellation for `y = 1`.
fn residual(y: f64, t: f64) -> f64 {
    if y == 1.0 {
        sigmoid(-t)
    } else {
        y - sigmoid(t)
    }
}

/// `sigmoid(t) * (1 - sigmoid(t))`, kept positive for large `|t|`.
fn variance(t: f64) -> f64 {
    let e = (-t.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

/// Numerically stable `1 / (1 + exp(-t))`.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(t))`, switching to `t + exp(-t)` above `t = 30`.
pub fn softplus(t: f64) -> f64 {
    if t > SOFTPLUS_BRANCH {
        t + (-t).exp()
    } else {
        t.exp().ln_1p()
    }
}

/// Bernoulli responses `y_j ~ Bernoulli(σ(x_jᵀβ))` for a fixed design.
pub fn simulate_responses<R: Rng>(x: &DMatrix<f64>, beta: &DVector<f64>, rng: &mut R) -> DVector<f64> {
    let eta = x * beta;
    eta.map(|t| if rng.gen::<f64>() < sigmoid(t) { 1.0 } else { 0.0 })
}

fn simulate_raw<R: Rng>(
    n: usize,
    beta_star: &DVector<f64>,
    law: CovariateLaw,
    rng: &mut R,
) -> (DMatrix<f64>, DVector<f64>) {
    let p = beta_star.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for j in 0..n {
        for k in 0..p {
            x[(j, k)] = law.draw(rng);
        }
        let t: f64 = (0..p).map(|k| x[(j, k)] * beta_star[k]).sum();
        y[j] = if rng.gen::<f64>() < sigmoid(t) { 1.0 } else { 0.0 };
    }
    (x, y)
}

/// Simulates `n` observations with covariates drawn i.i.d. from `law`.
///
/// The generator is ChaCha8 seeded with `seed`; the same inputs give a
/// bit-identical dataset.
pub fn glm_simulate(
    n: usize,
    beta_star: &DVector<f64>,
    seed: u64,
    law: CovariateLaw,
) -> Result<GlmDataset> {
    if n == 0 || beta_star.is_empty() {
        return Err(Error::InvalidArgument("need n >= 1 and p >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x, y) = simulate_raw(n, beta_star, law, &mut rng);
    GlmDataset::new(x, y, beta_star.clone(), seed, law)
}

pub fn glm_loglik(d: &GlmDataset, beta: &DVector<f64>) -> f64 {
    d.loglik(beta)
}

pub fn glm_score(d: &GlmDataset, beta: &DVector<f64>) -> DVector<f64> {
    d.score(beta)
}

pub fn glm_fisher(d: &GlmDataset, beta: &DVector<f64>) -> DMatrix<f64> {
    d.fisher(beta)
}

/// Fisher-scoring velocity `I(β)⁻¹S(β)` for a dataset. Score and
/// information come from one pass over the data.
pub fn fisher_field(d: Arc<GlmDataset>) -> VelocityField {
    let p = d.p();
    VelocityField::new(
        p,
        "glm-fisher",
        Arc::new(move |b| {
            let (s, i) = d.score_and_fisher(b);
            spd_solve(&i, &s).map_err(|minor| Error::IndefiniteInformation {
                x: to_vec(b),
                minor,
            })
        }),
    )
}

/// Same flow as [`fisher_field`], assembled through [`make_fisher_field`]
/// from separate score and information maps.
pub fn composed_fisher_field(d: Arc<GlmDataset>) -> VelocityField {
    let p = d.p();
    let ds = d.clone();
    let score: VectorMap = Arc::new(move |b| Ok(ds.score(b)));
    let info: MatrixMap = Arc::new(move |b| Ok(d.fisher(b)));
    make_fisher_field(p, score, info)
}

/// Plain score flow `v = S(β)`, whose Jacobian is `−I(β)`.
pub fn score_field(d: Arc<GlmDataset>) -> VelocityField {
    let p = d.p();
    let ds = d.clone();
    let dj = d;
    make_gradient_field(p, Arc::new(move |b| Ok(ds.score(b))))
        .with_jacobian(Arc::new(move |b| Ok(-dj.fisher(b))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleResult {
    pub beta_hat: DVector<f64>,
    pub iterations: usize,
    pub final_score_norm: f64,
}

/// Discrete Fisher scoring `β ← β + I(β)⁻¹S(β)` until `‖S‖∞ ≤ tol` and the
/// next step is below `sqrt(tol)`.
pub fn fisher_scoring_solve(
    d: &GlmDataset,
    beta0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<MleResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tolerance must be positive".into()));
    }
    if beta0.len() != d.p() {
        return Err(Error::DimensionMismatch {
            expected: d.p(),
            got: beta0.len(),
        });
    }
    let mut beta = beta0.clone();
    let mut iterations = 0;
    loop {
        let (s, info) = d.score_and_fisher(&beta);
        let norm = inf_norm(&s);
        let step = spd_solve(&info, &s).map_err(|minor| Error::IndefiniteInformation {
            x: to_vec(&beta),
            minor,
        })?;
        // A small score alone is not enough: on separable data the score
        // decays towards zero while the iterates keep marching off.
        if norm <= tol && inf_norm(&step) <= tol.sqrt() {
            return Ok(MleResult {
                beta_hat: beta,
                iterations,
                final_score_norm: norm,
            });
        }
        if iterations == max_iter {
            return Err(Error::NonConvergence {
                last: to_vec(&beta),
                iterations,
                score_norm: norm,
            });
        }
        beta += step;
        iterations += 1;
        if !(beta.norm() <= DIVERGENCE_NORM) {
            return Err(Error::NonConvergence {
                last: to_vec(&beta),
                iterations,
                score_norm: inf_norm(&d.score(&beta)),
            });
        }
    }
}

/// Monte-Carlo estimates behind the two Bartlett identities at `β*`.
#[derive(Debug, Clone)]
pub struct BartlettReport {
    pub replications: usize,
    /// Mean of `S(β*)` over replications.
    pub mean_score: DVector<f64>,
    /// Mean of `−∂S/∂βᵀ(β*)`, computed by central differences of the score.
    pub mean_neg_hessian: DMatrix<f64>,
    /// Mean of the closed-form `I(β*)`.
    pub fisher: DMatrix<f64>,
    /// Mean of `S(β*)S(β*)ᵀ`, the information as variance of the score.
    pub score_outer: DMatrix<f64>,
    /// Standard errors; `None` with fewer than two replications.
    pub std_errors: Option<BartlettStdErrors>,
}

#[derive(Debug, Clone)]
pub struct BartlettStdErrors {
    pub score: DVector<f64>,
    /// Of the per-replication difference `−H − I`.
    pub hessian_vs_fisher: DMatrix<f64>,
    /// Of the per-replication difference `−H − S Sᵀ`.
    pub hessian_vs_outer: DMatrix<f64>,
}

impl BartlettReport {
    /// Largest `|mean score_k| / se_k`.
    pub fn score_z_max(&self) -> Option<f64> {
        let se = self.std_errors.as_ref()?;
        Some(z_max(self.mean_score.iter().copied(), se.score.iter().copied()))
    }

    /// Largest `|mean(−H − I)_ab| / se_ab`.
    pub fn hessian_fisher_z_max(&self) -> Option<f64> {
        let se = self.std_errors.as_ref()?;
        let diff = &self.mean_neg_hessian - &self.fisher;
        Some(z_max(diff.iter().copied(), se.hessian_vs_fisher.iter().copied()))
    }

    /// Largest `|mean(−H − SSᵀ)_ab| / se_ab`.
    pub fn hessian_outer_z_max(&self) -> Option<f64> {
        let se = self.std_errors.as_ref()?;
        let diff = &self.mean_neg_hessian - &self.score_outer;
        Some(z_max(diff.iter().copied(), se.hessian_vs_outer.iter().copied()))
    }
}

fn z_max(mean: impl Iterator<Item = f64>, se: impl Iterator<Item = f64>) -> f64 {
    mean.zip(se)
        .map(|(m, s)| {
            if m == 0.0 {
                0.0
            } else if s > 0.0 {
                m.abs() / s
            } else {
                f64::INFINITY
            }
        })
        .fold(0.0, f64::max)
}

struct Replicate {
    score: DVector<f64>,
    neg_hessian: DMatrix<f64>,
    fisher: DMatrix<f64>,
    outer: DMatrix<f64>,
}

/// Runs `replications` fresh datasets at `β*` and reports means and standard
/// errors of the score, the negative Hessian and the information.
///
/// Replication `r` draws from stream `r + 1` of ChaCha8 seeded with `seed`,
/// so results do not depend on scheduling.
pub fn bartlett_check(
    beta_star: &DVector<f64>,
    n: usize,
    replications: usize,
    seed: u64,
    law: CovariateLaw,
) -> Result<BartlettReport> {
    if replications == 0 || n == 0 || beta_star.is_empty() {
        return Err(Error::InvalidArgument(
            "need at least one replication and observation".into(),
        ));
    }
    let p = beta_star.len();
    let reps: Vec<Replicate> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64 + 1);
            let (x, y) = simulate_raw(n, beta_star, law, &mut rng);
            let d = GlmDataset::from_parts(x, y, beta_star.clone(), seed, law);
            let (score, fisher) = d.score_and_fisher(beta_star);
            let jac = numeric_jacobian_steps(
                |b| Ok(d.score(b)),
                beta_star,
                &default_steps(beta_star),
            )?;
            let outer = &score * score.transpose();
            Ok(Replicate {
                score,
                neg_hessian: -jac,
                fisher,
                outer,
            })
        })
        .collect::<Result<_>>()?;

    let m = replications as f64;
    let mut mean_score = DVector::zeros(p);
    let mut mean_neg_hessian = DMatrix::zeros(p, p);
    let mut fisher = DMatrix::zeros(p, p);
    let mut score_outer = DMatrix::zeros(p, p);
    for r in &reps {
        mean_score += &r.score;
        mean_neg_hessian += &r.neg_hessian;
        fisher += &r.fisher;
        score_outer += &r.outer;
    }
    mean_score /= m;
    mean_neg_hessian /= m;
    fisher /= m;
    score_outer /= m;

    let std_errors = (replications >= 2).then(|| {
        let mut var_score = DVector::zeros(p);
        let mut var_hf = DMatrix::zeros(p, p);
        let mut var_ho = DMatrix::zeros(p, p);
        let mean_hf = &mean_neg_hessian - &fisher;
        let mean_ho = &mean_neg_hessian - &score_outer;
        for r in &reps {
            var_score += (&r.score - &mean_score).map(|v| v * v);
            var_hf += (&r.neg_hessian - &r.fisher - &mean_hf).map(|v| v * v);
            var_ho += (&r.neg_hessian - &r.outer - &mean_ho).map(|v| v * v);
        }
        let scale = 1.0 / ((m - 1.0) * m);
        BartlettStdErrors {
            score: var_score.map(|v| (v * scale).sqrt()),
            hessian_vs_fisher: var_hf.map(|v| (v * scale).sqrt()),
            hessian_vs_outer: var_ho.map(|v| (v * scale).sqrt()),
        }
    });

    Ok(BartlettReport {
        replications,
        mean_score,
        mean_neg_hessian,
        fisher,
        score_outer,
        std_errors,
    })
}
