//! Velocity fields `x ↦ v(x)` on ℝᵖ.
//!
//! A [`VelocityField`] is an immutable, thread-safe closure plus metadata.
//! The constructors compose user maps into the three flows used throughout
//! the crate:
//!
//! * Newton flow `v = -J⁻¹F` ([`make_newton_field`]), solved by LU per
//!   evaluation with a condition-number guard;
//! * Fisher-scoring flow `v = I⁻¹S` ([`make_fisher_field`]), solved by
//!   Cholesky per evaluation;
//! * gradient flow `v = S` ([`make_gradient_field`]).

pub mod builtin;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{to_vec, Error, Result};
use crate::grid::{GridSpec, WorkingDomain};
use crate::linalg::{lu_solve_checked, spd_solve};

pub type VectorMap = Arc<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;
pub type MatrixMap = Arc<dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync>;

/// Wraps an infallible vector map.
pub fn vmap<F>(f: F) -> VectorMap
where
    F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
{
    Arc::new(move |x| Ok(f(x)))
}

/// Wraps an infallible matrix map.
pub fn mmap<F>(f: F) -> MatrixMap
where
    F: Fn(&DVector<f64>) -> DMatrix<f64> + Send + Sync + 'static,
{
    Arc::new(move |x| Ok(f(x)))
}

#[derive(Clone)]
pub struct VelocityField {
    dim: usize,
    eval: VectorMap,
    jac: Option<MatrixMap>,
    label: String,
    domain: Option<WorkingDomain>,
}

impl fmt::Debug for VelocityField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VelocityField")
            .field("dim", &self.dim)
            .field("label", &self.label)
            .field("analytic_jacobian", &self.jac.is_some())
            .field("domain", &self.domain)
            .finish()
    }
}

impl VelocityField {
    pub fn new(dim: usize, label: impl Into<String>, eval: VectorMap) -> Self {
        assert!(dim > 0, "velocity field dimension must be positive");
        Self {
            dim,
            eval,
            jac: None,
            label: label.into(),
            domain: None,
        }
    }

    pub fn from_fn<F>(dim: usize, label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::new(dim, label, vmap(f))
    }

    pub fn with_jacobian(mut self, jac: MatrixMap) -> Self {
        self.jac = Some(jac);
        self
    }

    pub fn with_domain(mut self, domain: WorkingDomain) -> Self {
        assert_eq!(domain.dim(), self.dim, "domain dimension mismatch");
        self.domain = Some(domain);
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn domain(&self) -> Option<&WorkingDomain> {
        self.domain.as_ref()
    }

    pub fn has_jacobian(&self) -> bool {
        self.jac.is_some()
    }

    /// Evaluates `v(x)`. Non-finite output is an error.
    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let v = (self.eval)(x)?;
        if v.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFiniteEvaluation { x: to_vec(x) });
        }
        Ok(v)
    }

    /// Jacobian of `v`: the analytic one when supplied, otherwise central
    /// differences with the default step.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        match &self.jac {
            Some(j) => {
                let m = j(x)?;
                if m.iter().any(|c| !c.is_finite()) {
                    return Err(Error::NonFiniteEvaluation { x: to_vec(x) });
                }
                Ok(m)
            }
            None => numeric_jacobian_steps(|y| self.eval(y), x, &default_steps(x)),
        }
    }

    /// Divergence of `v` at a point, from [`VelocityField::jacobian`].
    pub fn divergence_at(&self, x: &DVector<f64>) -> Result<f64> {
        Ok(self.jacobian(x)?.trace())
    }

    /// Evaluates the field at every cell center of `grid`, in storage order.
    pub fn sample(&self, grid: &GridSpec) -> Result<Vec<DVector<f64>>> {
        (0..grid.len())
            .into_par_iter()
            .map(|c| self.eval(&grid.center(c)))
            .collect()
    }
}

/// Newton flow `v(x) = -J(x)⁻¹ F(x)`. Without an analytic `J`, central
/// differences of `F` are used.
pub fn make_newton_field(dim: usize, f: VectorMap, j: Option<MatrixMap>) -> VelocityField {
    let eval: VectorMap = Arc::new(move |x: &DVector<f64>| {
        let fx = f(x)?;
        let jx = match &j {
            Some(j) => j(x)?,
            None => numeric_jacobian_steps(|y| f(y), x, &default_steps(x))?,
        };
        if jx.nrows() != dim || jx.ncols() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: jx.nrows(),
            });
        }
        let step = lu_solve_checked(&jx, &fx).map_err(|condition| Error::SingularJacobian {
            x: to_vec(x),
            condition,
        })?;
        Ok(-step)
    });
    VelocityField::new(dim, "newton", eval)
}

/// Fisher-scoring flow `v(x) = I(x)⁻¹ S(x)` with `I` symmetric positive
/// definite.
pub fn make_fisher_field(dim: usize, score: VectorMap, info: MatrixMap) -> VelocityField {
    let eval: VectorMap = Arc::new(move |x: &DVector<f64>| {
        let s = score(x)?;
        let i = info(x)?;
        spd_solve(&i, &s).map_err(|minor| Error::IndefiniteInformation {
            x: to_vec(x),
            minor,
        })
    });
    VelocityField::new(dim, "fisher-scoring", eval)
}

/// Gradient flow `v = S`.
pub fn make_gradient_field(dim: usize, score: VectorMap) -> VelocityField {
    VelocityField::new(dim, "gradient-flow", score)
}

/// Default per-axis finite-difference step `1e-6 * max(1, |x_k|)`.
pub fn default_steps(x: &DVector<f64>) -> Vec<f64> {
    x.iter().map(|v| 1e-6 * v.abs().max(1.0)).collect()
}

/// Central-difference Jacobian with a uniform step `h`.
pub fn numeric_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    numeric_jacobian_steps(f, x, &vec![h; x.len()])
}

/// Central-difference Jacobian with a step per axis. Entry `(i, k)` is
/// `(f_i(x + h_k e_k) - f_i(x - h_k e_k)) / (2 h_k)`.
pub fn numeric_jacobian_steps<F>(f: F, x: &DVector<f64>, steps: &[f64]) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let p = x.len();
    let mut cols = Vec::with_capacity(p);
    let mut m = 0;
    for k in 0..p {
        let h = steps[k];
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let fp = f(&xp)?;
        let fm = f(&xm)?;
        if fp.iter().chain(fm.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteEvaluation { x: to_vec(x) });
        }
        m = fp.len();
        cols.push((fp - fm) / (2.0 * h));
    }
    let mut jac = DMatrix::zeros(m, p);
    for (k, col) in cols.into_iter().enumerate() {
        jac.set_column(k, &col);
    }
    Ok(jac)
}

/// Diagnostic divergence of `v` sampled at cell centers: central differences
/// between neighbouring centers in the interior, one-sided at the boundary.
///
/// This is the non-conservative form and is never used by the transport
/// solver.
pub fn sampled_divergence(field: &VelocityField, grid: &GridSpec) -> Result<Vec<f64>> {
    if field.dim() != grid.dim() {
        return Err(Error::DimensionMismatch {
            expected: grid.dim(),
            got: field.dim(),
        });
    }
    let v = field.sample(grid)?;
    let div = (0..grid.len())
        .map(|c| {
            let idx = grid.multi_index(c);
            (0..grid.dim())
                .map(|k| {
                    let n = grid.cells()[k];
                    let s = grid.strides()[k];
                    let h = grid.dx()[k];
                    let i = idx[k];
                    if i == 0 {
                        (v[c + s][k] - v[c][k]) / h
                    } else if i + 1 == n {
                        (v[c][k] - v[c - s][k]) / h
                    } else {
                        (v[c + s][k] - v[c - s][k]) / (2.0 * h)
                    }
                })
                .sum()
        })
        .collect();
    Ok(div)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn newton_identity_jacobian() {
        let field = make_newton_field(
            1,
            vmap(|x| x.clone()),
            Some(mmap(|_| DMatrix::identity(1, 1))),
        );
        let v = field.eval(&dv(&[0.7])).unwrap();
        assert_eq!(v[0], -0.7);
    }

    #[test]
    fn newton_scalar_quadratic() {
        let f = vmap(|x| dv(&[x[0] * x[0] - 4.0]));
        let j = mmap(|x| DMatrix::from_element(1, 1, 2.0 * x[0]));
        let analytic = make_newton_field(1, f.clone(), Some(j));
        let numeric = make_newton_field(1, f, None);
        // -(x^2 - 4) / (2x) at x = 3
        let oracle = -(9.0 - 4.0) / 6.0;
        assert!((analytic.eval(&dv(&[3.0])).unwrap()[0] - oracle).abs() < 1e-15);
        assert!((analytic.eval(&dv(&[3.0])).unwrap()[0] + 5.0 / 6.0).abs() < 1e-15);
        assert!((numeric.eval(&dv(&[3.0])).unwrap()[0] - oracle).abs() < 1e-8);
    }

    #[test]
    fn newton_singular_jacobian_is_an_error() {
        let field = make_newton_field(
            1,
            vmap(|x| dv(&[x[0] * x[0] - 4.0])),
            Some(mmap(|x| DMatrix::from_element(1, 1, 2.0 * x[0]))),
        );
        match field.eval(&dv(&[0.0])) {
            Err(Error::SingularJacobian { x, .. }) => assert_eq!(x, vec![0.0]),
            other => panic!("expected SingularJacobian, got {other:?}"),
        }
    }

    #[test]
    fn fisher_field_examples() {
        let ident = make_fisher_field(2, vmap(|x| -x.clone()), mmap(|_| DMatrix::identity(2, 2)));
        assert_eq!(ident.eval(&dv(&[1.0, -2.0])).unwrap(), dv(&[-1.0, 2.0]));

        let diag = make_fisher_field(
            2,
            vmap(|_| dv(&[4.0, -6.0])),
            mmap(|_| DMatrix::from_diagonal(&dv(&[2.0, 2.0]))),
        );
        let v = diag.eval(&dv(&[0.0, 0.0])).unwrap();
        assert!((v - dv(&[2.0, -3.0])).amax() <= 1e-15);
    }

    #[test]
    fn fisher_field_rejects_indefinite_information() {
        let field = make_fisher_field(
            2,
            vmap(|_| dv(&[1.0, 1.0])),
            mmap(|_| DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0])),
        );
        match field.eval(&dv(&[0.5, 0.5])) {
            Err(Error::IndefiniteInformation { minor, x }) => {
                assert_eq!(minor, 2);
                assert_eq!(x, vec![0.5, 0.5]);
            }
            other => panic!("expected IndefiniteInformation, got {other:?}"),
        }
    }

    #[test]
    fn gradient_field_passes_through() {
        let g = make_gradient_field(1, vmap(|x| -x.clone()));
        assert_eq!(g.label(), "gradient-flow");
        assert_eq!(g.eval(&dv(&[0.3])).unwrap()[0], -0.3);
        let c = make_gradient_field(2, vmap(|_| dv(&[1.5, -0.25])));
        for x in [[0.0, 0.0], [3.0, -7.0], [1e3, 2.0]] {
            assert_eq!(c.eval(&dv(&x)).unwrap(), dv(&[1.5, -0.25]));
        }
    }

    #[test]
    fn fisher_with_identity_equals_gradient_field() {
        let s = vmap(|x: &DVector<f64>| dv(&[x[0].sin() - x[1], x[0] * x[1]]));
        let fisher = make_fisher_field(2, s.clone(), mmap(|_| DMatrix::identity(2, 2)));
        let grad = make_gradient_field(2, s);
        for x in [[0.1, 0.2], [-1.3, 2.2], [4.0, -0.5]] {
            assert_eq!(fisher.eval(&dv(&x)).unwrap(), grad.eval(&dv(&x)).unwrap());
        }
    }

    #[test]
    fn non_finite_evaluation_surfaces() {
        let f = VelocityField::from_fn(1, "log", |x| dv(&[x[0].ln()]));
        assert!(matches!(
            f.eval(&dv(&[-1.0])),
            Err(Error::NonFiniteEvaluation { .. })
        ));
        let r = numeric_jacobian(|x| Ok(dv(&[x[0].ln()])), &dv(&[0.0]), 1e-3);
        assert!(matches!(r, Err(Error::NonFiniteEvaluation { .. })));
    }

    #[test]
    fn numeric_jacobian_linear_map_is_exact() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, -2.0, 0.5, 3.0, 0.25, -1.0]);
        let a2 = a.clone();
        let j = numeric_jacobian(|x| Ok(&a2 * x), &dv(&[0.3, -0.1, 2.0]), 0.5).unwrap();
        assert!((j - a).amax() < 1e-14);
    }

    #[test]
    fn numeric_jacobian_sine_at_zero() {
        let j = numeric_jacobian(|x| Ok(x.map(f64::sin)), &dv(&[0.0]), 1e-5).unwrap();
        assert!((j[(0, 0)] - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn numeric_jacobian_is_second_order() {
        // x^2 is differentiated exactly by central differences, so the order
        // check uses maps with a nonzero third derivative.
        let quad = |h: f64| {
            numeric_jacobian(|x| Ok(x.map(|t| t * t)), &dv(&[1.0]), h).unwrap()[(0, 0)] - 2.0
        };
        assert!(quad(1e-3).abs() < 1e-12);
        let cube_err = |h: f64| {
            (numeric_jacobian(|x| Ok(x.map(|t| t * t * t)), &dv(&[1.0]), h).unwrap()[(0, 0)]
                - 3.0)
                .abs()
        };
        let exp_err = |h: f64| {
            (numeric_jacobian(|x| Ok(x.map(f64::exp)), &dv(&[0.5]), h).unwrap()[(0, 0)]
                - 0.5f64.exp())
            .abs()
        };
        for err in [&cube_err as &dyn Fn(f64) -> f64, &exp_err] {
            let ratio = err(5e-4) / err(1e-3);
            assert!((0.2..=0.3).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn analytic_jacobian_agrees_with_finite_differences() {
        let f = VelocityField::from_fn(2, "swirl", |x| {
            dv(&[x[0].sin() * x[1], x[0] * x[0] - x[1].cos()])
        })
        .with_jacobian(mmap(|x| {
            DMatrix::from_row_slice(
                2,
                2,
                &[x[0].cos() * x[1], x[0].sin(), 2.0 * x[0], x[1].sin()],
            )
        }));
        for x in [[0.3, 0.7], [-1.1, 0.4], [2.0, -1.5]] {
            let x = dv(&x);
            let ana = f.jacobian(&x).unwrap();
            let num = numeric_jacobian_steps(|y| f.eval(y), &x, &default_steps(&x)).unwrap();
            let rel = (&ana - &num).amax() / ana.amax();
            assert!(rel <= 1e-4, "relative error {rel}");
        }
    }

    #[test]
    fn sampled_divergence_examples() {
        let g = GridSpec::new(vec![-1.0, -1.0], vec![0.1, 0.1], vec![20, 20]).unwrap();
        let constant = VelocityField::from_fn(2, "c", |_| dv(&[1.0, -2.0]));
        assert!(sampled_divergence(&constant, &g).unwrap().iter().all(|d| *d == 0.0));

        let identity = VelocityField::from_fn(2, "id", |x| x.clone());
        let div = sampled_divergence(&identity, &g).unwrap();
        for (c, d) in div.iter().enumerate() {
            if !g.is_boundary_cell(c) {
                assert!((d - 2.0).abs() < 1e-12);
            }
        }

        let rot = VelocityField::from_fn(2, "rot", |x| dv(&[-x[1], x[0]]));
        assert!(sampled_divergence(&rot, &g).unwrap().iter().all(|d| d.abs() < 1e-12));
    }
}
