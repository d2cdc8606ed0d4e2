//! Named fields selectable by string key.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{make_newton_field, mmap, vmap, VelocityField};
use crate::error::{Error, Result};
use crate::glm::{fisher_field, score_field, GlmDataset};

pub const KEYS: &[&str] = &[
    "linear-decay",
    "rotation",
    "newton:quadratic",
    "glm-fisher",
    "glm-score",
    "zero",
    "cubic-decay",
];

/// Whether the key needs a GLM dataset.
pub fn needs_dataset(key: &str) -> bool {
    matches!(key, "glm-fisher" | "glm-score")
}

/// Builds a named field of dimension `dim`.
///
/// * `linear-decay`: `v = -x`
/// * `rotation`: `v = (-x₂, x₁)`, 2-D only
/// * `newton:quadratic`: Newton flow for `F_k(x) = x_k² - 4`
/// * `glm-fisher`, `glm-score`: logistic Fisher-scoring and score flows
/// * `zero`: `v = 0`
/// * `cubic-decay`: `v_k = -x_k³`
pub fn builtin_field(
    key: &str,
    dim: usize,
    dataset: Option<Arc<GlmDataset>>,
) -> Result<VelocityField> {
    if dim == 0 {
        return Err(Error::InvalidArgument("dimension must be positive".into()));
    }
    let field = match key {
        "linear-decay" => linear_decay(dim),
        "rotation" => {
            if dim != 2 {
                return Err(Error::InvalidArgument(format!(
                    "rotation field is 2-D, requested dimension {dim}"
                )));
            }
            rotation()
        }
        "newton:quadratic" => {
            let f = vmap(|x: &DVector<f64>| x.map(|t| t * t - 4.0));
            let j = mmap(|x: &DVector<f64>| DMatrix::from_diagonal(&x.map(|t| 2.0 * t)));
            make_newton_field(dim, f, Some(j)).with_label("newton:quadratic")
        }
        "glm-fisher" | "glm-score" => {
            let d = dataset.ok_or_else(|| {
                Error::InvalidArgument(format!("field '{key}' requires a GLM dataset"))
            })?;
            if d.p() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: d.p(),
                });
            }
            if key == "glm-fisher" {
                fisher_field(d)
            } else {
                score_field(d).with_label("glm-score")
            }
        }
        "zero" => VelocityField::from_fn(dim, "zero", move |_| DVector::zeros(dim))
            .with_jacobian(mmap(move |_| DMatrix::zeros(dim, dim))),
        "cubic-decay" => cubic_decay(dim),
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown field '{other}' (known: {})",
                KEYS.join(", ")
            )))
        }
    };
    Ok(field)
}

pub fn linear_decay(dim: usize) -> VelocityField {
    VelocityField::from_fn(dim, "linear-decay", |x| -x)
        .with_jacobian(mmap(move |_| -DMatrix::identity(dim, dim)))
}

pub fn rotation() -> VelocityField {
    VelocityField::from_fn(2, "rotation", |x| DVector::from_vec(vec![-x[1], x[0]]))
        .with_jacobian(mmap(|_| DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0])))
}

pub fn cubic_decay(dim: usize) -> VelocityField {
    VelocityField::from_fn(dim, "cubic-decay", |x| x.map(|t| -t * t * t)).with_jacobian(mmap(
        |x: &DVector<f64>| DMatrix::from_diagonal(&x.map(|t| -3.0 * t * t)),
    ))
}

/// Affine field `v = A x + b`.
pub fn affine(a: DMatrix<f64>, b: DVector<f64>) -> VelocityField {
    let dim = b.len();
    let a2 = a.clone();
    VelocityField::from_fn(dim, "affine", move |x| &a * x + &b).with_jacobian(mmap(move |_| a2.clone()))
}

/// Constant field.
pub fn constant(c: DVector<f64>) -> VelocityField {
    let dim = c.len();
    VelocityField::from_fn(dim, "constant", move |_| c.clone())
        .with_jacobian(mmap(move |_| DMatrix::zeros(dim, dim)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{default_steps, numeric_jacobian_steps};
    use crate::glm::{glm_simulate, CovariateLaw};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn all_keys_resolve() {
        let d = Arc::new(
            glm_simulate(
                200,
                &DVector::from_vec(vec![-0.2, 0.2]),
                1,
                CovariateLaw::StandardNormal,
            )
            .unwrap(),
        );
        for key in KEYS {
            let f = builtin_field(key, 2, Some(d.clone())).unwrap();
            assert_eq!(f.dim(), 2);
            f.eval(&DVector::from_vec(vec![0.3, -0.4])).unwrap();
        }
        assert!(builtin_field("glm-fisher", 2, None).is_err());
        assert!(builtin_field("rotation", 3, None).is_err());
        assert!(builtin_field("nope", 2, None).is_err());
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let d = Arc::new(
            glm_simulate(
                200,
                &DVector::from_vec(vec![-0.2, 0.2]),
                4,
                CovariateLaw::StandardNormal,
            )
            .unwrap(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for key in ["linear-decay", "rotation", "glm-score", "cubic-decay", "zero"] {
            let f = builtin_field(key, 2, Some(d.clone())).unwrap();
            assert!(f.has_jacobian());
            for _ in 0..20 {
                let x = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
                let ana = f.jacobian(&x).unwrap();
                let num = numeric_jacobian_steps(|y| f.eval(y), &x, &default_steps(&x)).unwrap();
                let scale = ana.amax().max(1e-12);
                assert!((&ana - &num).amax() / scale <= 1e-4, "{key}");
            }
        }
    }
}
