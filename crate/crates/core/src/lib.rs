//! Continuous-time Newton and Fisher-scoring flows, their particle
//! integrators, and the matching continuity-equation (transport) solver.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod equivalence;
pub mod error;
pub mod fields;
pub mod glm;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod particles;
pub mod transport;

pub use error::{Error, Result};
pub use fields::VelocityField;
pub use grid::{DensityField, GridSpec, WorkingDomain};
