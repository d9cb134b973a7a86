//! Hamilton-Jacobi integration by quadratures on matrix Lie groups.

pub mod cotangent;
pub mod error;
pub mod expquad;
pub mod hjsolver;
pub mod liealg;
pub mod liegroup;
pub mod linalg;
pub mod ode;
pub mod quadrature;
pub mod reconstruct;
pub mod trajectory;

pub use error::{Error, Result};
