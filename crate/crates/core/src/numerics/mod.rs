//! Shared numerical kernels: cubic B-splines, composite Gauss-Legendre
//! quadrature and dense symmetric spectral routines.

mod linalg;
mod quadrature;
mod spline;

pub use linalg::{
    check_symmetric, min_norm_solve, null_space, ordered_mean, spectral_pseudoinverse_apply,
    sym_eigendecompose, SymEigen, GAP_FLOOR_RELATIVE, SYMMETRY_TOL,
};
pub use quadrature::QuadratureRule;
pub use spline::{CubicBasis, SplineField};
