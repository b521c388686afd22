//! Dense linear algebra for covariance matching.

mod eigen;
mod feature;

pub use eigen::{
    default_floor, matrix_power_sym, sym_eigen, sym_eigen_floored, SymEigen, FLOOR_SCALE,
    MAX_SWEEPS,
};
pub use feature::{centering_backward, covariance, covariance_backward, FeatureMatrix};
