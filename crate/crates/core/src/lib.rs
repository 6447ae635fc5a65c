//! Finite-strain periodic homogenization and density-based topology
//! optimization of 2D microstructures.
//!
//! The pipeline runs mesh → element → homogenization → solver →
//! sensitivity → optimizer. [`RveModel`] bundles the discretization and is the
//! entry point for most operations.

pub mod element;
pub mod error;
pub mod homogenization;
pub mod mesh;
pub mod optimizer;
pub mod sensitivity;
pub mod solver;

pub use element::{simp_modulus, MaterialParams, SimpParams};
pub use error::{Error, Result};
pub use homogenization::{EffectiveTangent, MacroKinematics, MicroState, PbcOperators, RveModel};
pub use mesh::{BoundaryPairing, RveMesh, SymmetryMap};
pub use optimizer::{OptimizationProblem, OptimizationResult, ProblemConfig, Seed};
pub use solver::{newton_solve_at_strain, solve_path, PathSample, SolvePath, SolveSettings};

pub use nalgebra::{Matrix3, Vector3};

/// Runs the numerical kernels single-threaded inside the linear algebra
/// backend; element loops still use the rayon pool.
pub fn init_backend() {
    faer::set_global_parallelism(faer::Par::Seq);
}
