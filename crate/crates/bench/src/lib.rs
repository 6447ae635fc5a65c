//! Shared fixtures for the kernel benchmarks.

use microtopt::optimizer::DesignState;
use microtopt::{MaterialParams, OptimizationProblem, ProblemConfig, RveMesh, Seed};

/// Square problem with a sharpened two-hole layout at resolution `n`.
pub fn fixture(n: usize) -> (OptimizationProblem, DesignState) {
    let mesh = RveMesh::build(n, n, 1.0, 1.0, 0.3).expect("mesh");
    let problem = OptimizationProblem::new(mesh, MaterialParams::default(), ProblemConfig::default()).expect("problem");
    let seed = Seed::CircularHoles { center_radius: 0.41, corner_radius: 0.25, solid: 1.0, void: 0.0 };
    let phi = seed.design(problem.mesh()).expect("seed");
    let design = problem.sharp_design(&phi).expect("design");
    (problem, design)
}
