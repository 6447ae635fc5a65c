//! TOML run configuration. Every key is optional; an empty file reproduces
//! the reference problem.

use std::path::{Path, PathBuf};

use microtopt::optimizer::{BetaSchedule, MmaParams, ProblemConfig, Seed};
use microtopt::{MaterialParams, Matrix3, SimpParams, SolveSettings, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the initial-design noise and gradcheck sampling.
    pub seed: u64,
    /// Worker threads; 0 lets rayon decide.
    pub threads: usize,
    pub output_dir: PathBuf,
    pub mesh: MeshSection,
    pub material: MaterialSection,
    pub simp: SimpSection,
    pub problem: ProblemSection,
    pub beta: BetaSection,
    pub mma: MmaSection,
    pub solver: SolverSection,
    pub target: TargetSection,
    pub initial: InitialSection,
    pub homogenize: HomogenizeSection,
    pub optimize: OptimizeSection,
    pub gradcheck: GradcheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threads: 0,
            output_dir: PathBuf::from("out"),
            mesh: MeshSection::default(),
            material: MaterialSection::default(),
            simp: SimpSection::default(),
            problem: ProblemSection::default(),
            beta: BetaSection::default(),
            mma: MmaSection::default(),
            solver: SolverSection::default(),
            target: TargetSection::default(),
            initial: InitialSection::default(),
            homogenize: HomogenizeSection::default(),
            optimize: OptimizeSection::default(),
            gradcheck: GradcheckSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshSection {
    pub nx: usize,
    pub ny: usize,
    pub l1: f64,
    pub l2: f64,
    pub thickness: f64,
}

impl Default for MeshSection {
    fn default() -> Self {
        Self { nx: 100, ny: 100, l1: 1.0, l2: 1.0, thickness: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaterialSection {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
}

impl Default for MaterialSection {
    fn default() -> Self {
        let m = MaterialParams::default();
        Self { youngs_modulus: m.e0, poisson_ratio: m.nu }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimpSection {
    pub penalty: f64,
    pub rho_min: f64,
    pub rho_void: f64,
}

impl Default for SimpSection {
    fn default() -> Self {
        let s = SimpParams::default();
        Self { penalty: s.penalty, rho_min: s.rho_min, rho_void: s.rho_void }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSection {
    /// Macro Green-Lagrange strain `[E11, E22, 2E12]`.
    pub applied_strain: [f64; 3],
    pub v_max: f64,
    pub r_min: f64,
    pub eta: f64,
    pub objective_tol: f64,
    pub volume_tol: f64,
    pub max_iterations: usize,
    pub max_retries: usize,
    pub symmetric: bool,
}

impl Default for ProblemSection {
    fn default() -> Self {
        let p = ProblemConfig::default();
        Self {
            applied_strain: [p.e_applied[0], p.e_applied[1], p.e_applied[2]],
            v_max: p.v_max,
            r_min: p.r_min,
            eta: p.eta,
            objective_tol: p.objective_tol,
            volume_tol: p.volume_tol,
            max_iterations: p.max_iterations,
            max_retries: p.max_retries,
            symmetric: p.symmetric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BetaSection {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
    pub interval: usize,
    pub stagnation_tol: f64,
    pub min_interval: usize,
    pub restart_mma: bool,
}

impl Default for BetaSection {
    fn default() -> Self {
        let b = BetaSchedule::default();
        Self {
            initial: b.initial,
            factor: b.factor,
            max: b.max,
            interval: b.interval,
            stagnation_tol: b.stagnation_tol,
            min_interval: b.min_interval,
            restart_mma: b.restart_mma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MmaSection {
    pub asymptote_init: f64,
    pub asymptote_decrease: f64,
    pub asymptote_increase: f64,
    pub asymptote_min_gap: f64,
    pub constraint_penalty: f64,
    pub move_limit: f64,
}

impl Default for MmaSection {
    fn default() -> Self {
        let m = MmaParams::default();
        Self {
            asymptote_init: m.asymptote_init,
            asymptote_decrease: m.asymptote_decrease,
            asymptote_increase: m.asymptote_increase,
            asymptote_min_gap: m.asymptote_min_gap,
            constraint_penalty: m.constraint_penalty,
            move_limit: m.move_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub residual_tol: f64,
    pub absolute_floor: f64,
    pub max_newton_iters: usize,
    pub initial_steps: usize,
    pub max_step_cuts: usize,
    pub arc_length: bool,
    pub modified_newton: bool,
}

impl Default for SolverSection {
    fn default() -> Self {
        let s = SolveSettings::default();
        Self {
            residual_tol: s.residual_tol,
            absolute_floor: s.absolute_floor,
            max_newton_iters: s.max_newton_iters,
            initial_steps: s.initial_steps,
            max_step_cuts: s.max_step_cuts,
            arc_length: s.arc_length_enabled,
            modified_newton: s.modified_newton,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    Uniform,
    CircularHoles,
    Cross,
}

/// Flat description of a built-in layout; fields not used by `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayoutSpec {
    pub kind: LayoutKind,
    pub value: f64,
    pub center_radius: f64,
    pub corner_radius: f64,
    pub half_width: f64,
    pub solid: f64,
    pub void: f64,
}

impl Default for LayoutSpec {
    fn default() -> Self {
        Self {
            kind: LayoutKind::Uniform,
            value: 0.305,
            center_radius: 0.41,
            corner_radius: 0.25,
            half_width: 0.15,
            solid: 1.0,
            void: 0.0,
        }
    }
}

impl LayoutSpec {
    pub fn seed(&self) -> Seed {
        match self.kind {
            LayoutKind::Uniform => Seed::Uniform { value: self.value },
            LayoutKind::CircularHoles => Seed::CircularHoles {
                center_radius: self.center_radius,
                corner_radius: self.corner_radius,
                solid: self.solid,
                void: self.void,
            },
            LayoutKind::Cross => Seed::Cross { half_width: self.half_width, solid: self.solid, void: self.void },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    /// Explicit target tangent (row-major Voigt); when absent the tangent of
    /// the sharpened `layout` at the applied strain is used.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tangent: Option<[[f64; 3]; 3]>,
    pub layout: LayoutSpec,
}

impl Default for TargetSection {
    fn default() -> Self {
        Self { tangent: None, layout: LayoutSpec { kind: LayoutKind::CircularHoles, ..LayoutSpec::default() } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSection {
    pub layout: LayoutSpec,
    /// Amplitude of uniform random perturbations added to the layout.
    pub noise: f64,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self {
            layout: LayoutSpec { kind: LayoutKind::Cross, solid: 0.6, void: 0.2, ..LayoutSpec::default() },
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HomogenizeSection {
    pub samples: usize,
}

impl Default for HomogenizeSection {
    fn default() -> Self {
        Self { samples: 20 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSection {
    /// Write a density snapshot every this many iterations; 0 disables.
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self { samples: 8, step: 1e-6, tolerance: 1e-4 }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn material(&self) -> Result<MaterialParams, CliError> {
        Ok(MaterialParams::new(self.material.youngs_modulus, self.material.poisson_ratio)?)
    }

    pub fn simp(&self) -> SimpParams {
        SimpParams { penalty: self.simp.penalty, rho_min: self.simp.rho_min, rho_void: self.simp.rho_void }
    }

    pub fn solve_settings(&self) -> SolveSettings {
        let s = &self.solver;
        SolveSettings {
            residual_tol: s.residual_tol,
            absolute_floor: s.absolute_floor,
            max_newton_iters: s.max_newton_iters,
            initial_steps: s.initial_steps,
            max_step_cuts: s.max_step_cuts,
            arc_length_enabled: s.arc_length,
            modified_newton: s.modified_newton,
        }
    }

    pub fn applied_strain(&self) -> Vector3<f64> {
        Vector3::from(self.problem.applied_strain)
    }

    pub fn target_tangent(&self) -> Option<Matrix3<f64>> {
        self.target.tangent.map(|rows| Matrix3::from_fn(|i, j| rows[i][j]))
    }

    /// Library problem settings; the target tangent is filled in by the caller.
    pub fn problem_config(&self) -> ProblemConfig {
        let p = &self.problem;
        let b = &self.beta;
        let m = &self.mma;
        ProblemConfig {
            c_target: self.target_tangent().unwrap_or_else(Matrix3::zeros),
            e_applied: self.applied_strain(),
            v_max: p.v_max,
            simp: self.simp(),
            r_min: p.r_min,
            eta: p.eta,
            beta: BetaSchedule {
                initial: b.initial,
                factor: b.factor,
                max: b.max,
                interval: b.interval,
                stagnation_tol: b.stagnation_tol,
                min_interval: b.min_interval,
                restart_mma: b.restart_mma,
            },
            solve: self.solve_settings(),
            mma: MmaParams {
                asymptote_init: m.asymptote_init,
                asymptote_decrease: m.asymptote_decrease,
                asymptote_increase: m.asymptote_increase,
                asymptote_min_gap: m.asymptote_min_gap,
                constraint_penalty: m.constraint_penalty,
                move_limit: m.move_limit,
                ..MmaParams::default()
            },
            objective_tol: p.objective_tol,
            volume_tol: p.volume_tol,
            max_iterations: p.max_iterations,
            max_retries: p.max_retries,
            symmetric: p.symmetric,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_problem() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let p = cfg.problem_config();
        assert_eq!(p.v_max, 0.305);
        assert_eq!(p.r_min, 0.0875);
        assert_eq!(p.e_applied, Vector3::new(0.0, 0.2, 0.0));
        assert_eq!(p.simp.penalty, 3.0);
        assert_eq!(p.simp.rho_min, 1e-4);
        assert_eq!(p.eta, 0.5);
        assert_eq!((p.beta.initial, p.beta.max), (2.0, 100.0));
        assert_eq!(p.mma.asymptote_init, 0.017);
        assert_eq!(p.mma.asymptote_decrease, 0.55);
        assert_eq!(p.mma.asymptote_increase, 1.05);
        assert_eq!(p.mma.constraint_penalty, 1000.0);
        assert_eq!(cfg.mesh.thickness, 0.3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("[mesh]\nnz = 3").is_err());
        assert!(RunConfig::parse("[target.layout]\nradius = 0.2").is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg =
            RunConfig::parse("[mesh]\nnx = 12\nny = 12\n[problem]\napplied_strain = [0.0, 0.1, 0.0]").unwrap();
        cfg.target.tangent = Some([[0.1, 0.03, 0.0], [0.03, 0.1 + 1e-17, 0.0], [0.0, 0.0, 1.0 / 3.0]]);
        cfg.problem.v_max = 0.1 + 0.2;
        let again = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        let default_again = RunConfig::parse(&RunConfig::default().to_toml()).unwrap();
        assert_eq!(default_again, RunConfig::default());
    }
}
