//! Design loop matching a target homogenized tangent under a volume limit.
//!
//! Each iteration maps the nodal design through the regularization chain,
//! solves the cell at the applied strain, evaluates the tangent mismatch and
//! its adjoint gradient, and takes one MMA step. The projection sharpness is
//! raised on a fixed cadence or when the objective stalls.

mod filter;
mod mma;
mod regularization;
mod seeds;

pub use filter::FilterOperator;
pub use mma::{MmaParams, MmaState, MmaUpdate};
pub use regularization::{
    non_discreteness, project, project_derivative, volume_constraint, DesignState, Regularization,
};
pub use seeds::Seed;

use nalgebra::{Matrix3, Vector3};

use crate::element::{MaterialParams, SimpParams};
use crate::error::{Error, Result};
use crate::homogenization::{MicroState, RveModel};
use crate::mesh::{RveMesh, SymmetryMap};
use crate::sensitivity::adjoint_gradient;
use crate::solver::{solve_warm, SolveSettings};

/// Projection-sharpness continuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaSchedule {
    pub initial: f64,
    pub factor: f64,
    pub max: f64,
    /// Iterations between scheduled increases.
    pub interval: usize,
    /// Relative objective change below which the current level counts as stalled.
    pub stagnation_tol: f64,
    /// Fewest iterations spent at one level before a stall may trigger an increase.
    pub min_interval: usize,
    /// Restart the MMA asymptotes after each increase.
    pub restart_mma: bool,
}

impl Default for BetaSchedule {
    fn default() -> Self {
        Self {
            initial: 2.0,
            factor: 1.5,
            max: 100.0,
            interval: 40,
            stagnation_tol: 1e-4,
            min_interval: 10,
            restart_mma: false,
        }
    }
}

impl BetaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial <= self.max && self.max.is_finite()) {
            return Err(Error::invalid("beta schedule needs 0 < initial <= max"));
        }
        if !(self.factor >= 1.0) {
            return Err(Error::invalid("beta factor must be at least 1"));
        }
        if self.interval == 0 {
            return Err(Error::invalid("beta interval must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemConfig {
    /// Tangent to match, Voigt stress/strain convention.
    pub c_target: Matrix3<f64>,
    /// Macro Green-Lagrange strain `[E11, E22, 2E12]`.
    pub e_applied: Vector3<f64>,
    pub v_max: f64,
    pub simp: SimpParams,
    pub r_min: f64,
    pub eta: f64,
    pub beta: BetaSchedule,
    pub solve: SolveSettings,
    pub mma: MmaParams,
    /// Relative objective change accepted as converged.
    pub objective_tol: f64,
    /// Largest constraint value accepted as satisfied.
    pub volume_tol: f64,
    pub max_iterations: usize,
    /// Halved-move retries after a failed forward solve.
    pub max_retries: usize,
    /// Enforce the square-cell symmetry group on the density.
    pub symmetric: bool,
}

impl Default for ProblemConfig {
    fn default() -> Self {
        Self {
            c_target: Matrix3::zeros(),
            e_applied: Vector3::new(0.0, 0.2, 0.0),
            v_max: 0.305,
            simp: SimpParams::default(),
            r_min: 0.0875,
            eta: 0.5,
            beta: BetaSchedule::default(),
            solve: SolveSettings::default(),
            mma: MmaParams::default(),
            objective_tol: 1e-6,
            volume_tol: 1e-6,
            max_iterations: 600,
            max_retries: 3,
            symmetric: true,
        }
    }
}

impl ProblemConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0 && self.v_max <= 1.0) {
            return Err(Error::invalid(format!("volume fraction must lie in (0, 1], got {}", self.v_max)));
        }
        if self.c_target.iter().any(|v| !v.is_finite()) || self.e_applied.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("target tangent and applied strain must be finite"));
        }
        if !(self.objective_tol > 0.0 && self.volume_tol >= 0.0) {
            return Err(Error::invalid("convergence tolerances must be positive"));
        }
        self.simp.validate()?;
        self.beta.validate()?;
        self.solve.validate()?;
        self.mma.validate()
    }
}

/// One row of the optimization history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub objective: f64,
    pub constraint: f64,
    pub volume_fraction: f64,
    pub beta: f64,
    pub non_discreteness: f64,
    /// Largest design-variable change from the previous iterate.
    pub max_change: f64,
    pub newton_iterations: usize,
    pub retries: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The starting design already matched the target.
    AlreadyOptimal,
    Converged,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub design: DesignState,
    pub c_eff: Matrix3<f64>,
    pub history: Vec<IterationRecord>,
    pub termination: Termination,
}

struct Evaluation {
    objective: f64,
    c_eff: Matrix3<f64>,
    d_rho: Vec<f64>,
    state: MicroState,
    newton_iterations: usize,
}

/// Cell model, regularization chain and settings of one optimization run.
#[derive(Debug)]
pub struct OptimizationProblem {
    pub model: RveModel,
    pub regularization: Regularization,
    pub config: ProblemConfig,
}

impl OptimizationProblem {
    pub fn new(mesh: RveMesh, material: MaterialParams, config: ProblemConfig) -> Result<Self> {
        config.validate()?;
        let filter = FilterOperator::build(&mesh, config.r_min)?;
        let symmetry =
            if config.symmetric { SymmetryMap::build(&mesh)? } else { SymmetryMap::identity(mesh.element_count()) };
        let regularization = Regularization::new(filter, symmetry, config.eta)?;
        let model = RveModel::new(mesh, material, config.simp)?;
        Ok(Self { model, regularization, config })
    }

    pub fn mesh(&self) -> &RveMesh {
        &self.model.mesh
    }

    /// Fully sharpened density of a nodal layout.
    pub fn sharp_design(&self, phi: &[f64]) -> Result<DesignState> {
        self.regularization.forward(phi, self.config.beta.max, 0)
    }

    /// Homogenized tangent of `rho` at the applied strain.
    pub fn homogenized_tangent(&self, rho: &[f64]) -> Result<Matrix3<f64>> {
        let conv = solve_warm(&self.model, rho, self.config.e_applied, None, &self.config.solve)?;
        Ok(self.model.effective_tangent(&conv.state, &conv.factor)?.c_eff)
    }

    fn evaluate(&self, rho: &[f64], guess: Option<&MicroState>) -> Result<Evaluation> {
        let conv = solve_warm(&self.model, rho, self.config.e_applied, guess, &self.config.solve)?;
        let tangent = self.model.effective_tangent(&conv.state, &conv.factor)?;
        let adj = adjoint_gradient(&self.model, &conv.state, rho, &self.config.c_target, &conv.factor, &tangent)?;
        Ok(Evaluation {
            objective: adj.objective,
            c_eff: adj.c_eff,
            d_rho: adj.gradient.d_rho,
            state: conv.state,
            newton_iterations: conv.report.iterations,
        })
    }

    /// Runs the design loop from `phi0`. `observer` sees every history row
    /// together with the design it was evaluated at.
    pub fn run(
        &self,
        phi0: &[f64],
        mut observer: impl FnMut(&IterationRecord, &DesignState),
    ) -> Result<OptimizationResult> {
        let cfg = &self.config;
        let reg = &self.regularization;
        let mesh = self.mesh();
        let mut beta = cfg.beta.initial;
        let mut design = reg.forward(phi0, beta, 0)?;
        let mut mma = MmaState::new(reg.variable_count(), 0.0, 1.0, cfg.mma)?;
        let mut guess: Option<MicroState> = None;
        let mut scale: Option<f64> = None;
        let mut prev_objective: Option<f64> = None;
        let mut last_beta_change = 0;
        let mut history = Vec::new();
        // MMA state and inputs of the last accepted step, for retries.
        let mut last_step: Option<(MmaState, Vec<f64>, f64, Vec<f64>, f64, Vec<f64>)> = None;
        let mut previous_phi = design.phi.clone();

        for it in 0..cfg.max_iterations {
            let mut retries = 0;
            let eval = loop {
                match self.evaluate(&design.rho, guess.as_ref()) {
                    Ok(ev) => break ev,
                    Err(err @ Error::InvalidArgument(_)) => return Err(err),
                    Err(err) => {
                        let Some((snapshot, phi, f, df, g, dg)) = last_step.as_ref() else {
                            log::error!("forward solve failed on the initial design: {err}");
                            return Err(Error::OptimizationAborted { iteration: it, reason: err.to_string() });
                        };
                        if retries == cfg.max_retries {
                            log::error!(
                                "forward solve failed after {retries} retries at iteration {it}, beta {beta}, \
                                 volume {:.6}: {err}",
                                volume_constraint(&design.rho, mesh, 0.0).0
                            );
                            return Err(Error::OptimizationAborted { iteration: it, reason: err.to_string() });
                        }
                        retries += 1;
                        log::warn!("forward solve failed at iteration {it} ({err}); retrying with a halved move limit");
                        let mut retry = snapshot.clone();
                        retry.params.move_limit = snapshot.params.move_limit * 0.5f64.powi(retries as i32);
                        let up = retry.update(phi, *f, df, &[*g], std::slice::from_ref(dg))?;
                        retry.params.move_limit = snapshot.params.move_limit;
                        mma = retry;
                        design = reg.forward(&up.x, beta, it)?;
                    }
                }
            };

            let (g, dg_rho) = volume_constraint(&design.rho, mesh, cfg.v_max);
            let z = eval.objective;
            let record = IterationRecord {
                iteration: it,
                objective: z,
                constraint: g,
                volume_fraction: g + cfg.v_max,
                beta,
                non_discreteness: non_discreteness(&design.rho),
                max_change: design.phi.iter().zip(&previous_phi).fold(0.0, |a, (x, y)| f64::max(a, (x - y).abs())),
                newton_iterations: eval.newton_iterations,
                retries,
            };
            log::info!("iter {it:4}  z {z:.6e}  g {g:+.3e}  beta {beta:7.3}  grey {:.4}", record.non_discreteness);
            observer(&record, &design);
            history.push(record);

            let relative_change = prev_objective.map(|p| (z - p).abs() / p.abs().max(f64::MIN_POSITIVE));
            let termination = if it == 0 && z == 0.0 && g <= cfg.volume_tol {
                Some(Termination::AlreadyOptimal)
            } else if beta >= cfg.beta.max
                && g <= cfg.volume_tol
                && relative_change.is_some_and(|r| r < cfg.objective_tol)
            {
                Some(Termination::Converged)
            } else if it + 1 == cfg.max_iterations {
                Some(Termination::IterationLimit)
            } else {
                None
            };
            if let Some(termination) = termination {
                return Ok(OptimizationResult { design, c_eff: eval.c_eff, history, termination });
            }

            // Keep the scaled objective of order one as it decreases.
            let s = match scale {
                Some(s) if z >= 0.1 * s => s,
                _ => {
                    let s = if z > 0.0 { z } else { 1.0 };
                    scale = Some(s);
                    s
                }
            };
            let d_phi: Vec<f64> = reg.backward(&design, &eval.d_rho).iter().map(|v| v / s).collect();
            let dg_phi = reg.backward(&design, &dg_rho);
            last_step = Some((mma.clone(), design.phi.clone(), z / s, d_phi.clone(), g, dg_phi.clone()));
            let up = mma.update(&design.phi, z / s, &d_phi, &[g], &[dg_phi])?;
            if up.fallback {
                log::warn!("iteration {it}: MMA subproblem fell back to the most feasible point");
            }

            let since = it + 1 - last_beta_change;
            let stalled =
                relative_change.is_some_and(|r| r < cfg.beta.stagnation_tol) && since >= cfg.beta.min_interval;
            if beta < cfg.beta.max && (since >= cfg.beta.interval || stalled) {
                beta = (beta * cfg.beta.factor).min(cfg.beta.max);
                last_beta_change = it + 1;
                if cfg.beta.restart_mma {
                    mma.reset();
                }
                log::info!("projection sharpness raised to {beta:.3}");
            }

            previous_phi = std::mem::take(&mut design.phi);
            design = reg.forward(&up.x, beta, it + 1)?;
            guess = Some(eval.state);
            prev_objective = Some(z);
        }
        Err(Error::invalid("max_iterations must be at least 1"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(n: usize, config: ProblemConfig) -> OptimizationProblem {
        let mesh = RveMesh::build(n, n, 1.0, 1.0, 0.3).unwrap();
        OptimizationProblem::new(mesh, MaterialParams::default(), config).unwrap()
    }

    #[test]
    fn already_optimal_start_stops_at_once() {
        let mut p = problem(8, ProblemConfig { r_min: 0.2, v_max: 0.9, ..Default::default() });
        let seed = Seed::Cross { half_width: 0.2, solid: 0.9, void: 0.3 };
        let phi = seed.design(p.mesh()).unwrap();
        let start = p.regularization.forward(&phi, p.config.beta.initial, 0).unwrap();
        p.config.c_target = p.homogenized_tangent(&start.rho).unwrap();
        let out = p.run(&phi, |_, _| {}).unwrap();
        assert_eq!(out.termination, Termination::AlreadyOptimal);
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.history[0].objective, 0.0);
    }

    #[test]
    fn objective_decreases_on_small_problem() {
        let base = ProblemConfig {
            r_min: 0.2,
            v_max: 0.65,
            e_applied: Vector3::new(0.0, 0.05, 0.0),
            max_iterations: 30,
            ..Default::default()
        };
        let mut p = problem(8, base);
        let target = Seed::CircularHoles { center_radius: 0.3, corner_radius: 0.2, solid: 1.0, void: 0.0 };
        let t = p.sharp_design(&target.design(p.mesh()).unwrap()).unwrap();
        p.config.c_target = p.homogenized_tangent(&t.rho).unwrap();
        let start = Seed::Cross { half_width: 0.2, solid: 0.8, void: 0.3 }.design(p.mesh()).unwrap();
        let mut seen = 0;
        let out = p
            .run(&start, |r, d| {
                assert_eq!(r.iteration, seen);
                assert!(d.rho.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!(p.regularization.symmetry.is_symmetric(&d.rho));
                seen += 1;
            })
            .unwrap();
        assert_eq!(out.termination, Termination::IterationLimit);
        let first = out.history[0].objective;
        let last = out.history.last().unwrap().objective;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(out.history.windows(2).all(|w| w[1].beta >= w[0].beta));
    }

    #[test]
    fn beta_rises_on_schedule() {
        let cfg = ProblemConfig {
            r_min: 0.3,
            e_applied: Vector3::new(0.0, 0.01, 0.0),
            max_iterations: 9,
            beta: BetaSchedule { interval: 3, stagnation_tol: 0.0, ..Default::default() },
            ..Default::default()
        };
        let p = problem(4, cfg);
        let phi = Seed::Uniform { value: 0.5 }.design(p.mesh()).unwrap();
        let out = p.run(&phi, |_, _| {}).unwrap();
        let betas: Vec<f64> = out.history.iter().map(|r| r.beta).collect();
        assert_eq!(betas, vec![2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 4.5, 4.5, 4.5]);
    }

    #[test]
    fn invalid_configuration_is_rejected() {
        let mesh = RveMesh::build(10, 10, 1.0, 1.0, 0.3).unwrap();
        let bad = ProblemConfig { v_max: 0.0, ..Default::default() };
        assert!(OptimizationProblem::new(mesh.clone(), MaterialParams::default(), bad).is_err());
        let bad = ProblemConfig { beta: BetaSchedule { initial: 200.0, ..Default::default() }, ..Default::default() };
        assert!(OptimizationProblem::new(mesh.clone(), MaterialParams::default(), bad).is_err());
        let p = OptimizationProblem::new(mesh, MaterialParams::default(), ProblemConfig::default()).unwrap();
        assert!(p.run(&[0.5; 3], |_, _| {}).is_err());
    }
}
