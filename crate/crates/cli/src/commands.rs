use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use microtopt::optimizer::{OptimizationProblem, OptimizationResult};
use microtopt::sensitivity::{gradient_check, FdProblem, GradCheckReport};
use microtopt::solver::solve_warm;
use microtopt::{Matrix3, MicroState, PathSample, RveMesh, RveModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::density::DensityField;
use crate::error::CliError;
use crate::export::{self, CsvWriter};

fn prepare_output(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Samples the stress-strain path of a stored design and writes
/// `stress_strain.csv` and `tangent.csv`.
pub fn homogenize(cfg: &RunConfig, density: &Path) -> Result<Vec<PathSample>, CliError> {
    let field = DensityField::load(density)?;
    let model = RveModel::new(field.mesh()?, cfg.material()?, cfg.simp())?;
    let n = cfg.homogenize.samples;
    if n == 0 {
        return Err(CliError::Usage("homogenize needs at least one sample".into()));
    }
    let out = &cfg.output_dir;
    prepare_output(out)?;
    let mut stress = CsvWriter::create(&out.join("stress_strain.csv"), export::STRESS_HEADER)?;
    let mut tangent = CsvWriter::create(&out.join("tangent.csv"), export::TANGENT_HEADER)?;

    let e = cfg.applied_strain();
    let settings = cfg.solve_settings();
    let steps = if e.iter().all(|&v| v == 0.0) { 0 } else { n };
    let mut previous: Option<MicroState> = None;
    let mut samples = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = if steps == 0 { 1.0 } else { k as f64 / steps as f64 };
        let e_k = if k == steps { e } else { e * t };
        let solved = solve_warm(&model, &field.values, e_k, previous.as_ref(), &settings).and_then(|c| {
            let tan = model.effective_tangent(&c.state, &c.factor)?;
            Ok((c.state, tan.c_eff))
        });
        match solved {
            Ok((state, c_eff)) => {
                let s = PathSample { load_factor: t, e_hat: e_k, s_int: state.s_int, c_eff: Some(c_eff) };
                stress.row(&export::stress_row(&s))?;
                tangent.row(&export::tangent_row(&s))?;
                samples.push(s);
                previous = Some(state);
            }
            Err(err) => {
                let footer = export::failure_footer(&format!("load factor {t}: {err}"));
                stress.row(&footer)?;
                tangent.row(&footer)?;
                return Err(err.into());
            }
        }
    }
    log::info!("wrote {} samples to {}", samples.len(), out.display());
    Ok(samples)
}

/// Nodal starting design: the configured layout plus optional seeded noise.
pub fn initial_design(cfg: &RunConfig, mesh: &RveMesh) -> Result<Vec<f64>, CliError> {
    let mut phi = cfg.initial.layout.seed().design(mesh)?;
    let amp = cfg.initial.noise;
    if !(0.0..=1.0).contains(&amp) {
        return Err(CliError::Config(format!("initial.noise must lie in [0, 1], got {amp}")));
    }
    if amp > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in &mut phi {
            *v = (*v + amp * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0);
        }
    }
    Ok(phi)
}

/// Builds the problem and resolves the target tangent, writing the target
/// geometry when one is generated.
pub fn build_problem(cfg: &RunConfig) -> Result<OptimizationProblem, CliError> {
    let m = &cfg.mesh;
    let mesh = RveMesh::build(m.nx, m.ny, m.l1, m.l2, m.thickness)?;
    let mut problem = OptimizationProblem::new(mesh, cfg.material()?, cfg.problem_config())?;
    if cfg.target.tangent.is_none() {
        let layout = cfg.target.layout.seed().design(problem.mesh())?;
        let target = problem.sharp_design(&layout)?;
        problem.config.c_target = problem.homogenized_tangent(&target.rho)?;
        if cfg.output_dir.as_os_str().is_empty() {
            return Ok(problem);
        }
        prepare_output(&cfg.output_dir)?;
        DensityField::new(problem.mesh(), target.rho)?.save(&cfg.output_dir.join("target_density.txt"))?;
    }
    Ok(problem)
}

pub struct OptimizeOutcome {
    pub result: OptimizationResult,
    pub c_target: Matrix3<f64>,
}

/// Runs the design loop, streaming `history.csv` and optional snapshots.
pub fn optimize(cfg: &RunConfig) -> Result<OptimizeOutcome, CliError> {
    let out = cfg.output_dir.clone();
    prepare_output(&out)?;
    let problem = build_problem(cfg)?;
    export::write_matrix(&out.join("target_tangent.csv"), &problem.config.c_target)?;
    let phi0 = initial_design(cfg, problem.mesh())?;

    let snapshot_dir: Option<PathBuf> = (cfg.optimize.snapshot_every > 0).then(|| out.join("snapshots"));
    if let Some(dir) = &snapshot_dir {
        prepare_output(dir)?;
    }
    let mut history = CsvWriter::create(&out.join("history.csv"), export::HISTORY_HEADER)?;
    let mut write_error: Option<CliError> = None;
    let mesh = problem.mesh().clone();
    let run = problem.run(&phi0, |record, design| {
        if write_error.is_some() {
            return;
        }
        let mut step = || -> Result<(), CliError> {
            history.row(&export::history_row(record))?;
            if let Some(dir) = &snapshot_dir {
                if record.iteration % cfg.optimize.snapshot_every == 0 {
                    let path = dir.join(format!("density_{:05}.txt", record.iteration));
                    DensityField::new(&mesh, design.rho.clone())?.save(&path)?;
                }
            }
            Ok(())
        };
        if let Err(e) = step() {
            write_error = Some(e);
        }
    });
    if let Some(e) = write_error {
        return Err(e);
    }
    let result = match run {
        Ok(r) => r,
        Err(err) => {
            history.row(&export::failure_footer(&err.to_string()))?;
            return Err(err.into());
        }
    };
    let final_field = DensityField::new(&mesh, result.design.rho.clone())?;
    final_field.save(&out.join("final_density.txt"))?;
    std::fs::write(out.join("final_density.csv"), final_field.to_csv_grid())?;
    export::write_matrix(&out.join("final_tangent.csv"), &result.c_eff)?;
    Ok(OptimizeOutcome { result, c_target: problem.config.c_target })
}

/// Compares adjoint and finite-difference gradients on randomly drawn
/// elements. Returns the report and a printable table.
pub fn gradcheck(cfg: &RunConfig, density: &Path) -> Result<(GradCheckReport, String), CliError> {
    let samples = cfg.gradcheck.samples;
    if samples == 0 {
        return Err(CliError::Usage("gradcheck needs a sample count of at least 1".into()));
    }
    let field = DensityField::load(density)?;
    let model = RveModel::new(field.mesh()?, cfg.material()?, cfg.simp())?;
    let n = model.element_count();
    if samples > n {
        return Err(CliError::Usage(format!("sample count {samples} exceeds the {n} elements")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut elements = rand::seq::index::sample(&mut rng, n, samples).into_vec();
    elements.sort_unstable();
    let c_target = cfg.target_tangent().unwrap_or_else(Matrix3::zeros);
    let mut problem = FdProblem::tight(cfg.applied_strain(), c_target);
    problem.settings.max_newton_iters = problem.settings.max_newton_iters.max(cfg.solver.max_newton_iters);
    let report =
        gradient_check(&model, &field.values, &elements, cfg.gradcheck.step, cfg.gradcheck.tolerance, &problem)?;

    let mut table = String::new();
    let _ = writeln!(table, "objective {:.10e}  gradient scale {:.6e}", report.objective, report.gradient_scale);
    let _ = writeln!(table, "{:>8} {:>18} {:>18} {:>12}  result", "element", "adjoint", "finite_diff", "rel_error");
    for e in &report.entries {
        match (&e.finite_difference, &e.failure) {
            (Some(fd), _) => {
                let _ = writeln!(
                    table,
                    "{:>8} {:>18.10e} {:>18.10e} {:>12.3e}  {}",
                    e.element,
                    e.adjoint,
                    fd,
                    e.relative_error,
                    if e.passed { "PASS" } else { "FAIL" }
                );
            }
            (None, reason) => {
                let _ = writeln!(
                    table,
                    "{:>8} {:>18.10e} {:>18} {:>12}  FAIL ({})",
                    e.element,
                    e.adjoint,
                    "-",
                    "-",
                    reason.as_deref().unwrap_or("no result")
                );
            }
        }
    }
    let failed = report.entries.iter().filter(|e| !e.passed).count();
    let _ = writeln!(
        table,
        "{} of {} samples within {:.1e} (max relative error {:.3e})",
        report.entries.len() - failed,
        report.entries.len(),
        report.tolerance,
        report.max_relative_error()
    );
    Ok((report, table))
}
