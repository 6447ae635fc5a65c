//! Incremental Newton solution of the coupled displacement/multiplier system
//! at prescribed macro strain.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::homogenization::{MicroState, RveModel, SaddleFactorization};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveSettings {
    /// Convergence threshold on each residual block relative to the full
    /// residual at the start of the increment.
    pub residual_tol: f64,
    /// Absolute floor on the convergence threshold for near-zero loads.
    pub absolute_floor: f64,
    pub max_newton_iters: usize,
    pub initial_steps: usize,
    pub max_step_cuts: usize,
    pub arc_length_enabled: bool,
    /// Reuse the factorization while Newton updates stay below `1e-2`.
    pub modified_newton: bool,
}

impl Default for SolveSettings {
    fn default() -> Self {
        Self {
            residual_tol: 1e-10,
            absolute_floor: 1e-14,
            max_newton_iters: 25,
            initial_steps: 20,
            max_step_cuts: 8,
            arc_length_enabled: false,
            modified_newton: false,
        }
    }
}

impl SolveSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tol > 0.0) {
            return Err(Error::invalid(format!("residual_tol must be positive, got {}", self.residual_tol)));
        }
        if self.initial_steps == 0 {
            return Err(Error::invalid("initial_steps must be at least 1"));
        }
        if self.max_newton_iters == 0 {
            return Err(Error::invalid("max_newton_iters must be at least 1"));
        }
        if self.max_step_cuts > 30 {
            return Err(Error::invalid("max_step_cuts must not exceed 30"));
        }
        Ok(())
    }
}

/// One point of the recorded strain path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub load_factor: f64,
    pub e_hat: Vector3<f64>,
    pub s_int: Vector3<f64>,
    pub c_eff: Option<Matrix3<f64>>,
}

/// Convergence record of one accepted increment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IncrementReport {
    pub load_factor: f64,
    pub iterations: usize,
    pub reference_norm: f64,
    pub equilibrium_norm: f64,
    pub constraint_norm: f64,
}

impl IncrementReport {
    /// Largest block norm relative to the reference.
    pub fn relative_residual(&self) -> f64 {
        let worst = self.equilibrium_norm.max(self.constraint_norm);
        if self.reference_norm > 0.0 {
            worst / self.reference_norm
        } else {
            worst
        }
    }
}

/// Converged state together with the Jacobian factorized at it.
#[derive(Debug)]
pub struct ConvergedState {
    pub state: MicroState,
    pub factor: SaddleFactorization,
    pub report: IncrementReport,
}

#[derive(Debug)]
pub struct SolvePath {
    pub samples: Vec<PathSample>,
    pub final_state: MicroState,
    pub factor: SaddleFactorization,
    pub increments: Vec<IncrementReport>,
}

impl SolvePath {
    pub fn total_newton_iterations(&self) -> usize {
        self.increments.iter().map(|r| r.iterations).sum()
    }
}

fn split_update(model: &RveModel, state: &mut MicroState, dx: &DVector<f64>, scale: f64) {
    let nf = model.free_count();
    for (k, &dof) in model.free_dofs().iter().enumerate() {
        state.u[dof] += scale * dx[k];
    }
    for r in 0..model.multiplier_count() {
        state.lambda[r] += scale * dx[nf + r];
    }
}

/// Level below which residual norms are dominated by cancellation error in
/// the terms being balanced.
fn roundoff_floor(model: &RveModel, state: &MicroState, f_int: &DVector<f64>) -> f64 {
    let alpha = model.ops.alpha;
    let magnitude = f_int.norm() / model.volume()
        + 2.0 * alpha * state.lambda.norm()
        + alpha * (model.ops.apply_tp(&state.u).norm() + (&model.ops.p * state.kin.g_sym).norm());
    64.0 * f64::EPSILON * magnitude
}

fn block_norms(model: &RveModel, rs: &DVector<f64>) -> (f64, f64) {
    let nf = model.free_count();
    (rs.rows(0, nf).norm(), rs.rows(nf, model.multiplier_count()).norm())
}

/// Newton iteration at fixed macro strain, starting from `state0`'s
/// displacements and multipliers.
pub fn newton_solve_at_strain(
    model: &RveModel,
    state0: &MicroState,
    e_target: Vector3<f64>,
    rho: &[f64],
    settings: &SolveSettings,
) -> Result<ConvergedState> {
    model.check_density(rho)?;
    let state = state0.clone().with_strain(e_target, &model.ops)?;
    newton_iterate(model, state, rho, settings, 1.0)
}

fn newton_iterate(
    model: &RveModel,
    mut state: MicroState,
    rho: &[f64],
    settings: &SolveSettings,
    load_factor: f64,
) -> Result<ConvergedState> {
    let mut reference = None;
    let mut factor: Option<SaddleFactorization> = None;
    let mut factor_current;
    let mut last_update = f64::INFINITY;
    let mut worst = f64::NAN;

    for it in 0..=settings.max_newton_iters {
        let reuse = settings.modified_newton && factor.is_some() && last_update < 1e-2;
        let f_int = if reuse {
            factor_current = false;
            model.internal_force(rho, &state.u)
        } else {
            let (f, fac) = model.assemble_and_factorize(rho, &state.u)?;
            factor = Some(fac);
            factor_current = true;
            f
        };
        state.refresh_stress(&model.ops);
        let r = model.residual_from_force(&state, &f_int, None);
        let rs = model.system_residual(&r);
        let reference_norm = *reference.get_or_insert(rs.norm());
        let (eq, con) = block_norms(model, &rs);
        worst = eq.max(con);
        if !worst.is_finite() || (reference_norm > 0.0 && worst > 1e12 * reference_norm) {
            break;
        }
        let threshold = (settings.residual_tol * reference_norm)
            .max(settings.absolute_floor)
            .max(roundoff_floor(model, &state, &f_int));
        if eq <= threshold && con <= threshold {
            let factor = match factor {
                Some(f) if factor_current => f,
                _ => model.assemble_and_factorize(rho, &state.u)?.1,
            };
            state.converged = true;
            log::trace!("converged at t = {load_factor} after {it} iterations (residual {worst:e})");
            return Ok(ConvergedState {
                state,
                factor,
                report: IncrementReport {
                    load_factor,
                    iterations: it,
                    reference_norm,
                    equilibrium_norm: eq,
                    constraint_norm: con,
                },
            });
        }
        if it == settings.max_newton_iters {
            break;
        }
        let dx = factor.as_ref().expect("factorized").solve_vec(&(-rs))?;
        last_update = dx.amax();
        split_update(model, &mut state, &dx, 1.0);
    }
    let rel = match reference {
        Some(r) if r > 0.0 => worst / r,
        _ => worst,
    };
    Err(Error::StepFailure { iterations: settings.max_newton_iters, residual: rel })
}

fn sample(model: &RveModel, c: &ConvergedState) -> Result<PathSample> {
    let tangent = model.effective_tangent(&c.state, &c.factor)?;
    Ok(PathSample {
        load_factor: c.report.load_factor,
        e_hat: c.state.kin.e_hat,
        s_int: c.state.s_int,
        c_eff: Some(tangent.c_eff),
    })
}

fn is_recoverable(e: &Error) -> bool {
    matches!(e, Error::StepFailure { .. } | Error::StructuralSingularity(_) | Error::InadmissibleKinematics)
}

fn path_failure(load_factor: f64, reason: &Error, last: Option<&PathSample>) -> Error {
    Error::PathFailure { load_factor, reason: reason.to_string(), last_converged: last.map(|s| Box::new(s.clone())) }
}

/// Ramps the macro strain from zero to `e_final`, recording `n_samples`
/// equally spaced samples (plus the origin). `n_samples = 0` uses
/// `settings.initial_steps`.
pub fn solve_path(
    model: &RveModel,
    rho: &[f64],
    e_final: Vector3<f64>,
    n_samples: usize,
    settings: &SolveSettings,
) -> Result<SolvePath> {
    settings.validate()?;
    model.check_density(rho)?;
    // Reject inadmissible targets before stepping.
    crate::homogenization::strain_to_symmetric_gradient(&e_final)?;
    if settings.arc_length_enabled {
        return arc_length_path(model, rho, e_final, settings);
    }

    let intervals = if n_samples == 0 { settings.initial_steps } else { n_samples };
    let steps_per_interval = settings.initial_steps.div_ceil(intervals).max(1);
    let nominal = intervals * steps_per_interval;
    let ticks_per_step: u64 = 1 << settings.max_step_cuts;
    let total = nominal as u64 * ticks_per_step;
    let ticks_per_sample = steps_per_interval as u64 * ticks_per_step;

    let start = newton_iterate(model, model.zero_state(), rho, settings, 0.0)?;
    let mut samples = vec![sample(model, &start)?];
    let mut increments = Vec::new();
    if e_final.iter().all(|&v| v == 0.0) {
        return Ok(SolvePath { samples, final_state: start.state, factor: start.factor, increments });
    }

    let mut current = start;
    let mut previous_state: Option<(MicroState, u64)> = None;
    let mut tick = 0u64;
    let mut step = ticks_per_step;
    let mut depth = 0usize;
    let mut clean_steps = 0usize;
    while tick < total {
        let next = (tick + step).min(total);
        let t = next as f64 / total as f64;
        let e_t = if next == total { e_final } else { e_final * t };
        let guess = secant_predictor(&current.state, previous_state.as_ref(), tick, next);
        match guess.with_strain(e_t, &model.ops).and_then(|s| newton_iterate(model, s, rho, settings, t)) {
            Ok(conv) => {
                increments.push(conv.report);
                let old = std::mem::replace(&mut current, conv);
                previous_state = Some((old.state, tick));
                tick = next;
                if tick % ticks_per_sample == 0 {
                    samples.push(sample(model, &current)?);
                }
                clean_steps += 1;
                if depth > 0 && clean_steps >= 2 && tick % (step * 2) == 0 {
                    step *= 2;
                    depth -= 1;
                    clean_steps = 0;
                }
            }
            Err(e) if is_recoverable(&e) => {
                if depth >= settings.max_step_cuts {
                    return Err(path_failure(tick as f64 / total as f64, &e, samples.last()));
                }
                log::debug!("cutting increment at t = {t}: {e}");
                step /= 2;
                depth += 1;
                clean_steps = 0;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SolvePath { samples, final_state: current.state, factor: current.factor, increments })
}

fn secant_predictor(current: &MicroState, previous: Option<&(MicroState, u64)>, tick: u64, next: u64) -> MicroState {
    let mut guess = current.clone();
    if let Some((prev, prev_tick)) = previous {
        if tick > *prev_tick {
            let ratio = (next - tick) as f64 / (tick - prev_tick) as f64;
            guess.u += (&current.u - &prev.u) * ratio;
            guess.lambda += (&current.lambda - &prev.lambda) * ratio;
        }
    }
    guess
}

/// Solves at `e_final` starting from a nearby converged state, falling back
/// to the full path if the direct attempt fails.
pub fn solve_warm(
    model: &RveModel,
    rho: &[f64],
    e_final: Vector3<f64>,
    guess: Option<&MicroState>,
    settings: &SolveSettings,
) -> Result<ConvergedState> {
    if let Some(g) = guess {
        if g.u.len() == model.dof_count() && g.lambda.len() == model.multiplier_count() {
            match newton_solve_at_strain(model, g, e_final, rho, settings) {
                Ok(c) => return Ok(c),
                Err(e) if is_recoverable(&e) => {
                    log::debug!("warm start failed ({e}); solving the full path")
                }
                Err(e) => return Err(e),
            }
        }
    }
    let path = solve_path(model, rho, e_final, 1, settings)?;
    let report = path.increments.last().copied().unwrap_or(IncrementReport {
        load_factor: 1.0,
        iterations: 0,
        reference_norm: 0.0,
        equilibrium_norm: 0.0,
        constraint_norm: 0.0,
    });
    Ok(ConvergedState { state: path.final_state, factor: path.factor, report })
}

fn system_vector(model: &RveModel, state: &MicroState) -> DVector<f64> {
    let mut v = DVector::zeros(model.system_size());
    let nf = model.free_count();
    for (k, &dof) in model.free_dofs().iter().enumerate() {
        v[k] = state.u[dof];
    }
    v.rows_mut(nf, model.multiplier_count()).copy_from(&state.lambda);
    v
}

/// `∂r/∂t` for the strain `t·e_final`: only the constraint block depends on t.
fn load_derivative(model: &RveModel, state: &MicroState, e_final: &Vector3<f64>) -> DVector<f64> {
    let mut q = DVector::zeros(model.system_size());
    let zq = &state.kin.z * e_final * model.ops.alpha;
    q.rows_mut(model.free_count(), model.multiplier_count()).copy_from(&zq);
    q
}

struct ArcStep {
    converged: ConvergedState,
    delta: DVector<f64>,
    dt: f64,
}

/// Crisfield spherical arc-length step in `(u_free, t)` space.
#[allow(clippy::too_many_arguments)]
fn arc_length_step(
    model: &RveModel,
    rho: &[f64],
    e_final: &Vector3<f64>,
    base: &ConvergedState,
    t0: f64,
    radius: f64,
    weight: f64,
    prev_delta: Option<(&DVector<f64>, f64)>,
    settings: &SolveSettings,
) -> Result<ArcStep> {
    let nf = model.free_count();
    let q0 = load_derivative(model, &base.state, e_final);
    let tangent = base.factor.solve_vec(&(-q0))?;
    let tnorm = (tangent.rows(0, nf).norm_squared() + weight).sqrt();
    let mut dt = radius / tnorm;
    if let Some((pd, pdt)) = prev_delta {
        if tangent.rows(0, nf).dot(&pd.rows(0, nf)) + weight * pdt < 0.0 {
            dt = -dt;
        }
    }
    let mut delta = tangent * dt;

    let base_vec = system_vector(model, &base.state);
    let mut reference = None;
    for it in 0..=settings.max_newton_iters {
        let t = t0 + dt;
        let x = &base_vec + &delta;
        let mut state = base.state.clone().with_strain(e_final * t, &model.ops)?;
        for (k, &dof) in model.free_dofs().iter().enumerate() {
            state.u[dof] = x[k];
        }
        state.lambda.copy_from(&x.rows(nf, model.multiplier_count()));
        state.refresh_stress(&model.ops);
        let (f_int, factor) = model.assemble_and_factorize(rho, &state.u)?;
        let rs = model.system_residual(&model.residual_from_force(&state, &f_int, None));
        let reference_norm = *reference.get_or_insert(rs.norm().max(radius));
        let (eq, con) = block_norms(model, &rs);
        let threshold = (settings.residual_tol * reference_norm)
            .max(settings.absolute_floor)
            .max(roundoff_floor(model, &state, &f_int));
        if !eq.is_finite() || !con.is_finite() {
            break;
        }
        if eq <= threshold && con <= threshold {
            state.converged = true;
            return Ok(ArcStep {
                converged: ConvergedState {
                    state,
                    factor,
                    report: IncrementReport {
                        load_factor: t,
                        iterations: it,
                        reference_norm,
                        equilibrium_norm: eq,
                        constraint_norm: con,
                    },
                },
                delta,
                dt,
            });
        }
        if it == settings.max_newton_iters {
            break;
        }
        let q = load_derivative(model, &state, e_final);
        let rhs = DMatrix::from_columns(&[-rs, -q]);
        let sol = factor.solve(&rhs)?;
        let a = sol.column(0).into_owned();
        let b = sol.column(1).into_owned();
        let du = delta.rows(0, nf) + a.rows(0, nf);
        let bu = b.rows(0, nf);
        let qa = bu.norm_squared() + weight;
        let qb = 2.0 * (bu.dot(&du) + weight * dt);
        let qc = du.norm_squared() + weight * dt * dt - radius * radius;
        let disc = qb * qb - 4.0 * qa * qc;
        let dlam = if disc < 0.0 {
            // Fall back to the minimum-norm correction.
            -qb / (2.0 * qa)
        } else {
            let s = disc.sqrt();
            let r1 = (-qb + s) / (2.0 * qa);
            let r2 = (-qb - s) / (2.0 * qa);
            let score = |r: f64| {
                let cand = &du + &bu * r;
                cand.dot(&delta.rows(0, nf)) + weight * (dt + r) * dt
            };
            if score(r1) >= score(r2) {
                r1
            } else {
                r2
            }
        };
        delta += a + b * dlam;
        dt += dlam;
    }
    Err(Error::StepFailure { iterations: settings.max_newton_iters, residual: f64::NAN })
}

fn arc_length_path(
    model: &RveModel,
    rho: &[f64],
    e_final: Vector3<f64>,
    settings: &SolveSettings,
) -> Result<SolvePath> {
    let start = newton_iterate(model, model.zero_state(), rho, settings, 0.0)?;
    let mut samples = vec![sample(model, &start)?];
    let mut increments = Vec::new();
    if e_final.iter().all(|&v| v == 0.0) {
        return Ok(SolvePath { samples, final_state: start.state, factor: start.factor, increments });
    }

    // The first increment is load controlled and calibrates the arc radius.
    let dt0 = 1.0 / settings.initial_steps as f64;
    let first = newton_solve_at_strain(model, &start.state, e_final * dt0, rho, settings)
        .map_err(|e| path_failure(0.0, &e, samples.last()))?;
    let nf = model.free_count();
    let first_delta = system_vector(model, &first.state) - system_vector(model, &start.state);
    let du2 = first_delta.rows(0, nf).norm_squared();
    let weight = if du2 > 0.0 { du2 / (dt0 * dt0) } else { 1.0 };
    let nominal_radius = (du2 + weight * dt0 * dt0).sqrt();
    let mut radius = nominal_radius;
    let mut t = dt0;
    let mut fixed_first = first;
    fixed_first.report.load_factor = t;
    increments.push(fixed_first.report);
    samples.push(sample(model, &fixed_first)?);
    let mut current = fixed_first;
    let mut prev_delta = Some((first_delta, dt0));
    let mut cuts = 0usize;

    while t < 1.0 {
        let last_dt = prev_delta.as_ref().map_or(dt0, |p| p.1);
        if t + last_dt.abs() * radius / nominal_radius >= 1.0 - 1e-12 {
            // Land exactly on the target strain.
            match newton_solve_at_strain(model, &current.state, e_final, rho, settings) {
                Ok(mut conv) => {
                    conv.report.load_factor = 1.0;
                    increments.push(conv.report);
                    samples.push(sample(model, &conv)?);
                    current = conv;
                    break;
                }
                Err(e) if is_recoverable(&e) && cuts < settings.max_step_cuts => {
                    // Approach in a shorter arc first.
                    radius *= 0.5;
                    cuts += 1;
                    let step = arc_length_step(
                        model,
                        rho,
                        &e_final,
                        &current,
                        t,
                        radius,
                        weight,
                        prev_delta.as_ref().map(|(d, s)| (d, *s)),
                        settings,
                    );
                    if let Ok(s) = step {
                        if s.converged.report.load_factor < 1.0 {
                            t = s.converged.report.load_factor;
                            increments.push(s.converged.report);
                            samples.push(sample(model, &s.converged)?);
                            current = s.converged;
                            prev_delta = Some((s.delta, s.dt));
                        }
                    }
                    continue;
                }
                Err(e) => return Err(path_failure(t, &e, samples.last())),
            }
        }
        match arc_length_step(
            model,
            rho,
            &e_final,
            &current,
            t,
            radius,
            weight,
            prev_delta.as_ref().map(|(d, s)| (d, *s)),
            settings,
        ) {
            Ok(s) if s.converged.report.load_factor > t - 1.0 && s.converged.report.load_factor <= 1.0 + 1e-12 => {
                t = s.converged.report.load_factor;
                increments.push(s.converged.report);
                samples.push(sample(model, &s.converged)?);
                current = s.converged;
                prev_delta = Some((s.delta, s.dt));
                if cuts > 0 {
                    radius = (radius * 2.0).min(nominal_radius);
                    cuts -= 1;
                }
            }
            Ok(s) => {
                // Overshoot past the target: retry with a shorter arc.
                if cuts >= settings.max_step_cuts {
                    return Err(path_failure(
                        t,
                        &Error::StepFailure { iterations: s.converged.report.iterations, residual: 0.0 },
                        samples.last(),
                    ));
                }
                radius *= 0.5;
                cuts += 1;
            }
            Err(e) if is_recoverable(&e) => {
                if cuts >= settings.max_step_cuts {
                    return Err(path_failure(t, &e, samples.last()));
                }
                radius *= 0.5;
                cuts += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(SolvePath { samples, final_state: current.state, factor: current.factor, increments })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::element::{MaterialParams, SimpParams};
    use crate::mesh::RveMesh;

    fn model(n: usize) -> RveModel {
        let mesh = RveMesh::build(n, n, 1.0, 1.0, 0.3).unwrap();
        RveModel::new(mesh, MaterialParams::default(), SimpParams::default()).unwrap()
    }

    fn patterned(n: usize) -> Vec<f64> {
        (0..n * n).map(|e| 0.3 + 0.7 * (((e * 37) % 11) as f64 / 10.0)).collect()
    }

    #[test]
    fn zero_strain_converges_immediately() {
        let m = model(3);
        let rho = vec![1.0; 9];
        let c = newton_solve_at_strain(&m, &m.zero_state(), Vector3::zeros(), &rho, &SolveSettings::default()).unwrap();
        assert_eq!(c.report.iterations, 0);
        assert_eq!(c.state.u.amax(), 0.0);
    }

    #[test]
    fn linear_regime_single_step() {
        let m = model(4);
        let rho = vec![1.0; 16];
        let c =
            newton_solve_at_strain(&m, &m.zero_state(), Vector3::new(0.0, 1e-6, 0.0), &rho, &SolveSettings::default())
                .unwrap();
        assert!(c.report.iterations <= 2, "{} iterations", c.report.iterations);
        let r = m.residual(&c.state, &rho, None).unwrap();
        assert!(r.constraint.amax() < 1e-12);
    }

    #[test]
    fn one_element_cell_converges() {
        let m = model(1);
        let rho = vec![1.0];
        let c =
            newton_solve_at_strain(&m, &m.zero_state(), Vector3::new(0.0, 1e-6, 0.0), &rho, &SolveSettings::default())
                .unwrap();
        let r = m.residual(&c.state, &rho, None).unwrap();
        assert!(r.equilibrium.amax() < 1e-10 && r.constraint.amax() < 1e-10);
    }

    #[test]
    fn solid_path_is_monotone() {
        let m = model(4);
        let rho = vec![1.0; 16];
        let path = solve_path(&m, &rho, Vector3::new(0.0, 0.2, 0.0), 0, &SolveSettings::default()).unwrap();
        assert_eq!(path.samples.len(), 21);
        for w in path.samples.windows(2) {
            assert!(w[1].s_int[1] > w[0].s_int[1]);
        }
        assert_eq!(path.final_state.kin.e_hat, Vector3::new(0.0, 0.2, 0.0));
        assert_eq!(path.samples.last().unwrap().load_factor, 1.0);
    }

    #[test]
    fn zero_target_gives_single_sample() {
        let m = model(2);
        let path = solve_path(&m, &[1.0; 4], Vector3::zeros(), 0, &SolveSettings::default()).unwrap();
        assert_eq!(path.samples.len(), 1);
        assert_eq!(path.samples[0].s_int, Vector3::zeros());
    }

    #[test]
    fn path_independence() {
        let m = model(4);
        let rho = patterned(4);
        let target = Vector3::new(0.02, 0.15, 0.01);
        let coarse = SolveSettings { initial_steps: 10, ..Default::default() };
        let fine = SolveSettings { initial_steps: 40, ..Default::default() };
        let a = solve_path(&m, &rho, target, 0, &coarse).unwrap();
        let b = solve_path(&m, &rho, target, 0, &fine).unwrap();
        let ca = m.effective_tangent(&a.final_state, &a.factor).unwrap().c_eff;
        let cb = m.effective_tangent(&b.final_state, &b.factor).unwrap().c_eff;
        assert!((ca - cb).amax() <= 1e-8 * ca.amax());
    }

    #[test]
    fn arc_length_reaches_same_state() {
        let m = model(4);
        let rho = patterned(4);
        let target = Vector3::new(0.0, 0.2, 0.0);
        let plain = solve_path(&m, &rho, target, 0, &SolveSettings::default()).unwrap();
        let arc_settings = SolveSettings { arc_length_enabled: true, ..Default::default() };
        let arc = solve_path(&m, &rho, target, 0, &arc_settings).unwrap();
        assert_eq!(arc.final_state.kin.e_hat, target);
        assert!((arc.final_state.s_int - plain.final_state.s_int).amax() < 1e-9);
        for w in arc.samples.windows(2) {
            assert!(w[1].load_factor > w[0].load_factor);
        }
    }

    #[test]
    fn modified_newton_converges_to_same_state() {
        let m = model(4);
        let rho = patterned(4);
        let target = Vector3::new(0.0, 0.1, 0.0);
        let a = solve_path(&m, &rho, target, 0, &SolveSettings::default()).unwrap();
        let settings = SolveSettings { modified_newton: true, max_newton_iters: 60, ..Default::default() };
        let b = solve_path(&m, &rho, target, 0, &settings).unwrap();
        assert!((a.final_state.s_int - b.final_state.s_int).amax() < 1e-9);
    }

    #[test]
    fn warm_start_matches_cold_solve() {
        let m = model(4);
        let rho = patterned(4);
        let target = Vector3::new(0.0, 0.1, 0.0);
        let cold = solve_path(&m, &rho, target, 0, &SolveSettings::default()).unwrap();
        let mut rho2 = rho.clone();
        rho2[5] = (rho2[5] - 0.05).max(0.0);
        let warm = solve_warm(&m, &rho2, target, Some(&cold.final_state), &SolveSettings::default()).unwrap();
        let reference = solve_path(&m, &rho2, target, 0, &SolveSettings::default()).unwrap();
        assert!((warm.state.s_int - reference.final_state.s_int).amax() < 1e-9);
    }

    #[test]
    fn invalid_settings_rejected() {
        let bad = SolveSettings { initial_steps: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = SolveSettings { residual_tol: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn inadmissible_target_rejected() {
        let m = model(2);
        let err = solve_path(&m, &[1.0; 4], Vector3::new(0.0, -0.6, 0.0), 0, &SolveSettings::default()).unwrap_err();
        assert!(matches!(err, Error::InadmissibleStrain(_)));
    }
}
