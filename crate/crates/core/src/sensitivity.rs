//! Adjoint sensitivities of tangent-matching criteria with respect to the
//! element densities, plus a finite-difference oracle.
//!
//! All derivatives of `C_eff` are contracted with `G = ∂z/∂C_eff` as they are
//! formed. They go through the strain response `Y = Υ⁻¹ [0; α Z]` stored
//! in [`EffectiveTangent`], for which `∂C_eff = Y_uᵀ (∂K/|Ω|) Y_u` whenever
//! only the stiffness varies.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;

use crate::element::ElemVec;
use crate::error::{Error, Result};
use crate::homogenization::{collect_matrix, EffectiveTangent, MicroState, RveModel, SaddleFactorization};
use crate::solver::{solve_warm, ConvergedState, SolveSettings};

/// Sum of squared Voigt-entry differences and its derivative.
pub fn objective_and_partial(c_eff: &Matrix3<f64>, c_target: &Matrix3<f64>) -> (f64, Matrix3<f64>) {
    let d = c_eff - c_target;
    (d.norm_squared(), 2.0 * d)
}

fn require_converged(state: &MicroState) -> Result<()> {
    if state.converged {
        Ok(())
    } else {
        Err(Error::StaleState("sensitivities need a converged state".into()))
    }
}

fn require_response(model: &RveModel, tangent: &EffectiveTangent) -> Result<()> {
    if tangent.strain_response.nrows() != model.system_size() {
        return Err(Error::StaleState(
            "tangent carries no strain response; compute it with RveModel::effective_tangent".into(),
        ));
    }
    Ok(())
}

/// Full-length displacement columns of the strain response.
fn response_columns(model: &RveModel, tangent: &EffectiveTangent) -> [DVector<f64>; 3] {
    let nf = model.free_count();
    let y = &tangent.strain_response;
    std::array::from_fn(|a| model.expand_free(&y.column(a).as_slice()[..nf]))
}

/// Explicit `∂z/∂ρ_e` at fixed state: `(1/|Ω|) Σ_ab G_ab Y_aᵀ (∂K_e/∂ρ_e) Y_b`.
pub fn dceff_drho_contracted(
    model: &RveModel,
    state: &MicroState,
    rho: &[f64],
    tangent: &EffectiveTangent,
    dz_dc: &Matrix3<f64>,
) -> Result<Vec<f64>> {
    model.check_density(rho)?;
    require_converged(state)?;
    require_response(model, tangent)?;
    let y = response_columns(model, tangent);
    let inv_vol = 1.0 / model.volume();
    Ok((0..model.element_count())
        .into_par_iter()
        .map(|e| {
            let el = model.element_model_derivative(e, rho[e]);
            if el.scale == 0.0 {
                return 0.0;
            }
            let ke = el.tangent(&model.gather(&state.u, e));
            let ye: [ElemVec; 3] = std::array::from_fn(|a| model.gather(&y[a], e));
            let mut acc = 0.0;
            for a in 0..3 {
                let kya = ke * ye[a];
                for b in 0..3 {
                    acc += dz_dc[(a, b)] * ye[b].dot(&kya);
                }
            }
            acc * inv_vol
        })
        .collect())
}

/// Partial `∂z/∂û_p` over all 2n displacement DOFs, multipliers and strain
/// held fixed.
pub fn dceff_du_contracted(
    model: &RveModel,
    state: &MicroState,
    rho: &[f64],
    tangent: &EffectiveTangent,
    dz_dc: &Matrix3<f64>,
) -> Result<DVector<f64>> {
    model.check_density(rho)?;
    require_converged(state)?;
    require_response(model, tangent)?;
    let y = response_columns(model, tangent);
    let inv_vol = 1.0 / model.volume();
    let per_element: Vec<ElemVec> = (0..model.element_count())
        .into_par_iter()
        .map(|e| {
            let el = model.element_model(e, rho[e]);
            if el.frozen {
                return ElemVec::zeros();
            }
            let ue = model.gather(&state.u, e);
            let ye: [ElemVec; 3] = std::array::from_fn(|a| model.gather(&y[a], e));
            let mut acc = ElemVec::zeros();
            for a in 0..3 {
                for b in a..3 {
                    let w = if a == b { dz_dc[(a, a)] } else { dz_dc[(a, b)] + dz_dc[(b, a)] };
                    if w != 0.0 {
                        acc += el.tangent_directional(&ue, &ye[a], &ye[b]) * w;
                    }
                }
            }
            acc * inv_vol
        })
        .collect();
    let mut out = DVector::zeros(model.dof_count());
    for (e, g) in per_element.iter().enumerate() {
        for (i, &d) in model.element_dofs(e).iter().enumerate() {
            out[d] += g[i];
        }
    }
    Ok(out)
}

/// `Σ_ij W_ij ∂S̄_ij/∂S_k` with `W = M̄⁻ᵀ G M̄⁻ᵀ`; the contraction of
/// `∂C_s` through a stress change.
fn stress_contraction(state: &MicroState, dz_dc: &Matrix3<f64>) -> Vector3<f64> {
    let minv_t = state.kin.m_bar_inv.transpose();
    let w = minv_t * dz_dc * minv_t;
    Vector3::from_fn(|k, _| {
        let mut unit = Vector3::zeros();
        unit[k] = 1.0;
        -w.component_mul(&collect_matrix(&unit)).sum()
    })
}

/// Partial `∂z/∂λ_r`: multipliers enter only through the stress in `C_s`.
pub fn dceff_dlambda(model: &RveModel, state: &MicroState, dz_dc: &Matrix3<f64>) -> DVector<f64> {
    let q = stress_contraction(state, dz_dc);
    &state.kin.z * q * model.ops.alpha
}

/// Partial `∂z/∂Ê_r` at fixed displacements and multipliers.
pub fn dceff_de(
    model: &RveModel,
    state: &MicroState,
    tangent: &EffectiveTangent,
    dz_dc: &Matrix3<f64>,
) -> Result<Vector3<f64>> {
    require_response(model, tangent)?;
    let nf = model.free_count();
    let alpha = model.ops.alpha;
    let minv = state.kin.m_bar_inv;
    let s_bar = collect_matrix(&state.s_int);
    let y_lambda = tangent.strain_response.rows(nf, model.multiplier_count());
    let mut out = Vector3::zeros();
    for r in 0..3 {
        let dm = collect_matrix(&minv.column(r).into_owned());
        let dminv = -minv * dm * minv;
        let dz = &state.kin.z * (-dm * minv);
        let ds = dz.tr_mul(&state.lambda) * alpha;
        let dcs = -(dminv * s_bar * minv + minv * collect_matrix(&ds) * minv + minv * s_bar * dminv);
        let coupling = (dz.tr_mul(&y_lambda) + y_lambda.tr_mul(&dz)) * alpha;
        let dc = dcs - Matrix3::from_iterator(coupling.iter().copied());
        out[r] = dz_dc.component_mul(&dc).sum();
    }
    Ok(out)
}

/// Adjoint vector over the system unknowns `[u_free; λ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    pub chi: DVector<f64>,
    /// Explicit `∂z/∂ρ_e` at fixed state.
    pub partial_z_rho: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientVector {
    /// Total `dz/dρ_e` per element.
    pub d_rho: Vec<f64>,
    /// Chained derivative per design variable; filled by the optimizer.
    pub d_phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGradient {
    pub objective: f64,
    pub c_eff: Matrix3<f64>,
    pub gradient: GradientVector,
    pub adjoint: AdjointSolution,
}

/// Total derivative of the tangent-matching objective with respect to every
/// element density under prescribed macro strain.
pub fn adjoint_gradient(
    model: &RveModel,
    state: &MicroState,
    rho: &[f64],
    c_target: &Matrix3<f64>,
    factor: &SaddleFactorization,
    tangent: &EffectiveTangent,
) -> Result<AdjointGradient> {
    let (objective, dz_dc) = objective_and_partial(&tangent.c_eff, c_target);
    let partial_z_rho = dceff_drho_contracted(model, state, rho, tangent, &dz_dc)?;
    let dz_du = dceff_du_contracted(model, state, rho, tangent, &dz_dc)?;
    let dz_dl = dceff_dlambda(model, state, &dz_dc);

    let nf = model.free_count();
    let mut rhs = DVector::zeros(model.system_size());
    for (k, &dof) in model.free_dofs().iter().enumerate() {
        rhs[k] = -dz_du[dof];
    }
    rhs.rows_mut(nf, model.multiplier_count()).copy_from(&(-dz_dl));
    let chi = factor.solve_transpose(&DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?.column(0).into_owned();

    let chi_u = model.expand_free(&chi.as_slice()[..nf]);
    let inv_vol = 1.0 / model.volume();
    let d_rho: Vec<f64> = (0..model.element_count())
        .into_par_iter()
        .map(|e| {
            let el = model.element_model_derivative(e, rho[e]);
            let implicit = if el.scale == 0.0 {
                0.0
            } else {
                model.gather(&chi_u, e).dot(&el.internal_force(&model.gather(&state.u, e))) * inv_vol
            };
            partial_z_rho[e] + implicit
        })
        .collect();

    Ok(AdjointGradient {
        objective,
        c_eff: tangent.c_eff,
        gradient: GradientVector { d_rho, d_phi: Vec::new() },
        adjoint: AdjointSolution { chi, partial_z_rho },
    })
}

/// Forward evaluation used by the oracle and by tests.
#[derive(Debug, Clone, PartialEq)]
pub struct FdProblem {
    pub e_applied: Vector3<f64>,
    pub c_target: Matrix3<f64>,
    pub settings: SolveSettings,
    /// Warm start for the perturbed solves.
    pub base_state: Option<MicroState>,
}

impl FdProblem {
    /// Settings for the oracle's re-solves: tighter than the defaults so that
    /// solver error stays far below the difference quotient.
    pub fn tight(e_applied: Vector3<f64>, c_target: Matrix3<f64>) -> Self {
        Self {
            e_applied,
            c_target,
            settings: SolveSettings { residual_tol: 1e-13, absolute_floor: 1e-16, ..Default::default() },
            base_state: None,
        }
    }
}

/// Solves at the applied strain and returns the objective, state and tangent.
pub fn evaluate_objective(
    model: &RveModel,
    rho: &[f64],
    problem: &FdProblem,
) -> Result<(f64, ConvergedState, EffectiveTangent)> {
    let conv = solve_warm(model, rho, problem.e_applied, problem.base_state.as_ref(), &problem.settings)?;
    let tangent = model.effective_tangent(&conv.state, &conv.factor)?;
    let (z, _) = objective_and_partial(&tangent.c_eff, &problem.c_target);
    Ok((z, conv, tangent))
}

/// Central-difference `dz/dρ_e` with a full nonlinear re-solve per
/// perturbation; one-sided within `h` of the bounds.
pub fn fd_oracle(model: &RveModel, rho: &[f64], element: usize, h: f64, problem: &FdProblem) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    if element >= model.element_count() {
        return Err(Error::invalid(format!("element {element} out of range")));
    }
    model.check_density(rho)?;
    let eval = |value: f64| -> Result<f64> {
        let mut r = rho.to_vec();
        r[element] = value;
        evaluate_objective(model, &r, problem)
            .map(|(z, _, _)| z)
            .map_err(|e| Error::OracleFailure(format!("element {element} at density {value}: {e}")))
    };
    let x = rho[element];
    let (lo, hi) = ((x - h).max(0.0), (x + h).min(1.0));
    let (lo, hi) = if hi - lo < h {
        if x < 0.5 {
            (x, x + h)
        } else {
            (x - h, x)
        }
    } else {
        (lo, hi)
    };
    Ok((eval(hi)? - eval(lo)?) / (hi - lo))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub element: usize,
    pub adjoint: f64,
    pub finite_difference: Option<f64>,
    /// `|adjoint - fd| / max_e |adjoint_e|`.
    pub relative_error: f64,
    pub passed: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub objective: f64,
    pub gradient_scale: f64,
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }

    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

/// Compares the adjoint gradient with the oracle on the given elements.
/// Errors are measured against the largest gradient magnitude, matching a
/// relative ∞-norm over the sampled set.
pub fn gradient_check(
    model: &RveModel,
    rho: &[f64],
    elements: &[usize],
    h: f64,
    tolerance: f64,
    problem: &FdProblem,
) -> Result<GradCheckReport> {
    let (objective, conv, tangent) = evaluate_objective(model, rho, problem)?;
    let grad = adjoint_gradient(model, &conv.state, rho, &problem.c_target, &conv.factor, &tangent)?;
    let d_rho = grad.gradient.d_rho;
    let scale = d_rho.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let oracle_problem = FdProblem { base_state: Some(conv.state.clone()), ..problem.clone() };
    let entries = elements
        .par_iter()
        .map(|&e| {
            if e >= model.element_count() {
                return GradCheckEntry {
                    element: e,
                    adjoint: f64::NAN,
                    finite_difference: None,
                    relative_error: f64::INFINITY,
                    passed: false,
                    failure: Some(format!("element {e} out of range")),
                };
            }
            match fd_oracle(model, rho, e, h, &oracle_problem) {
                Ok(fd) => {
                    let err = (d_rho[e] - fd).abs();
                    let rel = if scale > 0.0 { err / scale } else { err };
                    GradCheckEntry {
                        element: e,
                        adjoint: d_rho[e],
                        finite_difference: Some(fd),
                        relative_error: rel,
                        passed: rel < tolerance,
                        failure: None,
                    }
                }
                Err(err) => GradCheckEntry {
                    element: e,
                    adjoint: d_rho[e],
                    finite_difference: None,
                    relative_error: f64::INFINITY,
                    passed: false,
                    failure: Some(err.to_string()),
                },
            }
        })
        .collect();
    Ok(GradCheckReport { objective, gradient_scale: scale, tolerance, entries })
}
