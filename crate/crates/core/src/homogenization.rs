//! Periodic constraint operators, macro kinematics, residual assembly and the
//! homogenized tangent.
//!
//! Unknowns are stacked as `[u_free; λ]`, where `u_free` omits the two DOFs of
//! the pinned node. The Jacobian of the residual with respect to them is the
//! symmetric saddle-point matrix
//!
//! ```text
//! [ K/|Ω|    -α T_pᵀ ]
//! [ -α T_p      0    ]
//! ```

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{Argsort, Pair, SparseColMat, SymbolicSparseColMat};
use faer::Mat;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix4x3, MatrixXx3, Vector3};
use rayon::prelude::*;

use crate::element::{ElemMat, ElemVec, ElementGeometry, ElementModel, MaterialParams, SimpParams};
use crate::error::{Error, Result};
use crate::mesh::{build_coordinate_operator, BoundaryPairing, RveMesh};

/// `diag(1, 1, 2)`: maps tensor shear to engineering shear.
pub fn ibar() -> Matrix3<f64> {
    Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 2.0))
}

/// Symmetric-gradient collection `[[a,0,c],[0,b,c],[c,c,a+b]]`. Used for both
/// the displacement gradient and the stress.
pub fn collect_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(v[0], 0.0, v[2], 0.0, v[1], v[2], v[2], v[2], v[0] + v[1])
}

/// `T_s`: expands `[G11, G22, G12]` to `[G11, G12, G21, G22]`.
pub fn symmetry_expansion() -> Matrix4x3<f64> {
    Matrix4x3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0)
}

/// Green–Lagrange strain from the symmetric displacement gradient.
pub fn symmetric_gradient_to_strain(g_sym: &Vector3<f64>) -> Vector3<f64> {
    (ibar() + 0.5 * collect_matrix(g_sym)) * g_sym
}

/// Inverts the strain map under a rotation-free deformation: `U = sqrt(2E + I)`
/// and `G_sym = [U11 - 1, U22 - 1, U12]`.
pub fn strain_to_symmetric_gradient(e_hat: &Vector3<f64>) -> Result<Vector3<f64>> {
    if !e_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::InadmissibleStrain(format!("non-finite strain {e_hat:?}")));
    }
    let (c11, c22, c12) = (1.0 + 2.0 * e_hat[0], 1.0 + 2.0 * e_hat[1], e_hat[2]);
    let det = c11 * c22 - c12 * c12;
    let tr = c11 + c22;
    if !(det > 0.0 && tr > 0.0) {
        return Err(Error::InadmissibleStrain(format!(
            "right Cauchy-Green tensor is not positive definite for strain {:?}",
            e_hat.as_slice()
        )));
    }
    let s = det.sqrt();
    let t = (tr + 2.0 * s).sqrt();
    Ok(Vector3::new((c11 + s) / t - 1.0, (c22 + s) / t - 1.0, c12 / t))
}

/// Constant matrices defining the periodic constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct PbcOperators {
    /// Node pairs; each contributes rows `2k` (x) and `2k + 1` (y) of `T_p`
    /// with `+1` on the first node and `-1` on the second.
    pub pairs: Vec<(usize, usize)>,
    pub node_count: usize,
    pub t_x: DMatrix<f64>,
    pub t_s: Matrix4x3<f64>,
    pub alpha: f64,
    /// `T_p T_X T_s` (2m×3).
    pub p: MatrixXx3<f64>,
}

impl PbcOperators {
    pub fn new(mesh: &RveMesh, pairing: &BoundaryPairing, alpha: f64) -> Self {
        let t_x = build_coordinate_operator(mesh);
        let t_s = symmetry_expansion();
        let mut p = MatrixXx3::zeros(pairing.constraint_rows());
        for (k, &(a, b)) in pairing.pairs.iter().enumerate() {
            let dx = mesh.node_coords[a][0] - mesh.node_coords[b][0];
            let dy = mesh.node_coords[a][1] - mesh.node_coords[b][1];
            p[(2 * k, 0)] = dx;
            p[(2 * k, 2)] = dy;
            p[(2 * k + 1, 1)] = dy;
            p[(2 * k + 1, 2)] = dx;
        }
        Self { pairs: pairing.pairs.clone(), node_count: mesh.node_count(), t_x, t_s, alpha, p }
    }

    pub fn constraint_rows(&self) -> usize {
        2 * self.pairs.len()
    }

    /// `T_p u`.
    pub fn apply_tp(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.constraint_rows());
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            for i in 0..2 {
                out[2 * k + i] = u[2 * a + i] - u[2 * b + i];
            }
        }
        out
    }

    /// `T_pᵀ λ`.
    pub fn apply_tp_transpose(&self, lambda: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(2 * self.node_count);
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            for i in 0..2 {
                out[2 * a + i] += lambda[2 * k + i];
                out[2 * b + i] -= lambda[2 * k + i];
            }
        }
        out
    }

    pub fn t_p_dense(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.constraint_rows(), 2 * self.node_count);
        for (k, &(a, b)) in self.pairs.iter().enumerate() {
            for i in 0..2 {
                t[(2 * k + i, 2 * a + i)] = 1.0;
                t[(2 * k + i, 2 * b + i)] = -1.0;
            }
        }
        t
    }
}

/// Macro kinematic quantities derived from a macro strain.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroKinematics {
    pub e_hat: Vector3<f64>,
    pub g_sym: Vector3<f64>,
    pub g_bar: Matrix3<f64>,
    /// `Ī + Ḡ`, the Jacobian of the strain with respect to `G_sym`.
    pub m_bar: Matrix3<f64>,
    pub m_bar_inv: Matrix3<f64>,
    /// `T_p T_X T_s M̄⁻¹` (2m×3).
    pub z: MatrixXx3<f64>,
}

impl MacroKinematics {
    pub fn new(e_hat: Vector3<f64>, ops: &PbcOperators) -> Result<Self> {
        let g_sym = strain_to_symmetric_gradient(&e_hat)?;
        let g_bar = collect_matrix(&g_sym);
        let m_bar = ibar() + g_bar;
        let m_bar_inv = m_bar.try_inverse().ok_or(Error::InadmissibleKinematics)?;
        if !m_bar_inv.iter().all(|v| v.is_finite()) {
            return Err(Error::InadmissibleKinematics);
        }
        let z = &ops.p * m_bar_inv;
        Ok(Self { e_hat, g_sym, g_bar, m_bar, m_bar_inv, z })
    }

    /// `Ĝ = T_s G_sym` ordered `[G11, G12, G21, G22]`.
    pub fn full_gradient(&self) -> nalgebra::Vector4<f64> {
        symmetry_expansion() * self.g_sym
    }
}

/// `S_int = α Zᵀ λ`.
pub fn internal_macro_stress(lambda: &DVector<f64>, kin: &MacroKinematics, ops: &PbcOperators) -> Vector3<f64> {
    kin.z.tr_mul(lambda) * ops.alpha
}

/// `-M̄⁻¹ S̄ M̄⁻¹`: the part of the tangent from the strain dependence of `Z`.
pub fn geometric_tangent(s_int: &Vector3<f64>, kin: &MacroKinematics) -> Matrix3<f64> {
    -kin.m_bar_inv * collect_matrix(s_int) * kin.m_bar_inv
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    /// Full nodal displacements (2n); the pinned DOFs stay zero.
    pub u: DVector<f64>,
    pub lambda: DVector<f64>,
    pub kin: MacroKinematics,
    pub s_int: Vector3<f64>,
    /// Set by the solver once the residual met its tolerance.
    pub converged: bool,
}

impl MicroState {
    pub fn new(u: DVector<f64>, lambda: DVector<f64>, e_hat: Vector3<f64>, ops: &PbcOperators) -> Result<Self> {
        let kin = MacroKinematics::new(e_hat, ops)?;
        let s_int = internal_macro_stress(&lambda, &kin, ops);
        Ok(Self { u, lambda, kin, s_int, converged: false })
    }

    /// Recomputes kinematics and stress after `u`, `λ` or the strain changed.
    pub fn with_strain(mut self, e_hat: Vector3<f64>, ops: &PbcOperators) -> Result<Self> {
        self.kin = MacroKinematics::new(e_hat, ops)?;
        self.s_int = internal_macro_stress(&self.lambda, &self.kin, ops);
        self.converged = false;
        Ok(self)
    }

    pub fn refresh_stress(&mut self, ops: &PbcOperators) {
        self.s_int = internal_macro_stress(&self.lambda, &self.kin, ops);
    }

    /// `ŵ = û - T_X Ĝ`.
    pub fn fluctuation(&self, ops: &PbcOperators) -> DVector<f64> {
        &self.u - &ops.t_x * self.kin.full_gradient()
    }

    /// Largest fluctuation mismatch over all constrained pairs.
    pub fn periodicity_mismatch(&self, ops: &PbcOperators) -> f64 {
        ops.apply_tp(&self.fluctuation(ops)).amax()
    }
}

/// Residual blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    /// `f_int/|Ω| - α T_pᵀ λ` over all 2n DOFs, pinned entries zeroed.
    pub equilibrium: DVector<f64>,
    /// `-α T_p û + α T_p T_X T_s G_sym`.
    pub constraint: DVector<f64>,
    /// `S_int - S_applied`; informational under strain control.
    pub stress: Vector3<f64>,
}

impl Residual {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.equilibrium.len() + self.constraint.len() + 3);
        let (n, m) = (self.equilibrium.len(), self.constraint.len());
        v.rows_mut(0, n).copy_from(&self.equilibrium);
        v.rows_mut(n, m).copy_from(&self.constraint);
        v.rows_mut(n + m, 3).copy_from(&self.stress);
        v
    }
}

/// Homogenized tangent and the quantities it is built from.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveTangent {
    pub c_eff: Matrix3<f64>,
    pub c_s: Matrix3<f64>,
    pub s_bar: Matrix3<f64>,
    /// `-|Ω| T_p K⁻¹ T_pᵀ`; only filled by the Schur-complement route.
    pub psi: Option<DMatrix<f64>>,
    /// `Υ⁻¹ [0; α Z]` (system size × 3): the negated derivative of the
    /// unknowns `[u_free; λ]` with respect to the macro strain.
    pub strain_response: DMatrix<f64>,
}

struct SaddlePattern {
    symbolic: SymbolicSparseColMat<usize>,
    argsort: Argsort<usize>,
    lu: SymbolicLu<usize>,
}

/// LU factorization of the saddle-point Jacobian.
pub struct SaddleFactorization {
    lu: Lu<usize, f64>,
    size: usize,
}

impl std::fmt::Debug for SaddleFactorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SaddleFactorization").field("size", &self.size).finish()
    }
}

fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: &Mat<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

impl SaddleFactorization {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = to_faer(rhs);
        self.lu.solve_in_place(x.as_mut());
        check_finite(from_faer(&x))
    }

    pub fn solve_transpose(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = to_faer(rhs);
        self.lu.solve_transpose_in_place(x.as_mut());
        check_finite(from_faer(&x))
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let x = self.solve(&DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
        Ok(x.column(0).into_owned())
    }
}

fn check_finite(x: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::StructuralSingularity("linear solve produced non-finite values".into()))
    }
}

/// Design-independent discretization context shared by the solver,
/// sensitivity analysis and optimizer.
pub struct RveModel {
    pub mesh: RveMesh,
    pub pairing: BoundaryPairing,
    pub ops: PbcOperators,
    pub material: MaterialParams,
    pub simp: SimpParams,
    constitutive: Matrix3<f64>,
    geometries: Vec<ElementGeometry>,
    element_dofs: Vec<[usize; 8]>,
    /// System index of every full DOF; `None` for the pinned ones.
    free_index: Vec<Option<usize>>,
    free_dofs: Vec<usize>,
    pattern: SaddlePattern,
}

impl std::fmt::Debug for RveModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RveModel")
            .field("nx", &self.mesh.nx)
            .field("ny", &self.mesh.ny)
            .field("pairs", &self.pairing.len())
            .field("material", &self.material)
            .field("simp", &self.simp)
            .finish()
    }
}

impl RveModel {
    pub fn new(mesh: RveMesh, material: MaterialParams, simp: SimpParams) -> Result<Self> {
        material.validate()?;
        simp.validate()?;
        let pairing = BoundaryPairing::build(&mesh);
        let ops = PbcOperators::new(&mesh, &pairing, material.e0);
        let geometries = (0..mesh.element_count())
            .map(|e| ElementGeometry::new(&mesh.element_coords(e), mesh.thickness))
            .collect::<Result<Vec<_>>>()?;
        let element_dofs = mesh
            .element_connectivity
            .iter()
            .map(|nodes| {
                let mut d = [0; 8];
                for (a, &n) in nodes.iter().enumerate() {
                    d[2 * a] = 2 * n;
                    d[2 * a + 1] = 2 * n + 1;
                }
                d
            })
            .collect::<Vec<_>>();

        let mut free_index = vec![None; 2 * mesh.node_count()];
        let mut free_dofs = Vec::with_capacity(free_index.len() - 2);
        for (dof, slot) in free_index.iter_mut().enumerate() {
            if dof / 2 != mesh.pinned_node {
                *slot = Some(free_dofs.len());
                free_dofs.push(dof);
            }
        }

        let n_free = free_dofs.len();
        let size = n_free + pairing.constraint_rows();
        let indices = saddle_indices(&element_dofs, &free_index, &pairing.pairs, n_free);
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(size, size, &indices)
            .map_err(|e| Error::StructuralSingularity(format!("sparsity pattern: {e:?}")))?;
        let lu = SymbolicLu::try_new(symbolic.as_ref())
            .map_err(|e| Error::StructuralSingularity(format!("symbolic factorization: {e:?}")))?;

        Ok(Self {
            constitutive: material.constitutive(),
            mesh,
            pairing,
            ops,
            material,
            simp,
            geometries,
            element_dofs,
            free_index,
            free_dofs,
            pattern: SaddlePattern { symbolic, argsort, lu },
        })
    }

    pub fn element_count(&self) -> usize {
        self.mesh.element_count()
    }

    /// Number of nodal DOFs, 2n.
    pub fn dof_count(&self) -> usize {
        self.free_index.len()
    }

    pub fn free_count(&self) -> usize {
        self.free_dofs.len()
    }

    pub fn multiplier_count(&self) -> usize {
        self.pairing.constraint_rows()
    }

    /// Size of the saddle-point system.
    pub fn system_size(&self) -> usize {
        self.free_count() + self.multiplier_count()
    }

    pub fn volume(&self) -> f64 {
        self.mesh.volume()
    }

    pub fn element_dofs(&self, e: usize) -> &[usize; 8] {
        &self.element_dofs[e]
    }

    pub fn free_index(&self, dof: usize) -> Option<usize> {
        self.free_index[dof]
    }

    pub fn free_dofs(&self) -> &[usize] {
        &self.free_dofs
    }

    pub fn check_density(&self, rho: &[f64]) -> Result<()> {
        if rho.len() != self.element_count() {
            return Err(Error::invalid(format!(
                "density field has {} values, mesh has {} elements",
                rho.len(),
                self.element_count()
            )));
        }
        if let Some((e, r)) = rho.iter().enumerate().find(|(_, r)| !(0.0..=1.0).contains(*r)) {
            return Err(Error::invalid(format!("density {r} of element {e} outside [0, 1]")));
        }
        Ok(())
    }

    fn check_state(&self, state: &MicroState) -> Result<()> {
        if state.u.len() != self.dof_count() || state.lambda.len() != self.multiplier_count() {
            return Err(Error::invalid(format!(
                "state has {} displacements and {} multipliers, expected {} and {}",
                state.u.len(),
                state.lambda.len(),
                self.dof_count(),
                self.multiplier_count()
            )));
        }
        Ok(())
    }

    /// Element evaluator at density `rho`.
    pub fn element_model(&self, e: usize, rho: f64) -> ElementModel<'_> {
        ElementModel {
            geometry: &self.geometries[e],
            constitutive: &self.constitutive,
            scale: self.simp.interpolation(rho).0,
            frozen: self.simp.is_frozen(rho),
        }
    }

    /// Element evaluator for the density derivative of the element response.
    pub fn element_model_derivative(&self, e: usize, rho: f64) -> ElementModel<'_> {
        ElementModel { scale: self.simp.interpolation(rho).1, ..self.element_model(e, rho) }
    }

    pub fn gather(&self, v: &DVector<f64>, e: usize) -> ElemVec {
        let d = &self.element_dofs[e];
        ElemVec::from_fn(|i, _| v[d[i]])
    }

    /// Full nodal vector from system-ordered free values.
    pub fn expand_free(&self, free: &[f64]) -> DVector<f64> {
        let mut full = DVector::zeros(self.dof_count());
        for (k, &dof) in self.free_dofs.iter().enumerate() {
            full[dof] = free[k];
        }
        full
    }

    pub fn restrict_free(&self, full: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.free_count(), self.free_dofs.iter().map(|&d| full[d]))
    }

    pub fn zero_state(&self) -> MicroState {
        MicroState::new(
            DVector::zeros(self.dof_count()),
            DVector::zeros(self.multiplier_count()),
            Vector3::zeros(),
            &self.ops,
        )
        .expect("zero strain is admissible")
    }

    pub fn strain_energy(&self, rho: &[f64], u: &DVector<f64>) -> f64 {
        (0..self.element_count()).map(|e| self.element_model(e, rho[e]).energy(&self.gather(u, e))).sum()
    }

    /// Assembled internal force vector (2n).
    pub fn internal_force(&self, rho: &[f64], u: &DVector<f64>) -> DVector<f64> {
        let forces: Vec<ElemVec> = (0..self.element_count())
            .into_par_iter()
            .map(|e| self.element_model(e, rho[e]).internal_force(&self.gather(u, e)))
            .collect();
        let mut f = DVector::zeros(self.dof_count());
        for (e, fe) in forces.iter().enumerate() {
            for (i, &d) in self.element_dofs[e].iter().enumerate() {
                f[d] += fe[i];
            }
        }
        f
    }

    /// Assembled stiffness on the free DOFs as a dense matrix; for tests and
    /// small diagnostics.
    pub fn stiffness_dense(&self, rho: &[f64], u: &DVector<f64>) -> DMatrix<f64> {
        let nf = self.free_count();
        let mut k = DMatrix::zeros(nf, nf);
        for e in 0..self.element_count() {
            let ke = self.element_model(e, rho[e]).tangent(&self.gather(u, e));
            scatter_dense(&mut k, &ke, &self.element_dofs[e], &self.free_index);
        }
        k
    }

    pub fn residual(&self, state: &MicroState, rho: &[f64], applied_stress: Option<Vector3<f64>>) -> Result<Residual> {
        self.check_density(rho)?;
        self.check_state(state)?;
        let f = self.internal_force(rho, &state.u);
        Ok(self.residual_from_force(state, &f, applied_stress))
    }

    pub(crate) fn residual_from_force(
        &self,
        state: &MicroState,
        f_int: &DVector<f64>,
        applied_stress: Option<Vector3<f64>>,
    ) -> Residual {
        let alpha = self.ops.alpha;
        let mut equilibrium = f_int / self.volume() - self.ops.apply_tp_transpose(&state.lambda) * alpha;
        for (dof, slot) in self.free_index.iter().enumerate() {
            if slot.is_none() {
                equilibrium[dof] = 0.0;
            }
        }
        let constraint = (&self.ops.p * state.kin.g_sym - self.ops.apply_tp(&state.u)) * alpha;
        let stress = state.s_int - applied_stress.unwrap_or_else(Vector3::zeros);
        Residual { equilibrium, constraint, stress }
    }

    /// Residual in system ordering `[free equilibrium; constraint]`.
    pub(crate) fn system_residual(&self, r: &Residual) -> DVector<f64> {
        let nf = self.free_count();
        let mut v = DVector::zeros(self.system_size());
        for (k, &dof) in self.free_dofs.iter().enumerate() {
            v[k] = r.equilibrium[dof];
        }
        v.rows_mut(nf, self.multiplier_count()).copy_from(&r.constraint);
        v
    }

    /// Internal force and factorized Jacobian at displacement `u`.
    pub fn assemble_and_factorize(&self, rho: &[f64], u: &DVector<f64>) -> Result<(DVector<f64>, SaddleFactorization)> {
        let per_element: Vec<(ElemVec, ElemMat)> = (0..self.element_count())
            .into_par_iter()
            .map(|e| {
                let el = self.element_model(e, rho[e]);
                let ue = self.gather(u, e);
                (el.internal_force(&ue), el.tangent(&ue))
            })
            .collect();

        let mut f = DVector::zeros(self.dof_count());
        let inv_vol = 1.0 / self.volume();
        let mut values = Vec::with_capacity(per_element.len() * 64 + 4 * self.multiplier_count());
        for (e, (fe, ke)) in per_element.iter().enumerate() {
            let dofs = &self.element_dofs[e];
            for (i, &d) in dofs.iter().enumerate() {
                f[d] += fe[i];
            }
            for (j, &dj) in dofs.iter().enumerate() {
                if self.free_index[dj].is_none() {
                    continue;
                }
                for (i, &di) in dofs.iter().enumerate() {
                    if self.free_index[di].is_some() {
                        values.push(ke[(i, j)] * inv_vol);
                    }
                }
            }
        }
        let alpha = self.ops.alpha;
        for_each_constraint_entry(&self.ops.pairs, &self.free_index, |_, _, sign| {
            values.push(-alpha * sign);
            values.push(-alpha * sign);
        });

        let matrix = SparseColMat::new_from_argsort(self.pattern.symbolic.clone(), &self.pattern.argsort, &values)
            .map_err(|e| Error::StructuralSingularity(format!("assembly: {e:?}")))?;
        let lu = Lu::try_new_with_symbolic(self.pattern.lu.clone(), matrix.as_ref())
            .map_err(|e| Error::StructuralSingularity(format!("factorization: {e:?}")))?;
        Ok((f, SaddleFactorization { lu, size: self.system_size() }))
    }

    pub fn factorize(&self, rho: &[f64], state: &MicroState) -> Result<SaddleFactorization> {
        self.check_density(rho)?;
        self.check_state(state)?;
        Ok(self.assemble_and_factorize(rho, &state.u)?.1)
    }

    /// Matrix-free product of the saddle-point Jacobian at `u` with a
    /// system-ordered vector.
    pub fn apply_jacobian(&self, rho: &[f64], u: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let nf = self.free_count();
        let xu = self.expand_free(&x.as_slice()[..nf]);
        let xl = x.rows(nf, self.multiplier_count()).into_owned();
        let products: Vec<ElemVec> = (0..self.element_count())
            .into_par_iter()
            .map(|e| self.element_model(e, rho[e]).tangent(&self.gather(u, e)) * self.gather(&xu, e))
            .collect();
        let mut ku = DVector::zeros(self.dof_count());
        for (e, pe) in products.iter().enumerate() {
            for (i, &d) in self.element_dofs[e].iter().enumerate() {
                ku[d] += pe[i];
            }
        }
        let alpha = self.ops.alpha;
        let top = ku / self.volume() - self.ops.apply_tp_transpose(&xl) * alpha;
        let mut out = DVector::zeros(self.system_size());
        for (k, &dof) in self.free_dofs.iter().enumerate() {
            out[k] = top[dof];
        }
        out.rows_mut(nf, self.multiplier_count()).copy_from(&(self.ops.apply_tp(&xu) * -alpha));
        out
    }

    /// Homogenized tangent `C_s - α Zᵀ Y_λ` with `Y = Υ⁻¹ [0; α Z]`.
    pub fn effective_tangent(&self, state: &MicroState, factor: &SaddleFactorization) -> Result<EffectiveTangent> {
        self.check_state(state)?;
        let nf = self.free_count();
        let alpha = self.ops.alpha;
        let mut rhs = DMatrix::zeros(self.system_size(), 3);
        rhs.rows_mut(nf, self.multiplier_count()).copy_from(&(&state.kin.z * alpha));
        let y = factor.solve(&rhs)?;
        let y_lambda = y.rows(nf, self.multiplier_count());
        let coupling = state.kin.z.tr_mul(&y_lambda) * alpha;
        let c_s = geometric_tangent(&state.s_int, &state.kin);
        let c_eff = c_s - Matrix3::from_iterator(coupling.iter().copied());
        Ok(EffectiveTangent { c_eff, c_s, s_bar: collect_matrix(&state.s_int), psi: None, strain_response: y })
    }

    /// Tangent through the explicit Schur complement
    /// `Ψ = -|Ω| T_p K⁻¹ T_pᵀ`, `C_eff = C_s - Zᵀ Ψ⁻¹ Z`.
    ///
    /// Needs a nonsingular free-DOF stiffness, which the rigid rotation about
    /// the pinned node rules out in the stress-free state.
    pub fn schur_tangent(&self, state: &MicroState, rho: &[f64]) -> Result<EffectiveTangent> {
        self.check_density(rho)?;
        self.check_state(state)?;
        let nf = self.free_count();
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for e in 0..self.element_count() {
            let ke = self.element_model(e, rho[e]).tangent(&self.gather(&state.u, e));
            let dofs = &self.element_dofs[e];
            for (j, &dj) in dofs.iter().enumerate() {
                let Some(cj) = self.free_index[dj] else { continue };
                for (i, &di) in dofs.iter().enumerate() {
                    if let Some(ri) = self.free_index[di] {
                        indices.push(Pair::new(ri, cj));
                        values.push(ke[(i, j)]);
                    }
                }
            }
        }
        let (symbolic, argsort) = SymbolicSparseColMat::try_new_from_indices(nf, nf, &indices)
            .map_err(|e| Error::StructuralSingularity(format!("{e:?}")))?;
        let k = SparseColMat::new_from_argsort(symbolic, &argsort, &values)
            .map_err(|e| Error::StructuralSingularity(format!("{e:?}")))?;
        let lu = k.sp_lu().map_err(|e| Error::StructuralSingularity(format!("stiffness factorization: {e:?}")))?;

        let m2 = self.multiplier_count();
        let mut tpt = Mat::<f64>::zeros(nf, m2);
        for (k, &(a, b)) in self.ops.pairs.iter().enumerate() {
            for i in 0..2 {
                if let Some(r) = self.free_index[2 * a + i] {
                    tpt[(r, 2 * k + i)] += 1.0;
                }
                if let Some(r) = self.free_index[2 * b + i] {
                    tpt[(r, 2 * k + i)] -= 1.0;
                }
            }
        }
        let mut x = tpt.clone();
        lu.solve_in_place(x.as_mut());
        let psi_f = tpt.transpose() * &x * (-self.volume());
        let psi = from_faer(&psi_f);
        if !psi.iter().all(|v| v.is_finite()) {
            return Err(Error::StructuralSingularity("stiffness is singular".into()));
        }
        let psi_lu = psi.clone().lu();
        let w = psi_lu.solve(&state.kin.z).ok_or_else(|| Error::RankDeficiency("Schur matrix is singular".into()))?;
        let coupling = state.kin.z.tr_mul(&w);
        let c_s = geometric_tangent(&state.s_int, &state.kin);
        Ok(EffectiveTangent {
            c_eff: c_s - Matrix3::from_iterator(coupling.iter().copied()),
            c_s,
            s_bar: collect_matrix(&state.s_int),
            psi: Some(psi),
            strain_response: DMatrix::zeros(0, 3),
        })
    }
}

fn scatter_dense(k: &mut DMatrix<f64>, ke: &ElemMat, dofs: &[usize; 8], free_index: &[Option<usize>]) {
    for (j, &dj) in dofs.iter().enumerate() {
        let Some(cj) = free_index[dj] else { continue };
        for (i, &di) in dofs.iter().enumerate() {
            if let Some(ri) = free_index[di] {
                k[(ri, cj)] += ke[(i, j)];
            }
        }
    }
}

/// Visits the `T_p` entries on free DOFs as `(row, free column, sign)`.
fn for_each_constraint_entry(
    pairs: &[(usize, usize)],
    free_index: &[Option<usize>],
    mut f: impl FnMut(usize, usize, f64),
) {
    for (k, &(a, b)) in pairs.iter().enumerate() {
        for i in 0..2 {
            if let Some(c) = free_index[2 * a + i] {
                f(2 * k + i, c, 1.0);
            }
            if let Some(c) = free_index[2 * b + i] {
                f(2 * k + i, c, -1.0);
            }
        }
    }
}

/// Index list in the exact order values are produced during assembly.
fn saddle_indices(
    element_dofs: &[[usize; 8]],
    free_index: &[Option<usize>],
    pairs: &[(usize, usize)],
    n_free: usize,
) -> Vec<Pair<usize, usize>> {
    let mut idx = Vec::with_capacity(element_dofs.len() * 64 + 8 * pairs.len());
    for dofs in element_dofs {
        for &dj in dofs {
            let Some(cj) = free_index[dj] else { continue };
            for &di in dofs {
                if let Some(ri) = free_index[di] {
                    idx.push(Pair::new(ri, cj));
                }
            }
        }
    }
    for_each_constraint_entry(pairs, free_index, |row, col, _| {
        idx.push(Pair::new(n_free + row, col));
        idx.push(Pair::new(col, n_free + row));
    });
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model(n: usize) -> RveModel {
        let mesh = RveMesh::build(n, n, 1.0, 1.0, 0.3).unwrap();
        RveModel::new(mesh, MaterialParams::default(), SimpParams::default()).unwrap()
    }

    #[test]
    fn symmetric_gradient_examples() {
        assert_eq!(strain_to_symmetric_gradient(&Vector3::zeros()).unwrap(), Vector3::zeros());
        let g = strain_to_symmetric_gradient(&Vector3::new(0.22, 0.0, 0.0)).unwrap();
        assert!((g - Vector3::new(0.2, 0.0, 0.0)).amax() < 1e-15);
        let e = Vector3::new(0.0, 0.0, 0.2);
        let g = strain_to_symmetric_gradient(&e).unwrap();
        assert!(g[2] != 0.0);
        assert!((symmetric_gradient_to_strain(&g) - e).amax() < 1e-15);
    }

    #[test]
    fn symmetric_gradient_matches_eigen_square_root() {
        let e = Vector3::new(0.05, -0.1, 0.3);
        let c = nalgebra::Matrix2::new(1.0 + 2.0 * e[0], e[2], e[2], 1.0 + 2.0 * e[1]);
        let eig = c.symmetric_eigen();
        let sqrt = eig.eigenvectors
            * nalgebra::Matrix2::from_diagonal(&eig.eigenvalues.map(f64::sqrt))
            * eig.eigenvectors.transpose();
        let g = strain_to_symmetric_gradient(&e).unwrap();
        assert!((g[0] - (sqrt[(0, 0)] - 1.0)).abs() < 1e-14);
        assert!((g[1] - (sqrt[(1, 1)] - 1.0)).abs() < 1e-14);
        assert!((g[2] - sqrt[(0, 1)]).abs() < 1e-14);
    }

    #[test]
    fn inadmissible_strain_rejected() {
        assert!(matches!(
            strain_to_symmetric_gradient(&Vector3::new(-0.5, 0.0, 0.0)),
            Err(Error::InadmissibleStrain(_))
        ));
        assert!(strain_to_symmetric_gradient(&Vector3::new(-0.6, 0.1, 0.0)).is_err());
        assert!(strain_to_symmetric_gradient(&Vector3::new(0.0, 0.0, 1.5)).is_err());
    }

    #[test]
    fn expansion_and_collection_patterns() {
        let ts = symmetry_expansion();
        assert_eq!(ts * Vector3::new(1.0, 2.0, 3.0), nalgebra::Vector4::new(1.0, 3.0, 3.0, 2.0));
        let g = collect_matrix(&Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(g, Matrix3::new(1.0, 0.0, 3.0, 0.0, 2.0, 3.0, 3.0, 3.0, 3.0));
    }

    #[test]
    fn tp_rows_and_combined_operator() {
        let m = model(3);
        let tp = m.ops.t_p_dense();
        for row in tp.row_iter() {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v == -1.0).count(), 1);
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 2);
        }
        let ts = DMatrix::from_iterator(4, 3, symmetry_expansion().iter().copied());
        let p = &tp * &m.ops.t_x * ts;
        assert!((p - &m.ops.p).amax() < 1e-15);
        assert_eq!(tp.rank(1e-10), m.multiplier_count());
    }

    #[test]
    fn z_at_rest_halves_shear_column() {
        let m = model(2);
        let kin = MacroKinematics::new(Vector3::zeros(), &m.ops).unwrap();
        assert_eq!(kin.m_bar, ibar());
        for i in 0..kin.z.nrows() {
            assert_eq!(kin.z[(i, 0)], m.ops.p[(i, 0)]);
            assert_eq!(kin.z[(i, 1)], m.ops.p[(i, 1)]);
            assert_eq!(kin.z[(i, 2)], 0.5 * m.ops.p[(i, 2)]);
        }
        let lam = DVector::zeros(m.multiplier_count());
        assert_eq!(internal_macro_stress(&lam, &kin, &m.ops), Vector3::zeros());
    }

    #[test]
    fn m_bar_is_strain_jacobian() {
        let g = Vector3::new(0.1, -0.05, 0.07);
        let m = ibar() + collect_matrix(&g);
        let h = 1e-7;
        for k in 0..3 {
            let mut gp = g;
            let mut gm = g;
            gp[k] += h;
            gm[k] -= h;
            let col = (symmetric_gradient_to_strain(&gp) - symmetric_gradient_to_strain(&gm)) / (2.0 * h);
            assert!((col - m.column(k)).amax() < 1e-9);
        }
    }

    #[test]
    fn residual_at_rest_vanishes() {
        let m = model(3);
        let rho = vec![1.0; 9];
        let r = m.residual(&m.zero_state(), &rho, None).unwrap();
        assert_eq!(r.to_vector().amax(), 0.0);
        assert_eq!(r.to_vector().len(), m.dof_count() + m.multiplier_count() + 3);
    }

    #[test]
    fn residual_with_unmatched_strain() {
        let m = model(3);
        let rho = vec![0.7; 9];
        let state = m.zero_state().with_strain(Vector3::new(0.0, 0.1, 0.0), &m.ops).unwrap();
        let r = m.residual(&state, &rho, None).unwrap();
        assert_eq!(r.equilibrium.amax(), 0.0);
        assert_eq!(r.stress, Vector3::zeros());
        let expected = &m.ops.p * state.kin.g_sym * m.ops.alpha;
        assert!((r.constraint - expected).amax() < 1e-15);
        assert!(m.residual(&state, &rho[..4], None).is_err());
    }

    #[test]
    fn saddle_matrix_matches_dense_assembly() {
        let m = model(3);
        let rho: Vec<f64> = (0..9).map(|e| 0.2 + 0.08 * e as f64).collect();
        let u = DVector::from_fn(m.dof_count(), |i, _| 0.01 * ((i * 7 % 5) as f64 - 2.0));
        let u = {
            let mut u = u;
            let p = m.mesh.pinned_node;
            u[2 * p] = 0.0;
            u[2 * p + 1] = 0.0;
            u
        };
        let (_, factor) = m.assemble_and_factorize(&rho, &u).unwrap();
        let nf = m.free_count();
        let k = m.stiffness_dense(&rho, &u) / m.volume();
        let tp = m.ops.t_p_dense();
        let mut ups = DMatrix::zeros(m.system_size(), m.system_size());
        ups.view_mut((0, 0), (nf, nf)).copy_from(&k);
        for (c, &dof) in m.free_dofs().iter().enumerate() {
            for r in 0..m.multiplier_count() {
                ups[(nf + r, c)] = -m.ops.alpha * tp[(r, dof)];
                ups[(c, nf + r)] = -m.ops.alpha * tp[(r, dof)];
            }
        }
        let rhs = DMatrix::from_fn(m.system_size(), 2, |i, j| ((i + 3 * j) % 7) as f64 - 3.0);
        let x = factor.solve(&rhs).unwrap();
        assert!((&ups * &x - &rhs).amax() < 1e-10 * rhs.amax());
        let xt = factor.solve_transpose(&rhs).unwrap();
        assert!((ups.transpose() * xt - rhs).amax() < 1e-10);
    }

    fn solve(m: &RveModel, rho: &[f64], e: Vector3<f64>) -> (MicroState, EffectiveTangent) {
        let path = crate::solver::solve_path(m, rho, e, 0, &crate::solver::SolveSettings::default()).unwrap();
        let t = m.effective_tangent(&path.final_state, &path.factor).unwrap();
        (path.final_state, t)
    }

    fn random_rho(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n * n).map(|_| rng.gen_range(0.3..1.0)).collect()
    }

    #[test]
    fn solid_cell_recovers_base_material() {
        let m = model(4);
        let (state, t) = solve(&m, &[1.0; 16], Vector3::new(0.0, 1e-6, 0.0));
        let c = m.material.constitutive();
        assert!((t.c_eff - c).amax() <= 1e-6 * c.amax());
        assert!(state.periodicity_mismatch(&m.ops) < 1e-9);
        let s = c * Vector3::new(0.0, 1e-6, 0.0);
        assert!((state.s_int - s).amax() <= 1e-4 * s.amax());
    }

    #[test]
    fn geometric_part_vanishes_without_stress() {
        let m = model(2);
        let kin = MacroKinematics::new(Vector3::new(0.1, 0.05, 0.02), &m.ops).unwrap();
        assert_eq!(geometric_tangent(&Vector3::zeros(), &kin), Matrix3::zeros());
    }

    #[test]
    fn tangent_matches_stress_finite_differences() {
        let m = model(4);
        let rho = random_rho(4, 5);
        let e = Vector3::new(0.01, 0.1, 0.02);
        let (state, t) = solve(&m, &rho, e);
        assert!((t.c_eff - t.c_eff.transpose()).amax() <= 1e-8 * t.c_eff.amax());
        let settings = crate::solver::SolveSettings { absolute_floor: 1e-15, ..Default::default() };
        let h = 1e-6;
        for k in 0..3 {
            let mut ep = e;
            let mut em = e;
            ep[k] += h;
            em[k] -= h;
            let sp = crate::solver::newton_solve_at_strain(&m, &state, ep, &rho, &settings).unwrap().state.s_int;
            let sm = crate::solver::newton_solve_at_strain(&m, &state, em, &rho, &settings).unwrap().state.s_int;
            let col = (sp - sm) / (2.0 * h);
            assert!((col - t.c_eff.column(k)).amax() <= 1e-4 * t.c_eff.amax(), "column {k}");
        }
    }

    #[test]
    fn schur_route_agrees_at_finite_strain() {
        let m = model(4);
        let rho = random_rho(4, 9);
        let (state, t) = solve(&m, &rho, Vector3::new(0.0, 0.1, 0.0));
        let schur = m.schur_tangent(&state, &rho).unwrap();
        assert!((schur.c_eff - t.c_eff).amax() <= 1e-8 * t.c_eff.amax());
        let psi = schur.psi.unwrap();
        assert_eq!(psi.nrows(), m.multiplier_count());
        assert!((&psi - psi.transpose()).amax() <= 1e-10 * psi.amax());
    }

    #[test]
    fn tangent_scales_with_modulus() {
        let mesh = RveMesh::build(3, 3, 1.0, 1.0, 0.3).unwrap();
        let rho = random_rho(3, 2);
        let e = Vector3::new(0.0, 0.08, 0.0);
        let m1 = RveModel::new(mesh.clone(), MaterialParams::default(), SimpParams::default()).unwrap();
        let m2 = RveModel::new(mesh, MaterialParams { e0: 3.0, nu: 0.3 }, SimpParams::default()).unwrap();
        let (_, t1) = solve(&m1, &rho, e);
        let (_, t2) = solve(&m2, &rho, e);
        assert!((t2.c_eff - t1.c_eff * 3.0).amax() <= 1e-10 * t2.c_eff.amax());
    }

    #[test]
    fn pinned_node_choice_does_not_matter() {
        let mesh = RveMesh::build(4, 4, 1.0, 1.0, 0.3).unwrap();
        let rho = random_rho(4, 4);
        let e = Vector3::new(0.02, 0.1, 0.0);
        let a = RveModel::new(mesh.clone(), MaterialParams::default(), SimpParams::default()).unwrap();
        let b =
            RveModel::new(mesh.with_pinned_node(6).unwrap(), MaterialParams::default(), SimpParams::default()).unwrap();
        let (sa, ta) = solve(&a, &rho, e);
        let (sb, tb) = solve(&b, &rho, e);
        assert!((sa.s_int - sb.s_int).amax() <= 1e-10 * sa.s_int.amax());
        assert!((ta.c_eff - tb.c_eff).amax() <= 1e-8 * ta.c_eff.amax());
    }

    proptest! {
        #[test]
        fn strain_round_trip(e11 in -0.3f64..0.5, e22 in -0.3f64..0.5, g12 in -0.4f64..0.4) {
            let e = Vector3::new(e11, e22, g12);
            if let Ok(g) = strain_to_symmetric_gradient(&e) {
                prop_assert!((symmetric_gradient_to_strain(&g) - e).amax() < 1e-12);
            }
        }
    }
}
