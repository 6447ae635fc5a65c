//! Bilinear total-Lagrangian quadrilateral with a Saint Venant–Kirchhoff
//! plane-stress material.
//!
//! Element DOFs are ordered `[u0x, u0y, u1x, u1y, ...]`. Voigt strains carry
//! engineering shear `[E11, E22, 2E12]`, stresses plain `[S11, S22, S12]`.

use nalgebra::{Matrix2, Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};

pub type ElemVec = SVector<f64, 8>;
pub type ElemMat = SMatrix<f64, 8, 8>;
type BMat = SMatrix<f64, 3, 8>;
type ShapeGrad = SMatrix<f64, 4, 2>;

const GAUSS: f64 = 0.577_350_269_189_625_8;
/// 2×2 Gauss points in parametric coordinates, unit weights.
pub const GAUSS_POINTS: [[f64; 2]; 4] = [[-GAUSS, -GAUSS], [GAUSS, -GAUSS], [GAUSS, GAUSS], [-GAUSS, GAUSS]];
const NODE_XI: [[f64; 2]; 4] = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialParams {
    pub e0: f64,
    pub nu: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self { e0: 1.0, nu: 0.3 }
    }
}

impl MaterialParams {
    pub fn new(e0: f64, nu: f64) -> Result<Self> {
        let m = Self { e0, nu };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.e0 > 0.0 && self.e0.is_finite()) {
            return Err(Error::invalid(format!("Young's modulus must be positive, got {}", self.e0)));
        }
        if !(self.nu > -1.0 && self.nu < 0.5) {
            return Err(Error::invalid(format!("Poisson ratio must lie in (-1, 0.5), got {}", self.nu)));
        }
        Ok(())
    }

    /// Plane-stress constitutive matrix of the solid base material.
    pub fn constitutive(&self) -> Matrix3<f64> {
        plane_stress_matrix(self.e0, self.nu)
    }
}

/// `E/(1-ν²) [[1,ν,0],[ν,1,0],[0,0,(1-ν)/2]]`.
pub fn plane_stress_matrix(e: f64, nu: f64) -> Matrix3<f64> {
    let k = e / (1.0 - nu * nu);
    Matrix3::new(k, k * nu, 0.0, k * nu, k, 0.0, 0.0, 0.0, k * 0.5 * (1.0 - nu))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpParams {
    pub penalty: f64,
    pub rho_min: f64,
    /// Elements below this density use small-strain kinematics.
    pub rho_void: f64,
}

impl Default for SimpParams {
    fn default() -> Self {
        Self { penalty: 3.0, rho_min: 1e-4, rho_void: 0.01 }
    }
}

impl SimpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty >= 1.0) {
            return Err(Error::invalid(format!("SIMP penalty must be >= 1, got {}", self.penalty)));
        }
        if !(self.rho_min > 0.0 && self.rho_min < 1.0) {
            return Err(Error::invalid(format!("rho_min must lie in (0, 1), got {}", self.rho_min)));
        }
        if !(self.rho_void >= 0.0 && self.rho_void < 1.0) {
            return Err(Error::invalid(format!("rho_void must lie in [0, 1), got {}", self.rho_void)));
        }
        Ok(())
    }

    pub fn is_frozen(&self, rho: f64) -> bool {
        rho < self.rho_void
    }

    /// Relative stiffness `E^e/E0` and its density derivative.
    pub fn interpolation(&self, rho: f64) -> (f64, f64) {
        let p = self.penalty;
        let s = self.rho_min + rho.powf(p) * (1.0 - self.rho_min);
        let ds = if rho == 0.0 && p > 1.0 { 0.0 } else { p * rho.powf(p - 1.0) * (1.0 - self.rho_min) };
        (s, ds)
    }
}

/// Penalized modulus `E^e` and `dE^e/dρ`.
pub fn simp_modulus(rho: f64, mat: &MaterialParams, simp: &SimpParams) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("density {rho} outside [0, 1]")));
    }
    let (s, ds) = simp.interpolation(rho);
    Ok((s * mat.e0, ds * mat.e0))
}

/// Kinematic and stress state at one quadrature point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElementQuadState {
    pub deformation_gradient: Matrix2<f64>,
    pub green_lagrange: Matrix2<f64>,
    pub pk2_stress: Matrix2<f64>,
}

fn shape_derivatives_parametric(xi: [f64; 2]) -> ShapeGrad {
    let mut d = ShapeGrad::zeros();
    for (a, n) in NODE_XI.iter().enumerate() {
        d[(a, 0)] = 0.25 * n[0] * (1.0 + n[1] * xi[1]);
        d[(a, 1)] = 0.25 * n[1] * (1.0 + n[0] * xi[0]);
    }
    d
}

/// Reference shape-function gradients and Jacobian determinant at `xi`.
fn shape_gradients(coords: &[[f64; 2]; 4], xi: [f64; 2]) -> Result<(ShapeGrad, f64)> {
    let dxi = shape_derivatives_parametric(xi);
    let mut jac = Matrix2::zeros();
    for a in 0..4 {
        for k in 0..2 {
            for j in 0..2 {
                jac[(k, j)] += coords[a][k] * dxi[(a, j)];
            }
        }
    }
    let det = jac.determinant();
    if !(det > 0.0) {
        return Err(Error::DegenerateElement { det_j: det });
    }
    let inv = jac.try_inverse().ok_or(Error::DegenerateElement { det_j: det })?;
    Ok((dxi * inv, det))
}

/// `H_iK = Σ_a u_ai ∂N_a/∂X_K`.
fn gradient(dn: &ShapeGrad, u: &ElemVec) -> Matrix2<f64> {
    let mut h = Matrix2::zeros();
    for a in 0..4 {
        for i in 0..2 {
            for k in 0..2 {
                h[(i, k)] += u[2 * a + i] * dn[(a, k)];
            }
        }
    }
    h
}

/// Strain-displacement operator evaluated with `f` in place of the
/// deformation gradient. With `f = F` this is the nonlinear `B`, with
/// `f = I` the small-strain one, and with `f = ∇v` the derivative of `B`
/// in direction `v`.
fn b_operator(dn: &ShapeGrad, f: &Matrix2<f64>) -> BMat {
    let mut b = BMat::zeros();
    for a in 0..4 {
        let (nx, ny) = (dn[(a, 0)], dn[(a, 1)]);
        for i in 0..2 {
            let c = 2 * a + i;
            b[(0, c)] = f[(i, 0)] * nx;
            b[(1, c)] = f[(i, 1)] * ny;
            b[(2, c)] = f[(i, 0)] * ny + f[(i, 1)] * nx;
        }
    }
    b
}

fn voigt_strain(e: &Matrix2<f64>) -> Vector3<f64> {
    Vector3::new(e[(0, 0)], e[(1, 1)], 2.0 * e[(0, 1)])
}

fn tensor_stress(s: &Vector3<f64>) -> Matrix2<f64> {
    Matrix2::new(s[0], s[2], s[2], s[1])
}

/// `[A11, A22, A12 + A21]` for `A = aᵀ b`: the second variation of the
/// Green–Lagrange strain in directions with gradients `a`, `b`.
fn second_variation(a: &Matrix2<f64>, b: &Matrix2<f64>) -> Vector3<f64> {
    let m = a.transpose() * b;
    Vector3::new(m[(0, 0)], m[(1, 1)], m[(0, 1)] + m[(1, 0)])
}

/// Precomputed quadrature data of one element in its reference configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementGeometry {
    pub shape_grads: [ShapeGrad; 4],
    /// Quadrature weight times Jacobian determinant times thickness.
    pub weights: [f64; 4],
}

impl ElementGeometry {
    pub fn new(coords: &[[f64; 2]; 4], thickness: f64) -> Result<Self> {
        let mut shape_grads = [ShapeGrad::zeros(); 4];
        let mut weights = [0.0; 4];
        for (g, &xi) in GAUSS_POINTS.iter().enumerate() {
            let (dn, det) = shape_gradients(coords, xi)?;
            shape_grads[g] = dn;
            weights[g] = det * thickness;
        }
        Ok(Self { shape_grads, weights })
    }

    pub fn volume(&self) -> f64 {
        self.weights.iter().sum()
    }
}

/// Kinematics and stress at an arbitrary parametric point of the element,
/// for the unpenalized base material.
pub fn element_kinematics(
    node_x: &[[f64; 2]; 4],
    node_u: &ElemVec,
    gauss_pt: [f64; 2],
    mat: &MaterialParams,
) -> Result<ElementQuadState> {
    let (dn, _) = shape_gradients(node_x, gauss_pt)?;
    Ok(quad_state(&dn, node_u, &mat.constitutive()))
}

fn quad_state(dn: &ShapeGrad, u: &ElemVec, c: &Matrix3<f64>) -> ElementQuadState {
    let f = Matrix2::identity() + gradient(dn, u);
    let e = 0.5 * (f.transpose() * f - Matrix2::identity());
    let s = tensor_stress(&(c * voigt_strain(&e)));
    ElementQuadState { deformation_gradient: f, green_lagrange: e, pk2_stress: s }
}

/// Element response evaluator for one density value.
///
/// `scale` multiplies the base constitutive matrix; callers pass `E^e/E0`
/// for the response or `dE^e/dρ / E0` for its density derivative.
#[derive(Debug, Clone, Copy)]
pub struct ElementModel<'a> {
    pub geometry: &'a ElementGeometry,
    pub constitutive: &'a Matrix3<f64>,
    pub scale: f64,
    pub frozen: bool,
}

impl<'a> ElementModel<'a> {
    /// Gradient used inside `B` and Green–Lagrange strain at one point.
    fn point(&self, g: usize, u: &ElemVec) -> (Matrix2<f64>, Vector3<f64>) {
        let dn = &self.geometry.shape_grads[g];
        if self.frozen {
            let b = b_operator(dn, &Matrix2::identity());
            (Matrix2::identity(), b * u)
        } else {
            let f = Matrix2::identity() + gradient(dn, u);
            let e = 0.5 * (f.transpose() * f - Matrix2::identity());
            (f, voigt_strain(&e))
        }
    }

    /// Stored strain energy.
    pub fn energy(&self, u: &ElemVec) -> f64 {
        let mut w = 0.0;
        for g in 0..4 {
            let (_, e) = self.point(g, u);
            w += 0.5 * e.dot(&(self.constitutive * e)) * self.geometry.weights[g];
        }
        self.scale * w
    }

    pub fn internal_force(&self, u: &ElemVec) -> ElemVec {
        let mut f_int = ElemVec::zeros();
        for g in 0..4 {
            let (f, e) = self.point(g, u);
            let b = b_operator(&self.geometry.shape_grads[g], &f);
            f_int += b.transpose() * (self.constitutive * e) * self.geometry.weights[g];
        }
        self.scale * f_int
    }

    pub fn tangent(&self, u: &ElemVec) -> ElemMat {
        let mut k = ElemMat::zeros();
        for g in 0..4 {
            let dn = &self.geometry.shape_grads[g];
            let dv = self.geometry.weights[g];
            let (f, e) = self.point(g, u);
            let b = b_operator(dn, &f);
            k += b.transpose() * self.constitutive * b * dv;
            if !self.frozen {
                let s = tensor_stress(&(self.constitutive * e));
                let geo = dn * s * dn.transpose();
                for a in 0..4 {
                    for c in 0..4 {
                        let kab = geo[(a, c)] * dv;
                        k[(2 * a, 2 * c)] += kab;
                        k[(2 * a + 1, 2 * c + 1)] += kab;
                    }
                }
            }
        }
        self.scale * k
    }

    /// Entry `p` is `vᵀ (∂K/∂u_p) w`.
    pub fn tangent_directional(&self, u: &ElemVec, v: &ElemVec, w: &ElemVec) -> ElemVec {
        let mut out = ElemVec::zeros();
        if self.frozen {
            return out;
        }
        for g in 0..4 {
            let dn = &self.geometry.shape_grads[g];
            let (f, _) = self.point(g, u);
            let b = b_operator(dn, &f);
            let hv = gradient(dn, v);
            let hw = gradient(dn, w);
            let bv = b_operator(dn, &hv);
            let bw = b_operator(dn, &hw);
            let c = self.constitutive;
            let term = bv.transpose() * (c * (b * w))
                + bw.transpose() * (c * (b * v))
                + b.transpose() * (c * second_variation(&hv, &hw));
            out += term * self.geometry.weights[g];
        }
        self.scale * out
    }
}
