//! Density regularization chain: filter, smoothed Heaviside projection and
//! symmetrization, with its exact transpose.

use crate::error::{Error, Result};
use crate::mesh::{RveMesh, SymmetryMap};

use super::filter::FilterOperator;

/// Smoothed Heaviside projection of a filtered value.
pub fn project(mu: f64, beta: f64, eta: f64) -> f64 {
    let a = (beta * eta).tanh();
    (a + (beta * (mu - eta)).tanh()) / (a + (beta * (1.0 - eta)).tanh())
}

/// `dρ/dμ` of [`project`].
pub fn project_derivative(mu: f64, beta: f64, eta: f64) -> f64 {
    let sech = 1.0 / (beta * (mu - eta)).cosh();
    beta * sech * sech / ((beta * eta).tanh() + (beta * (1.0 - eta)).tanh())
}

/// Volume-fraction constraint `Σρv/Σv − V_max` and its density gradient.
pub fn volume_constraint(rho: &[f64], mesh: &RveMesh, v_max: f64) -> (f64, Vec<f64>) {
    let vols: Vec<f64> = (0..mesh.element_count()).map(|e| mesh.element_volume(e)).collect();
    let total: f64 = vols.iter().sum();
    let used: f64 = rho.iter().zip(&vols).map(|(r, v)| r * v).sum();
    (used / total - v_max, vols.iter().map(|v| v / total).collect())
}

/// Average `4ρ(1−ρ)`; zero for a fully binary field.
pub fn non_discreteness(rho: &[f64]) -> f64 {
    rho.iter().map(|r| 4.0 * r * (1.0 - r)).sum::<f64>() / rho.len() as f64
}

/// Design variables together with the derived element fields.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignState {
    pub phi: Vec<f64>,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub beta: f64,
    pub iteration: usize,
}

/// `ρ = symmetrize(project(filter(φ)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Regularization {
    pub filter: FilterOperator,
    pub symmetry: SymmetryMap,
    pub eta: f64,
}

impl Regularization {
    pub fn new(filter: FilterOperator, symmetry: SymmetryMap, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta < 1.0) {
            return Err(Error::invalid(format!("projection threshold must lie in (0, 1), got {eta}")));
        }
        if filter.element_count() != symmetry.len() {
            return Err(Error::invalid("filter and symmetry map disagree on the element count"));
        }
        Ok(Self { filter, symmetry, eta })
    }

    pub fn variable_count(&self) -> usize {
        self.filter.variable_count()
    }

    pub fn element_count(&self) -> usize {
        self.filter.element_count()
    }

    pub fn check_phi(&self, phi: &[f64]) -> Result<()> {
        if phi.len() != self.variable_count() {
            return Err(Error::invalid(format!(
                "expected {} design variables, got {}",
                self.variable_count(),
                phi.len()
            )));
        }
        if let Some(k) = phi.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!("design variable {k} = {} outside [0, 1]", phi[k])));
        }
        Ok(())
    }

    pub fn forward(&self, phi: &[f64], beta: f64, iteration: usize) -> Result<DesignState> {
        self.check_phi(phi)?;
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("projection sharpness must be positive, got {beta}")));
        }
        let mu = self.filter.apply(phi);
        let projected: Vec<f64> = mu.iter().map(|&m| project(m, beta, self.eta).clamp(0.0, 1.0)).collect();
        Ok(DesignState { phi: phi.to_vec(), rho: self.symmetry.symmetrize(&projected), mu, beta, iteration })
    }

    /// Pulls an element-density gradient back to the design variables.
    pub fn backward(&self, design: &DesignState, d_rho: &[f64]) -> Vec<f64> {
        let gathered = self.symmetry.accumulate(d_rho);
        let d_mu: Vec<f64> =
            gathered.iter().zip(&design.mu).map(|(g, &m)| g * project_derivative(m, design.beta, self.eta)).collect();
        self.filter.apply_transpose(&d_mu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn chain(n: usize, r: f64) -> (RveMesh, Regularization) {
        let m = RveMesh::build(n, n, 1.0, 1.0, 0.3).unwrap();
        let reg =
            Regularization::new(FilterOperator::build(&m, r).unwrap(), SymmetryMap::build(&m).unwrap(), 0.5).unwrap();
        (m, reg)
    }

    #[test]
    fn projection_identities() {
        assert_eq!(project(0.5, 7.3, 0.5), 0.5);
        for beta in [0.1, 2.0, 37.0, 100.0] {
            for eta in [0.2, 0.5, 0.8] {
                assert!(project(0.0, beta, eta).abs() < 1e-15);
                assert!((project(1.0, beta, eta) - 1.0).abs() < 1e-15);
            }
        }
        assert!((project(0.6, 100.0, 0.5) - 1.0).abs() < 1e-8);
        assert!(project(0.4, 100.0, 0.5) < 1e-8);
    }

    #[test]
    fn small_sharpness_is_nearly_linear() {
        for mu in [0.1, 0.3, 0.77] {
            assert!((project(mu, 1e-4, 0.5) - mu).abs() < 1e-8);
        }
    }

    #[test]
    fn volume_constraint_values() {
        let m = RveMesh::build(10, 10, 1.0, 1.0, 0.3).unwrap();
        let (g, dg) = volume_constraint(&vec![1.0; 100], &m, 0.305);
        assert!((g - 0.695).abs() < 1e-14);
        assert!(dg.iter().all(|&d| (d - 0.01).abs() < 1e-15));
        let (g, _) = volume_constraint(&vec![0.305; 100], &m, 0.305);
        assert!(g.abs() < 1e-15);
        let (g, _) = volume_constraint(&vec![0.4; 100], &m, 0.4);
        assert!(g.abs() < 1e-15);
    }

    #[test]
    fn forward_output_is_symmetric_and_bounded() {
        let (_, reg) = chain(12, 0.2);
        let phi: Vec<f64> = (0..reg.variable_count()).map(|k| ((k * 7919) % 101) as f64 / 100.0).collect();
        let d = reg.forward(&phi, 8.0, 0).unwrap();
        assert!(reg.symmetry.is_symmetric(&d.rho));
        assert!(d.rho.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn rejects_out_of_bounds_design() {
        let (_, reg) = chain(4, 0.3);
        let mut phi = vec![0.5; reg.variable_count()];
        phi[3] = 1.2;
        assert!(reg.forward(&phi, 2.0, 0).is_err());
        assert!(reg.forward(&vec![0.5; 3], 2.0, 0).is_err());
    }

    #[test]
    fn backward_conserves_gradient_mass_at_unit_slope() {
        // With `dρ/dμ = 1` the transpose of a row-normalized filter conserves the sum.
        let (_, reg) = chain(8, 0.2);
        let d = DesignState { phi: vec![], mu: vec![0.5; 64], rho: vec![0.5; 64], beta: 2.0, iteration: 0 };
        let slope = project_derivative(0.5, 2.0, 0.5);
        let g: Vec<f64> = (0..64).map(|e| (e as f64).cos()).collect();
        let back = reg.backward(&d, &g);
        assert!((back.iter().sum::<f64>() - slope * g.iter().sum::<f64>()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn projection_derivative_matches_difference(mu in 0.01f64..0.99, beta in 0.5f64..60.0, eta in 0.2f64..0.8) {
            let h = 1e-6;
            let fd = (project(mu + h, beta, eta) - project(mu - h, beta, eta)) / (2.0 * h);
            let d = project_derivative(mu, beta, eta);
            prop_assert!((fd - d).abs() < 1e-5 * (1.0 + d.abs()));
        }

        #[test]
        fn projection_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, beta in 0.5f64..100.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(project(lo, beta, 0.5) <= project(hi, beta, 0.5));
        }

        #[test]
        fn backward_matches_finite_differences(seed in 0u64..500, k in 0usize..49) {
            let (_, reg) = chain(6, 0.3);
            let phi: Vec<f64> = (0..reg.variable_count())
                .map(|i| 0.2 + 0.6 * (((i as u64 * 7 + seed) % 13) as f64 / 12.0))
                .collect();
            let w: Vec<f64> = (0..reg.element_count()).map(|e| ((e as u64 + seed) as f64).sin()).collect();
            let objective = |p: &[f64]| -> f64 {
                let d = reg.forward(p, 5.0, 0).unwrap();
                d.rho.iter().zip(&w).map(|(r, wi)| r * r * wi).sum()
            };
            let d = reg.forward(&phi, 5.0, 0).unwrap();
            let d_rho: Vec<f64> = d.rho.iter().zip(&w).map(|(r, wi)| 2.0 * r * wi).collect();
            let grad = reg.backward(&d, &d_rho);
            let h = 1e-6;
            let mut p = phi.clone();
            p[k] += h;
            let up = objective(&p);
            p[k] -= 2.0 * h;
            let down = objective(&p);
            let fd = (up - down) / (2.0 * h);
            prop_assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + grad[k].abs()), "{fd} vs {}", grad[k]);
        }
    }
}
