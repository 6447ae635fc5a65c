//! Linear cone filter from nodal design variables to element values.

use crate::error::{Error, Result};
use crate::mesh::RveMesh;

/// Sparse row-normalized weights mapping nodal variables to element values.
///
/// Row `e` holds every node within `r_min` of the element center with weight
/// proportional to `r_min - distance`. The neighborhood does not wrap across
/// the periodic boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOperator {
    pub r_min: f64,
    node_count: usize,
    row_start: Vec<usize>,
    neighbors: Vec<usize>,
    weights: Vec<f64>,
}

impl FilterOperator {
    pub fn build(mesh: &RveMesh, r_min: f64) -> Result<Self> {
        if !(r_min > 0.0 && r_min.is_finite()) {
            return Err(Error::invalid(format!("filter radius must be positive, got {r_min}")));
        }
        let dx = mesh.l1 / mesh.nx as f64;
        let dy = mesh.l2 / mesh.ny as f64;
        let mut row_start = Vec::with_capacity(mesh.element_count() + 1);
        let mut neighbors = Vec::new();
        let mut weights = Vec::new();
        row_start.push(0);
        for e in 0..mesh.element_count() {
            let [cx, cy] = mesh.element_center(e);
            let i0 = ((cx - r_min) / dx).floor().max(0.0) as usize;
            let i1 = (((cx + r_min) / dx).ceil() as usize).min(mesh.nx);
            let j0 = ((cy - r_min) / dy).floor().max(0.0) as usize;
            let j1 = (((cy + r_min) / dy).ceil() as usize).min(mesh.ny);
            let first = neighbors.len();
            let mut total = 0.0;
            for j in j0..=j1 {
                for i in i0..=i1 {
                    let node = mesh.node_id(i, j);
                    let [x, y] = mesh.node_coords[node];
                    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                    if d < r_min {
                        let w = (r_min - d) / r_min;
                        neighbors.push(node);
                        weights.push(w);
                        total += w;
                    }
                }
            }
            if neighbors.len() == first {
                return Err(Error::invalid(format!(
                    "filter radius {r_min} leaves element {e} without neighbors; it must exceed the \
                     center-to-corner distance {:.6}",
                    0.5 * (dx * dx + dy * dy).sqrt()
                )));
            }
            for w in &mut weights[first..] {
                *w /= total;
            }
            row_start.push(neighbors.len());
        }
        Ok(Self { r_min, node_count: mesh.node_count(), row_start, neighbors, weights })
    }

    pub fn element_count(&self) -> usize {
        self.row_start.len() - 1
    }

    pub fn variable_count(&self) -> usize {
        self.node_count
    }

    /// Neighbor node ids and normalized weights of element `e`.
    pub fn row(&self, e: usize) -> (&[usize], &[f64]) {
        let r = self.row_start[e]..self.row_start[e + 1];
        (&self.neighbors[r.clone()], &self.weights[r])
    }

    pub fn apply(&self, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.node_count, "design vector length");
        (0..self.element_count())
            .map(|e| {
                let (n, w) = self.row(e);
                n.iter().zip(w).map(|(&k, &wk)| wk * phi[k]).sum()
            })
            .collect()
    }

    pub fn apply_transpose(&self, element_values: &[f64]) -> Vec<f64> {
        assert_eq!(element_values.len(), self.element_count(), "element vector length");
        let mut out = vec![0.0; self.node_count];
        for (e, &v) in element_values.iter().enumerate() {
            let (n, w) = self.row(e);
            for (&k, &wk) in n.iter().zip(w) {
                out[k] += wk * v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mesh(n: usize) -> RveMesh {
        RveMesh::build(n, n, 1.0, 1.0, 0.3).unwrap()
    }

    #[test]
    fn constant_field_is_preserved() {
        let m = mesh(20);
        let f = FilterOperator::build(&m, 0.0875).unwrap();
        let mu = f.apply(&vec![0.37; m.node_count()]);
        for v in mu {
            assert!((v - 0.37).abs() < 1e-15);
        }
    }

    #[test]
    fn small_radius_averages_own_nodes() {
        let m = mesh(10);
        // Corner distance is 0.0707, element size 0.1.
        let f = FilterOperator::build(&m, 0.09).unwrap();
        let phi: Vec<f64> = (0..m.node_count()).map(|k| (k as f64 * 0.37).sin().abs()).collect();
        let mu = f.apply(&phi);
        for e in 0..m.element_count() {
            let avg: f64 = m.element_connectivity[e].iter().map(|&k| phi[k]).sum::<f64>() / 4.0;
            assert!((mu[e] - avg).abs() < 1e-14);
        }
    }

    #[test]
    fn radius_below_corner_distance_is_rejected() {
        let m = mesh(10);
        assert!(matches!(FilterOperator::build(&m, 0.07), Err(Error::InvalidArgument(_))));
        assert!(FilterOperator::build(&m, 0.0).is_err());
    }

    #[test]
    fn table_radius_spans_several_elements() {
        let m = mesh(100);
        let f = FilterOperator::build(&m, 0.0875).unwrap();
        let center = m.element_id(50, 50);
        let (n, _) = f.row(center);
        // Nodes strictly inside a disc of radius 8.75 element widths.
        let expected = (0..=100)
            .flat_map(|j| (0..=100).map(move |i| (i, j)))
            .filter(|&(i, j)| {
                let dx = i as f64 - 50.5;
                let dy = j as f64 - 50.5;
                (dx * dx + dy * dy).sqrt() < 8.75
            })
            .count();
        assert_eq!(n.len(), expected);
        let c = m.element_center(center);
        let span = n.iter().map(|&k| (m.node_coords[k][0] - c[0]).abs()).fold(0.0, f64::max);
        assert!(span < 0.0875 && span > 0.08, "{span}");
    }

    proptest! {
        #[test]
        fn weights_are_nonnegative_and_normalized(n in 2usize..12, r in 0.08f64..0.4) {
            let m = mesh(n);
            let r = r.max(0.75 / n as f64);
            let f = FilterOperator::build(&m, r).unwrap();
            for e in 0..m.element_count() {
                let (_, w) = f.row(e);
                prop_assert!(w.iter().all(|&x| x >= 0.0));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
        }

        #[test]
        fn transpose_is_adjoint(seed in 0u64..1000) {
            let m = mesh(7);
            let f = FilterOperator::build(&m, 0.25).unwrap();
            let phi: Vec<f64> = (0..m.node_count()).map(|k| ((k as u64 * 31 + seed) as f64).sin()).collect();
            let g: Vec<f64> = (0..m.element_count()).map(|e| ((e as u64 * 17 + seed) as f64).cos()).collect();
            let lhs: f64 = f.apply(&phi).iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = f.apply_transpose(&g).iter().zip(&phi).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
