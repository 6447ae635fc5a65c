//! Structured quadrilateral discretization of the periodic unit cell.
//!
//! Nodes are numbered row-major from the lower-left corner, so node `(i, j)`
//! (column `i`, row `j`) has id `j * (nx + 1) + i`. Elements follow the same
//! convention with `nx` columns, and their four nodes are listed
//! counter-clockwise starting from the lower-left one.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Structured mesh of the rectangular unit cell `[0, l1] x [0, l2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RveMesh {
    pub nx: usize,
    pub ny: usize,
    pub l1: f64,
    pub l2: f64,
    pub thickness: f64,
    pub node_coords: Vec<[f64; 2]>,
    pub element_connectivity: Vec<[usize; 4]>,
    /// Node whose two displacement components are removed from the system.
    pub pinned_node: usize,
}

impl RveMesh {
    pub fn build(nx: usize, ny: usize, l1: f64, l2: f64, thickness: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid(format!("element counts must be positive, got {nx}x{ny}")));
        }
        for (name, v) in [("l1", l1), ("l2", l2), ("thickness", thickness)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }

        let dx = l1 / nx as f64;
        let dy = l2 / ny as f64;
        let mut node_coords = Vec::with_capacity((nx + 1) * (ny + 1));
        for j in 0..=ny {
            // Snap the last row/column so opposite boundaries carry identical
            // tangential coordinates.
            let y = if j == ny { l2 } else { j as f64 * dy };
            for i in 0..=nx {
                let x = if i == nx { l1 } else { i as f64 * dx };
                node_coords.push([x, y]);
            }
        }

        let row = nx + 1;
        let mut element_connectivity = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                let n0 = j * row + i;
                element_connectivity.push([n0, n0 + 1, n0 + row + 1, n0 + row]);
            }
        }

        let pinned_node = (ny / 2) * row + nx / 2;
        Ok(Self { nx, ny, l1, l2, thickness, node_coords, element_connectivity, pinned_node })
    }

    pub fn with_pinned_node(mut self, node: usize) -> Result<Self> {
        if node >= self.node_count() {
            return Err(Error::invalid(format!("pinned node {node} out of range")));
        }
        self.pinned_node = node;
        Ok(self)
    }

    pub fn node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    pub fn element_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node_id(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    pub fn element_id(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Grid position `(column, row)` of a node.
    pub fn node_position(&self, node: usize) -> (usize, usize) {
        (node % (self.nx + 1), node / (self.nx + 1))
    }

    pub fn is_boundary_node(&self, node: usize) -> bool {
        let (i, j) = self.node_position(node);
        i == 0 || j == 0 || i == self.nx || j == self.ny
    }

    pub fn element_coords(&self, e: usize) -> [[f64; 2]; 4] {
        self.element_connectivity[e].map(|n| self.node_coords[n])
    }

    pub fn element_center(&self, e: usize) -> [f64; 2] {
        let c = self.element_coords(e);
        [0.25 * (c[0][0] + c[1][0] + c[2][0] + c[3][0]), 0.25 * (c[0][1] + c[1][1] + c[2][1] + c[3][1])]
    }

    /// Reference area of element `e` (shoelace formula).
    pub fn element_area(&self, e: usize) -> f64 {
        let c = self.element_coords(e);
        let mut twice = 0.0;
        for a in 0..4 {
            let b = (a + 1) % 4;
            twice += c[a][0] * c[b][1] - c[b][0] * c[a][1];
        }
        0.5 * twice
    }

    pub fn element_volume(&self, e: usize) -> f64 {
        self.element_area(e) * self.thickness
    }

    /// `|Ω_rve|`: cell area times out-of-plane thickness.
    pub fn volume(&self) -> f64 {
        self.l1 * self.l2 * self.thickness
    }
}

/// Pairs of boundary nodes tied by the periodicity constraints.
///
/// Each pair is `(positive, negative)`: right/top nodes are positive,
/// left/bottom nodes negative. The three non-master corners are each tied
/// to the lower-left corner, which keeps the constraint rows independent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundaryPairing {
    pub pairs: Vec<(usize, usize)>,
    pub corner_master: usize,
}

impl BoundaryPairing {
    pub fn build(mesh: &RveMesh) -> Self {
        let (nx, ny) = (mesh.nx, mesh.ny);
        let mut pairs = Vec::with_capacity((nx - 1) + (ny - 1) + 3);
        for j in 1..ny {
            pairs.push((mesh.node_id(nx, j), mesh.node_id(0, j)));
        }
        for i in 1..nx {
            pairs.push((mesh.node_id(i, ny), mesh.node_id(i, 0)));
        }
        let master = mesh.node_id(0, 0);
        pairs.push((mesh.node_id(nx, 0), master));
        pairs.push((mesh.node_id(0, ny), master));
        pairs.push((mesh.node_id(nx, ny), master));
        Self { pairs, corner_master: master }
    }

    /// Number of node pairs `m`.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Number of scalar constraint rows, `2m`.
    pub fn constraint_rows(&self) -> usize {
        2 * self.pairs.len()
    }
}

/// `T_X`: maps the displacement-gradient vector `[G11, G12, G21, G22]` to the
/// affine nodal displacement `G X` (rows `2i`, `2i + 1` for node `i`).
pub fn build_coordinate_operator(mesh: &RveMesh) -> DMatrix<f64> {
    let n = mesh.node_count();
    let mut t_x = DMatrix::zeros(2 * n, 4);
    for (i, &[x1, x2]) in mesh.node_coords.iter().enumerate() {
        t_x[(2 * i, 0)] = x1;
        t_x[(2 * i, 1)] = x2;
        t_x[(2 * i + 1, 2)] = x1;
        t_x[(2 * i + 1, 3)] = x2;
    }
    t_x
}

/// Element orbits under the symmetry group of the square: reflections about
/// both midlines and both diagonals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymmetryMap {
    /// Representative (smallest element id) of each element's orbit.
    pub orbit: Vec<usize>,
}

impl SymmetryMap {
    pub fn build(mesh: &RveMesh) -> Result<Self> {
        if mesh.nx != mesh.ny || mesh.l1 != mesh.l2 {
            return Err(Error::invalid(format!(
                "diagonal symmetry requires a square cell, got {}x{} elements on {}x{}",
                mesh.nx, mesh.ny, mesh.l1, mesh.l2
            )));
        }
        let n = mesh.nx;
        let last = n - 1;
        let mut orbit = vec![0; n * n];
        for j in 0..n {
            for i in 0..n {
                let images = [
                    (i, j),
                    (last - i, j),
                    (i, last - j),
                    (last - i, last - j),
                    (j, i),
                    (last - j, i),
                    (j, last - i),
                    (last - j, last - i),
                ];
                orbit[mesh.element_id(i, j)] =
                    images.iter().map(|&(a, b)| mesh.element_id(a, b)).min().expect("non-empty orbit");
            }
        }
        Ok(Self { orbit })
    }

    /// Map that leaves every element alone; used for non-square cells and
    /// unsymmetric studies.
    pub fn identity(element_count: usize) -> Self {
        Self { orbit: (0..element_count).collect() }
    }

    pub fn len(&self) -> usize {
        self.orbit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orbit.is_empty()
    }

    /// Copies each orbit representative's value onto the whole orbit.
    pub fn symmetrize(&self, field: &[f64]) -> Vec<f64> {
        self.orbit.iter().map(|&r| field[r]).collect()
    }

    /// Adjoint of [`symmetrize`](Self::symmetrize): accumulates sensitivities
    /// of every orbit member onto its representative.
    pub fn accumulate(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; grad.len()];
        for (e, &r) in self.orbit.iter().enumerate() {
            out[r] += grad[e];
        }
        out
    }

    pub fn is_symmetric(&self, field: &[f64]) -> bool {
        self.orbit.iter().enumerate().all(|(e, &r)| field[e] == field[r])
    }
}
