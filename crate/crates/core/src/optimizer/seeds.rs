//! Nodal initial designs and target-geometry generators.

use crate::error::{Error, Result};
use crate::mesh::RveMesh;

/// Built-in nodal design layouts on the unit cell.
///
/// Coordinates are normalized by the cell size, so each layout works at any
/// resolution and aspect ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Seed {
    Uniform {
        value: f64,
    },
    /// A hole at the cell center and quarter holes at the four corners,
    /// which tile into a staggered hole lattice.
    CircularHoles {
        center_radius: f64,
        corner_radius: f64,
        solid: f64,
        void: f64,
    },
    /// Two bars through the cell center along both axes.
    Cross {
        half_width: f64,
        solid: f64,
        void: f64,
    },
}

impl Seed {
    pub fn validate(&self) -> Result<()> {
        let levels = match *self {
            Seed::Uniform { value } => vec![value],
            Seed::CircularHoles { center_radius, corner_radius, solid, void } => {
                if !(center_radius >= 0.0 && corner_radius >= 0.0) {
                    return Err(Error::invalid("hole radii must be nonnegative"));
                }
                vec![solid, void]
            }
            Seed::Cross { half_width, solid, void } => {
                if !(half_width >= 0.0) {
                    return Err(Error::invalid("cross half width must be nonnegative"));
                }
                vec![solid, void]
            }
        };
        if levels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("seed levels must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Value of the layout at normalized cell coordinates.
    pub fn value_at(&self, x: f64, y: f64) -> f64 {
        match *self {
            Seed::Uniform { value } => value,
            Seed::CircularHoles { center_radius, corner_radius, solid, void } => {
                let center = ((x - 0.5).powi(2) + (y - 0.5).powi(2)).sqrt();
                let cx = x.min(1.0 - x);
                let cy = y.min(1.0 - y);
                let corner = (cx * cx + cy * cy).sqrt();
                if center < center_radius || corner < corner_radius {
                    void
                } else {
                    solid
                }
            }
            Seed::Cross { half_width, solid, void } => {
                if (x - 0.5).abs() < half_width || (y - 0.5).abs() < half_width {
                    solid
                } else {
                    void
                }
            }
        }
    }

    /// Nodal design vector for `mesh`.
    pub fn design(&self, mesh: &RveMesh) -> Result<Vec<f64>> {
        self.validate()?;
        Ok(mesh.node_coords.iter().map(|&[x, y]| self.value_at(x / mesh.l1, y / mesh.l2)).collect())
    }
}
