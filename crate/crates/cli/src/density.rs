//! Element density files.
//!
//! ```text
//! microtopt-density 1
//! nx 40
//! ny 40
//! l1 1.0000000000000000e0
//! l2 1.0000000000000000e0
//! thickness 3.0000000000000000e-1
//! <ny lines of nx values, bottom row first>
//! ```

use std::fmt::Write as _;
use std::path::Path;

use microtopt::RveMesh;

use crate::error::CliError;

const MAGIC: &str = "microtopt-density";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub nx: usize,
    pub ny: usize,
    pub l1: f64,
    pub l2: f64,
    pub thickness: f64,
    /// Row-major element densities (`values[j * nx + i]`).
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(mesh: &RveMesh, values: Vec<f64>) -> Result<Self, CliError> {
        let field = Self { nx: mesh.nx, ny: mesh.ny, l1: mesh.l1, l2: mesh.l2, thickness: mesh.thickness, values };
        field.validate()?;
        Ok(field)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.values.len() != self.nx * self.ny {
            return Err(CliError::Config(format!(
                "density field has {} values, expected {} x {} = {}",
                self.values.len(),
                self.nx,
                self.ny,
                self.nx * self.ny
            )));
        }
        if let Some(k) = self.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(CliError::Config(format!("density {k} = {} outside [0, 1]", self.values[k])));
        }
        Ok(())
    }

    pub fn mesh(&self) -> Result<RveMesh, CliError> {
        Ok(RveMesh::build(self.nx, self.ny, self.l1, self.l2, self.thickness)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "nx {}", self.nx);
        let _ = writeln!(out, "ny {}", self.ny);
        let _ = writeln!(out, "l1 {:.16e}", self.l1);
        let _ = writeln!(out, "l2 {:.16e}", self.l2);
        let _ = writeln!(out, "thickness {:.16e}", self.thickness);
        for row in self.values.chunks(self.nx.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::Config(format!("density file: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut parts = head.split_whitespace();
        if parts.next() != Some(MAGIC) {
            return Err(bad(format!("missing '{MAGIC}' header")));
        }
        let version: u32 =
            parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad("missing format version".into()))?;
        if version != VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut field = |name: &str| -> Result<String, CliError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing '{name}'")))?;
            let mut kv = line.split_whitespace();
            match (kv.next(), kv.next(), kv.next()) {
                (Some(k), Some(v), None) if k == name => Ok(v.to_string()),
                _ => Err(bad(format!("expected '{name} <value>', got '{line}'"))),
            }
        };
        let int = |s: String| s.parse::<usize>().map_err(|e| bad(format!("{s}: {e}")));
        let float = |s: String| s.parse::<f64>().map_err(|e| bad(format!("{s}: {e}")));
        let nx = int(field("nx")?)?;
        let ny = int(field("ny")?)?;
        let l1 = float(field("l1")?)?;
        let l2 = float(field("l2")?)?;
        let thickness = float(field("thickness")?)?;
        let mut values = Vec::with_capacity(nx * ny);
        for line in lines {
            for tok in line.split_whitespace() {
                values.push(tok.parse::<f64>().map_err(|e| bad(format!("{tok}: {e}")))?);
            }
        }
        let f = Self { nx, ny, l1, l2, thickness, values };
        f.validate()?;
        Ok(f)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    /// Comma-separated grid, one mesh row per line, bottom row first.
    pub fn to_csv_grid(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.nx.max(1)) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_identical() {
        let mesh = RveMesh::build(7, 5, 1.0, 0.7, 0.3).unwrap();
        let values: Vec<f64> = (0..35).map(|k| ((k as f64) * 0.123456789).sin().abs() / 3.0).collect();
        let f = DensityField::new(&mesh, values).unwrap();
        let back = DensityField::parse(&f.to_text()).unwrap();
        assert_eq!(back, f);
        for (a, b) in back.values.iter().zip(&f.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn malformed_files_are_rejected() {
        let mesh = RveMesh::build(2, 2, 1.0, 1.0, 0.3).unwrap();
        let good = DensityField::new(&mesh, vec![0.5; 4]).unwrap().to_text();
        assert!(DensityField::parse(&good.replace("microtopt-density 1", "microtopt-density 9")).is_err());
        assert!(DensityField::parse(&good.replace("nx 2", "nx 3")).is_err());
        assert!(DensityField::parse(&good.replace("5.0000000000000000e-1\n", "1.5\n")).is_err());
        assert!(DensityField::parse("").is_err());
        assert!(DensityField::new(&mesh, vec![0.5; 3]).is_err());
    }
}
