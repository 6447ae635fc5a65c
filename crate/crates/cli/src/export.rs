//! CSV outputs. Numbers are written with 17 significant digits and a fixed
//! column order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use microtopt::optimizer::IterationRecord;
use microtopt::{Matrix3, PathSample};

pub const STRESS_HEADER: &str = "load_factor,E11,E22,E12,S11,S22,S12,dS22_dE22";
pub const TANGENT_HEADER: &str = "load_factor,E11,E22,E12,C11,C12,C13,C21,C22,C23,C31,C32,C33";
pub const HISTORY_HEADER: &str =
    "iteration,objective,constraint,volume_fraction,beta,non_discreteness,max_change,newton_iterations,retries";
pub const MATRIX_HEADER: &str = "row,c1,c2,c3";

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn stress_row(s: &PathSample) -> String {
    let slope = s.c_eff.map(|c| c[(1, 1)]).unwrap_or(f64::NAN);
    [s.load_factor, s.e_hat[0], s.e_hat[1], s.e_hat[2], s.s_int[0], s.s_int[1], s.s_int[2], slope]
        .iter()
        .map(|&v| num(v))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn tangent_row(s: &PathSample) -> String {
    let c = s.c_eff.unwrap_or_else(|| Matrix3::from_element(f64::NAN));
    let mut cols = vec![s.load_factor, s.e_hat[0], s.e_hat[1], s.e_hat[2]];
    for i in 0..3 {
        for j in 0..3 {
            cols.push(c[(i, j)]);
        }
    }
    cols.iter().map(|&v| num(v)).collect::<Vec<_>>().join(",")
}

pub fn history_row(r: &IterationRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.iteration,
        num(r.objective),
        num(r.constraint),
        num(r.volume_fraction),
        num(r.beta),
        num(r.non_discreteness),
        num(r.max_change),
        r.newton_iterations,
        r.retries
    )
}

pub fn matrix_rows(c: &Matrix3<f64>) -> Vec<String> {
    (0..3).map(|i| format!("{},{},{},{}", i + 1, num(c[(i, 0)]), num(c[(i, 1)]), num(c[(i, 2)]))).collect()
}

/// Footer marking a truncated file.
pub fn failure_footer(reason: &str) -> String {
    format!("# FAILED: {}", reason.replace('\n', " "))
}

/// Line-oriented CSV file that is flushed after every row, so partial
/// results survive an abort.
pub struct CsvWriter {
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &str) -> std::io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn row(&mut self, line: &str) -> std::io::Result<()> {
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }
}

pub fn write_matrix(path: &Path, c: &Matrix3<f64>) -> std::io::Result<()> {
    let mut w = CsvWriter::create(path, MATRIX_HEADER)?;
    for line in matrix_rows(c) {
        w.row(&line)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use microtopt::Vector3;

    #[test]
    fn rows_have_header_arity() {
        let s = PathSample {
            load_factor: 0.5,
            e_hat: Vector3::new(0.0, 0.1, 0.0),
            s_int: Vector3::new(0.01, 0.2, 0.0),
            c_eff: Some(Matrix3::identity()),
        };
        assert_eq!(stress_row(&s).split(',').count(), STRESS_HEADER.split(',').count());
        assert_eq!(tangent_row(&s).split(',').count(), TANGENT_HEADER.split(',').count());
        let values: Vec<f64> = stress_row(&s).split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(values, vec![0.5, 0.0, 0.1, 0.0, 0.01, 0.2, 0.0, 1.0]);
    }
}
