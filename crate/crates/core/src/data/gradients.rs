//! FSL-style `bvec`/`bval` gradient tables.

use std::path::Path;

use crate::error::{Error, Result};

/// b-values at or below this are treated as non-diffusion-weighted.
pub const B0_THRESHOLD: f64 = 50.0;
/// Allowed relative spread of the diffusion-weighted b-values.
pub const SHELL_TOLERANCE: f64 = 0.05;

/// Diffusion-weighted directions of a single-shell acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    directions: Vec<[f64; 3]>,
    b_value: f64,
    /// Position of each direction in the acquisition (4th image axis).
    volume_indices: Vec<usize>,
    b0_indices: Vec<usize>,
}

impl GradientTable {
    pub fn new(directions: Vec<[f64; 3]>, b_value: f64) -> Result<Self> {
        if directions.len() < 6 {
            return Err(Error::InvalidInput(format!(
                "{} gradient directions, need at least 6",
                directions.len()
            )));
        }
        for d in &directions {
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if (n - 1.0).abs() > 1e-4 {
                return Err(Error::InvalidInput(format!("gradient {d:?} has norm {n}")));
            }
        }
        let volume_indices = (0..directions.len()).collect();
        Ok(Self {
            directions,
            b_value,
            volume_indices,
            b0_indices: Vec::new(),
        })
    }

    pub fn directions(&self) -> &[[f64; 3]] {
        &self.directions
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn b_value(&self) -> f64 {
        self.b_value
    }

    pub fn volume_indices(&self) -> &[usize] {
        &self.volume_indices
    }

    pub fn b0_indices(&self) -> &[usize] {
        &self.b0_indices
    }

    /// Keeps only the listed directions (by position in this table).
    pub fn select(&self, keep: &[usize]) -> Result<Self> {
        let mut t = Self::new(keep.iter().map(|&i| self.directions[i]).collect(), self.b_value)?;
        t.volume_indices = keep.iter().map(|&i| self.volume_indices[i]).collect();
        t.b0_indices = self.b0_indices.clone();
        Ok(t)
    }
}

fn parse_rows(text: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(r, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| {
                        Error::format(what, format!("row {r}: cannot parse {tok:?} as a number"))
                    })
                })
                .collect()
        })
        .collect()
}

/// Builds a table from parsed bvec rows (3 × M) and bvals (M).
pub fn gradient_table_from_rows(bvec: &[Vec<f64>], bval: &[f64]) -> Result<GradientTable> {
    if bvec.len() != 3 {
        return Err(Error::format("bvec", format!("expected 3 rows, found {}", bvec.len())));
    }
    let m = bvec[0].len();
    if bvec.iter().any(|r| r.len() != m) {
        return Err(Error::format("bvec", "rows have differing column counts"));
    }
    if bval.len() != m {
        return Err(Error::format(
            "bval",
            format!("{} b-values for {m} gradient columns", bval.len()),
        ));
    }
    let mut directions = Vec::new();
    let mut volume_indices = Vec::new();
    let mut b0_indices = Vec::new();
    let mut shell = Vec::new();
    for i in 0..m {
        let v = [bvec[0][i], bvec[1][i], bvec[2][i]];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n == 0.0 || bval[i] <= B0_THRESHOLD {
            b0_indices.push(i);
            continue;
        }
        directions.push([v[0] / n, v[1] / n, v[2] / n]);
        volume_indices.push(i);
        shell.push(bval[i]);
    }
    if shell.is_empty() {
        return Err(Error::format("bval", "no diffusion-weighted volumes"));
    }
    let mean = shell.iter().sum::<f64>() / shell.len() as f64;
    let (lo, hi) = shell
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &b| (lo.min(b), hi.max(b)));
    if (hi - lo) / mean > SHELL_TOLERANCE {
        return Err(Error::Unsupported(format!(
            "multi-shell acquisition (b-values span {lo}..{hi}); only single-shell data is supported"
        )));
    }
    let mut table = GradientTable::new(directions, mean)?;
    table.volume_indices = volume_indices;
    table.b0_indices = b0_indices;
    Ok(table)
}

pub fn load_gradients(bvec_path: &Path, bval_path: &Path) -> Result<GradientTable> {
    let bvec = std::fs::read_to_string(bvec_path).map_err(|e| Error::io(bvec_path, e))?;
    let bval = std::fs::read_to_string(bval_path).map_err(|e| Error::io(bval_path, e))?;
    let bvec = parse_rows(&bvec, "bvec")?;
    let bval_rows = parse_rows(&bval, "bval")?;
    if bval_rows.len() != 1 {
        return Err(Error::format("bval", format!("expected 1 row, found {}", bval_rows.len())));
    }
    gradient_table_from_rows(&bvec, &bval_rows[0])
}

/// Writes the table as FSL `bvec`/`bval` files (diffusion-weighted volumes only).
pub fn save_gradients(table: &GradientTable, bvec_path: &Path, bval_path: &Path) -> Result<()> {
    let mut bvec = String::new();
    for axis in 0..3 {
        let row: Vec<String> = table.directions.iter().map(|d| format!("{:.10}", d[axis])).collect();
        bvec.push_str(&row.join(" "));
        bvec.push('\n');
    }
    let bval = vec![format!("{}", table.b_value); table.len()].join(" ") + "\n";
    std::fs::write(bvec_path, bvec).map_err(|e| Error::io(bvec_path, e))?;
    std::fs::write(bval_path, bval).map_err(|e| Error::io(bval_path, e))
}
