//! Local maxima of an ODF on a spherical mesh.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sh_basis::{eval_sh_basis, ShBasisSpec};
use crate::sphere::{axis_angle_deg, SphereMesh};

/// Smallest mesh accepted for peak search.
pub const MIN_MESH_VERTICES: usize = 642;

/// ODF evaluator bound to a mesh, reusable across voxels.
#[derive(Debug, Clone)]
pub struct PeakFinder<'a> {
    mesh: &'a SphereMesh,
    basis: DMatrix<f64>,
}

impl<'a> PeakFinder<'a> {
    pub fn new(mesh: &'a SphereMesh, spec: &ShBasisSpec) -> Result<Self> {
        if mesh.vertices().len() < MIN_MESH_VERTICES {
            return Err(Error::InvalidInput(format!(
                "mesh has {} vertices, peak search needs at least {MIN_MESH_VERTICES}",
                mesh.vertices().len()
            )));
        }
        if mesh.antipodes().is_none() {
            return Err(Error::InvalidInput("mesh is not antipodally symmetric".into()));
        }
        Ok(Self {
            mesh,
            basis: eval_sh_basis(mesh.vertices(), spec)?,
        })
    }

    /// Peak directions sorted by ODF value, descending.
    pub fn peaks(&self, coeffs: &[f64], min_separation_deg: f64, rel_threshold: f64) -> Result<Vec<[f64; 3]>> {
        if coeffs.len() != self.basis.ncols() {
            return Err(Error::Shape(format!(
                "{} coefficients for a basis of {}",
                coeffs.len(),
                self.basis.ncols()
            )));
        }
        let f = &self.basis * DVector::from_column_slice(coeffs);
        let max = f.max();
        if !(max > 0.0) {
            return Ok(Vec::new());
        }
        let mut candidates: Vec<(f64, usize)> = (0..f.len())
            .filter(|&v| f[v] > rel_threshold * max && self.mesh.neighbors(v).iter().all(|&u| f[v] > f[u]))
            .map(|v| (f[v], v))
            .collect();
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<[f64; 3]> = Vec::new();
        for (_, v) in candidates {
            let p = self.mesh.vertices()[v];
            if out.iter().all(|q| axis_angle_deg(*q, p) >= min_separation_deg) {
                out.push(p);
            }
        }
        Ok(out)
    }
}

/// Peaks of one ODF. Builds the evaluator each call; use [`PeakFinder`] for volumes.
pub fn odf_peaks(
    coeffs: &[f64],
    mesh: &SphereMesh,
    min_separation_deg: f64,
    rel_threshold: f64,
) -> Result<Vec<[f64; 3]>> {
    let lmax = (0..=20)
        .step_by(2)
        .find(|&l| ShBasisSpec::size_for(l) == coeffs.len())
        .ok_or_else(|| Error::Shape(format!("{} is not an even-degree SH coefficient count", coeffs.len())))?;
    PeakFinder::new(mesh, &ShBasisSpec::new(lmax)?)?.peaks(coeffs, min_separation_deg, rel_threshold)
}
