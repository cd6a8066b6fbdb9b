//! Single-tensor fit by log-linear least squares.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::data::{CoefficientVolume, DwiVolume};
use crate::error::{Error, Result};
use crate::field_model::predict_signal;
use crate::metrics::{RgbVolume, ScalarVolume};
use crate::sh_basis::{eval_sh_basis, frt_matrix, ShBasisSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct DtiFit {
    pub tensor: Matrix3<f64>,
    /// Descending.
    pub eigenvalues: [f64; 3],
    pub fa: f64,
    /// Principal eigenvector, first nonzero component positive.
    pub e1: [f64; 3],
    /// Some eigenvalue came out negative.
    pub negative_eigenvalues: bool,
}

impl DtiFit {
    /// `|e₁| · FA`, clamped to `[0, 1]`.
    pub fn rgb(&self) -> [f64; 3] {
        self.e1.map(|x| (x.abs() * self.fa).clamp(0.0, 1.0))
    }
}

/// Least-squares operator for a fixed gradient table, reused across voxels.
#[derive(Debug, Clone)]
pub struct DtiModel {
    pinv: DMatrix<f64>,
    n_directions: usize,
}

impl DtiModel {
    pub fn new(directions: &[[f64; 3]], b_value: f64) -> Result<Self> {
        if directions.len() < 6 {
            return Err(Error::InvalidInput(format!(
                "tensor fit needs at least 6 directions, got {}",
                directions.len()
            )));
        }
        let design = DMatrix::from_fn(directions.len(), 6, |i, j| {
            let g = directions[i];
            -b_value
                * match j {
                    0 => g[0] * g[0],
                    1 => g[1] * g[1],
                    2 => g[2] * g[2],
                    3 => 2.0 * g[0] * g[1],
                    4 => 2.0 * g[0] * g[2],
                    _ => 2.0 * g[1] * g[2],
                }
        });
        let pinv = design
            .pseudo_inverse(1e-12)
            .map_err(|e| Error::Numeric(format!("tensor design matrix: {e}")))?;
        if pinv.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("tensor design matrix is singular".into()));
        }
        Ok(Self {
            pinv,
            n_directions: directions.len(),
        })
    }

    pub fn fit(&self, signal: &[f64], s0: f64) -> Result<DtiFit> {
        if signal.len() != self.n_directions {
            return Err(Error::Shape(format!(
                "{} signals for {} directions",
                signal.len(),
                self.n_directions
            )));
        }
        if !(s0 > 0.0) {
            return Err(Error::InvalidInput(format!("reference signal must be positive, got {s0}")));
        }
        let floor = 1e-6 * s0;
        let logs = DVector::from_iterator(signal.len(), signal.iter().map(|&y| (y.max(floor) / s0).ln()));
        let d = &self.pinv * logs;
        let tensor = Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2]);
        Ok(summarize(tensor))
    }
}

fn summarize(tensor: Matrix3<f64>) -> DtiFit {
    let eig = SymmetricEigen::new(tensor);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let ev = order.map(|i| eig.eigenvalues[i]);
    let v: Vector3<f64> = eig.eigenvectors.column(order[0]).into_owned();
    let mut e1 = [v[0], v[1], v[2]];
    if let Some(first) = e1.iter().find(|x| **x != 0.0) {
        if *first < 0.0 {
            e1 = e1.map(|x| -x);
        }
    }
    let norm2 = ev.iter().map(|l| l * l).sum::<f64>();
    let fa = if norm2 > 0.0 {
        let num = (ev[0] - ev[1]).powi(2) + (ev[1] - ev[2]).powi(2) + (ev[2] - ev[0]).powi(2);
        (0.5 * num / norm2).sqrt()
    } else {
        0.0
    };
    DtiFit {
        tensor,
        eigenvalues: ev,
        fa,
        e1,
        negative_eigenvalues: ev[2] < 0.0,
    }
}

/// Fits a tensor to one voxel's signal.
pub fn dti_fit(signal: &[f64], directions: &[[f64; 3]], b_value: f64, s0: f64) -> Result<DtiFit> {
    DtiModel::new(directions, b_value)?.fit(signal, s0)
}

/// FA and RGB maps of a diffusion volume with unit reference signal.
pub fn dti_maps(dwi: &DwiVolume) -> Result<(ScalarVolume, RgbVolume)> {
    let model = DtiModel::new(dwi.gradients().directions(), dwi.gradients().b_value())?;
    let n = dwi.n_voxels();
    let m = dwi.n_directions();
    let mut fa = vec![0.0; n];
    let mut rgb = vec![[0.0; 3]; n];
    let mut y = vec![0.0; m];
    for v in dwi.masked_voxels() {
        for (d, yd) in y.iter_mut().enumerate() {
            *yd = dwi.signal_at(v, d);
        }
        let fit = model.fit(&y, 1.0)?;
        fa[v] = fit.fa;
        rgb[v] = fit.rgb();
    }
    Ok(maps(dwi.dims(), fa, rgb, dwi.mask().to_vec(), dwi.voxel_size(), dwi.affine()))
}

/// FA and RGB maps of the signal implied by ODF coefficients on a gradient table.
pub fn dti_maps_from_coefficients(
    cv: &CoefficientVolume,
    directions: &[[f64; 3]],
    b_value: f64,
) -> Result<(ScalarVolume, RgbVolume)> {
    if !cv.odf {
        return Err(Error::InvalidInput("expected ODF coefficients".into()));
    }
    let spec = ShBasisSpec::new(cv.lmax)?;
    let phi = eval_sh_basis(directions, &spec)?;
    let frt = frt_matrix(&spec);
    let model = DtiModel::new(directions, b_value)?;
    let n = cv.n_voxels();
    let mut fa = vec![0.0; n];
    let mut rgb = vec![[0.0; 3]; n];
    for v in (0..n).filter(|&v| cv.mask[v]) {
        let c = DMatrix::from_row_slice(1, spec.len(), cv.voxel(v));
        let y = predict_signal(&c, &phi, &frt)?;
        let fit = model.fit(y.as_slice(), 1.0)?;
        fa[v] = fit.fa;
        rgb[v] = fit.rgb();
    }
    Ok(maps(cv.dims, fa, rgb, cv.mask.clone(), cv.voxel_size, cv.affine))
}

fn maps(
    dims: [usize; 3],
    fa: Vec<f64>,
    rgb: Vec<[f64; 3]>,
    mask: Vec<bool>,
    voxel_size: [f64; 3],
    affine: [[f64; 4]; 4],
) -> (ScalarVolume, RgbVolume) {
    (
        ScalarVolume {
            dims,
            values: fa,
            mask: mask.clone(),
            voxel_size,
            affine,
        },
        RgbVolume {
            dims,
            values: rgb,
            mask,
            voxel_size,
            affine,
        },
    )
}
