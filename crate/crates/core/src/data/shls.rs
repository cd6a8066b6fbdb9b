//! Penalized spherical-harmonic least squares, voxel by voxel.

use log::warn;
use nalgebra::DMatrix;

use crate::data::{CoefficientVolume, DwiVolume};
use crate::error::{Error, Result};
use crate::sh_basis::{eval_sh_basis, frt_matrix, ShBasisSpec};

pub const DEFAULT_LAMBDA_SH: f64 = 0.006;

/// Solves `(ΦᵀΦ + λL) ĉ = Φᵀ y` for every column of `signals` (M × N)
/// and returns the ODF coefficients (K × N), i.e. `ĉ / G`.
pub fn shls_coefficients(
    directions: &[[f64; 3]],
    signals: &DMatrix<f64>,
    spec: &ShBasisSpec,
    lambda_sh: f64,
) -> Result<DMatrix<f64>> {
    if !(lambda_sh >= 0.0 && lambda_sh.is_finite()) {
        return Err(Error::InvalidInput(format!("lambda_sh must be finite and >= 0, got {lambda_sh}")));
    }
    if signals.nrows() != directions.len() {
        return Err(Error::Shape(format!(
            "{} signal rows for {} directions",
            signals.nrows(),
            directions.len()
        )));
    }
    let k = spec.len();
    let m = directions.len();
    if m < k {
        if lambda_sh == 0.0 {
            return Err(Error::Numeric(format!(
                "{m} directions cannot determine {k} coefficients without regularization; use lambda_sh > 0"
            )));
        }
        warn!("{m} directions for {k} coefficients, the fit relies on the penalty");
    }
    let phi = eval_sh_basis(directions, spec)?;
    let mut normal = phi.transpose() * &phi;
    for i in 0..k {
        let l = spec.degree(i) as f64;
        normal[(i, i)] += lambda_sh * l * l * (l + 1.0) * (l + 1.0);
    }
    let chol = normal.cholesky().ok_or_else(|| {
        Error::Numeric("SHLS normal matrix is not positive definite; increase lambda_sh".into())
    })?;
    let mut c = chol.solve(&(phi.transpose() * signals));
    let g = frt_matrix(spec);
    for (i, gi) in g.entries().iter().enumerate() {
        c.row_mut(i).scale_mut(1.0 / gi);
    }
    Ok(c)
}

/// Voxel-wise SHLS over the masked voxels of a volume.
pub fn shls_fit(volume: &DwiVolume, spec: &ShBasisSpec, lambda_sh: f64) -> Result<CoefficientVolume> {
    let voxels = volume.masked_voxels();
    let y = volume.signal_matrix(&voxels);
    let c = shls_coefficients(volume.gradients().directions(), &y, spec, lambda_sh)?;
    let mut out = CoefficientVolume::zeros(volume.dims(), spec.lmax());
    out.mask = volume.mask().to_vec();
    out.voxel_size = volume.voxel_size();
    out.affine = volume.affine();
    out.scatter(&voxels, &c);
    Ok(out)
}
