//! Scalar and color maps derived from ODF fields, and their comparison.

pub mod dti;
pub mod fsim;
pub mod peaks;

use crate::data::nifti::identity;
use crate::data::{voxel_index, CoefficientVolume, Datatype, NiftiImage};
use crate::error::{Error, Result};

pub use dti::{dti_fit, DtiFit, DtiModel};
pub use fsim::{fsim, fsim_volume_median, fsimc, fsimc_volume_median, FsimScore, FsimVolumeReport, Image2, RgbImage2, SliceScore};
pub use peaks::odf_peaks;

/// Generalized fractional anisotropy with a flag for the all-zero input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gfa {
    pub value: f64,
    /// The coefficients were all zero; `value` is 0 by convention.
    pub degenerate: bool,
}

/// `sqrt(1 − c₀² / Σ c_k²)`: std over rms of the ODF on the sphere.
///
/// The coefficients are rescaled by a power of two first, which is exact,
/// so very large or small inputs neither overflow nor underflow.
pub fn gfa(coeffs: &[f64]) -> Gfa {
    let peak = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if peak == 0.0 || coeffs.is_empty() || !peak.is_finite() {
        return Gfa {
            value: 0.0,
            degenerate: true,
        };
    }
    let scale = 2f64.powi(-peak.log2().floor() as i32);
    let c0 = coeffs[0] * scale;
    let total: f64 = coeffs.iter().map(|c| (c * scale) * (c * scale)).sum();
    Gfa {
        value: (1.0 - c0 * c0 / total).max(0.0).sqrt(),
        degenerate: false,
    }
}

/// One value per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub voxel_size: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl ScalarVolume {
    pub fn new(dims: [usize; 3], values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if values.len() != n || mask.len() != n {
            return Err(Error::Shape(format!(
                "{} values and {} mask entries for dims {dims:?}",
                values.len(),
                mask.len()
            )));
        }
        Ok(Self {
            dims,
            values,
            mask,
            voxel_size: [1.0; 3],
            affine: identity(),
        })
    }

    pub fn at(&self, v: [usize; 3]) -> f64 {
        self.values[voxel_index(v, self.dims)]
    }

    /// 2-D slice orthogonal to `axis` (0 sagittal, 1 coronal, 2 axial).
    pub fn slice(&self, axis: usize, index: usize) -> (Image2, Vec<bool>) {
        let (a, b) = in_plane_axes(axis);
        let (rows, cols) = (self.dims[b], self.dims[a]);
        let mut data = Vec::with_capacity(rows * cols);
        let mut mask = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut v = [0; 3];
                v[axis] = index;
                v[a] = c;
                v[b] = r;
                let i = voxel_index(v, self.dims);
                data.push(self.values[i]);
                mask.push(self.mask[i]);
            }
        }
        (Image2::new(rows, cols, data).expect("slice shape"), mask)
    }

    pub fn to_nifti(&self) -> NiftiImage {
        let mut img = NiftiImage::new(self.dims.to_vec(), self.values.clone(), Datatype::Float32);
        img.pixdim = self.voxel_size.to_vec();
        img.affine = self.affine;
        img
    }

    pub fn from_nifti(img: &NiftiImage) -> Result<Self> {
        if img.dims.len() != 3 && !(img.dims.len() == 4 && img.dims[3] == 1) {
            return Err(Error::format("dim[0]", format!("expected a 3-D image, found dims {:?}", img.dims)));
        }
        let dims = [img.dims[0], img.dims[1], img.dims[2]];
        let mut v = Self::new(dims, img.data.clone(), img.data.iter().map(|x| x.is_finite()).collect())?;
        v.voxel_size = [0, 1, 2].map(|i| img.pixdim.get(i).copied().unwrap_or(1.0));
        v.affine = img.affine;
        Ok(v)
    }

    /// Mean over masked voxels with finite values.
    pub fn masked_mean(&self) -> f64 {
        let (s, n) = self
            .values
            .iter()
            .zip(&self.mask)
            .filter(|(x, m)| **m && x.is_finite())
            .fold((0.0, 0usize), |(s, n), (x, _)| (s + x, n + 1));
        s / n as f64
    }
}

/// Three channels in `[0, 1]` per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbVolume {
    pub dims: [usize; 3],
    pub values: Vec<[f64; 3]>,
    pub mask: Vec<bool>,
    pub voxel_size: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl RgbVolume {
    pub fn slice(&self, axis: usize, index: usize) -> (RgbImage2, Vec<bool>) {
        let (a, b) = in_plane_axes(axis);
        let (rows, cols) = (self.dims[b], self.dims[a]);
        let mut data = Vec::with_capacity(rows * cols);
        let mut mask = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let mut v = [0; 3];
                v[axis] = index;
                v[a] = c;
                v[b] = r;
                let i = voxel_index(v, self.dims);
                data.push(self.values[i]);
                mask.push(self.mask[i]);
            }
        }
        (RgbImage2 { rows, cols, data }, mask)
    }

    /// 4-D image with the channels on the last axis.
    pub fn to_nifti(&self) -> NiftiImage {
        let n = self.values.len();
        let mut data = vec![0.0; 3 * n];
        for (i, px) in self.values.iter().enumerate() {
            for ch in 0..3 {
                data[i + ch * n] = px[ch];
            }
        }
        let mut img = NiftiImage::new(vec![self.dims[0], self.dims[1], self.dims[2], 3], data, Datatype::Float32);
        img.pixdim = vec![self.voxel_size[0], self.voxel_size[1], self.voxel_size[2], 1.0];
        img.affine = self.affine;
        img
    }

    pub fn from_nifti(img: &NiftiImage) -> Result<Self> {
        if img.dims.len() != 4 || img.dims[3] != 3 {
            return Err(Error::format("dim[4]", format!("expected 3 color channels, found dims {:?}", img.dims)));
        }
        let dims = [img.dims[0], img.dims[1], img.dims[2]];
        let n: usize = dims.iter().product();
        let values: Vec<[f64; 3]> = (0..n).map(|i| [img.data[i], img.data[i + n], img.data[i + 2 * n]]).collect();
        Ok(Self {
            dims,
            mask: values.iter().map(|p| p.iter().all(|x| x.is_finite())).collect(),
            values,
            voxel_size: [0, 1, 2].map(|i| img.pixdim.get(i).copied().unwrap_or(1.0)),
            affine: img.affine,
        })
    }
}

/// In-plane (column, row) axes of a slice orthogonal to `axis`.
fn in_plane_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

/// GFA of every masked voxel; unmasked voxels are 0.
pub fn gfa_volume(cv: &CoefficientVolume) -> ScalarVolume {
    let n = cv.n_voxels();
    let values = (0..n)
        .map(|v| if cv.mask[v] { gfa(cv.voxel(v)).value } else { 0.0 })
        .collect();
    ScalarVolume {
        dims: cv.dims,
        values,
        mask: cv.mask.clone(),
        voxel_size: cv.voxel_size,
        affine: cv.affine,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh_basis::{eval_sh_basis, ShBasisSpec};
    use crate::sphere::SphereMesh;
    use rand::{Rng, SeedableRng};

    #[test]
    fn isotropic_and_pure_anisotropic_limits() {
        assert_eq!(gfa(&[3.0, 0.0, 0.0]).value, 0.0);
        assert_eq!(gfa(&[0.0, 1.0, -2.0]).value, 1.0);
        let z = gfa(&[0.0; 6]);
        assert!(z.degenerate && z.value == 0.0);
    }

    #[test]
    fn dyadic_scaling_is_exact() {
        let c = [0.7, -0.2, 0.33, 0.01, 0.5, -0.12];
        let g = gfa(&c).value;
        for e in [-30, -3, 1, 7, 40] {
            let s: Vec<f64> = c.iter().map(|x| x * 2f64.powi(e)).collect();
            assert_eq!(gfa(&s).value, g);
        }
    }

    #[test]
    fn matches_discrete_std_over_rms() {
        let spec = ShBasisSpec::new(8).unwrap();
        let mesh = SphereMesh::icosphere(4);
        let y = eval_sh_basis(mesh.vertices(), &spec).unwrap();
        // each vertex carries a third of the area of its triangles
        let mut weights = vec![0.0; mesh.vertices().len()];
        for f in mesh.faces() {
            let [a, b, c] = f.map(|i| nalgebra::Vector3::from(mesh.vertices()[i]));
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            for i in f {
                weights[*i] += area / 3.0;
            }
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let c: Vec<f64> = (0..45).map(|_| rng.random_range(-1.0..1.0)).collect();
            let f = &y * nalgebra::DVector::from_column_slice(&c);
            let total: f64 = weights.iter().sum();
            let mean = f.iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>() / total;
            let ms = f.iter().zip(&weights).map(|(x, w)| x * x * w).sum::<f64>() / total;
            let discrete = (1.0 - mean * mean / ms).sqrt();
            assert!((discrete - gfa(&c).value).abs() < 1e-3, "{discrete} vs {}", gfa(&c).value);
        }
    }

    #[test]
    fn slices_pick_the_right_plane() {
        let dims = [2, 3, 4];
        let values: Vec<f64> = (0..24).map(|i| i as f64).collect();
        let v = ScalarVolume::new(dims, values, vec![true; 24]).unwrap();
        let (img, _) = v.slice(2, 1);
        assert_eq!((img.rows(), img.cols()), (3, 2));
        assert_eq!(img.get(2, 1), v.at([1, 2, 1]));
        let (img, _) = v.slice(0, 1);
        assert_eq!((img.rows(), img.cols()), (4, 3));
        assert_eq!(img.get(3, 2), v.at([1, 2, 3]));
    }
}
