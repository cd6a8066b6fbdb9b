//! Diffusion volumes, gradient tables, coefficient volumes and the
//! voxel-wise least-squares baseline.

pub mod gradients;
pub mod nifti;
pub mod phantom;
pub mod shls;

use std::path::Path;

use log::warn;
use nalgebra::DMatrix;

use crate::encoding::NormalizedCoord;
use crate::error::{Error, Result};
use crate::training::Dataset;

pub use gradients::{load_gradients, save_gradients, GradientTable};
pub use nifti::{load_nifti, read_nifti_header, save_nifti, Datatype, NiftiImage};
pub use phantom::{generate_phantom, Compartment, Phantom, PhantomSpec, Region};
pub use shls::{shls_coefficients, shls_fit, DEFAULT_LAMBDA_SH};

/// Linear index of voxel `(x, y, z)`, x fastest.
pub fn voxel_index(v: [usize; 3], dims: [usize; 3]) -> usize {
    v[0] + dims[0] * (v[1] + dims[1] * v[2])
}

pub fn voxel_position(index: usize, dims: [usize; 3]) -> [usize; 3] {
    [index % dims[0], (index / dims[0]) % dims[1], index / (dims[0] * dims[1])]
}

/// A single-shell diffusion-weighted image.
///
/// `signal` is stored in NIfTI order: x fastest, then y, z, and direction.
#[derive(Debug, Clone, PartialEq)]
pub struct DwiVolume {
    dims: [usize; 3],
    signal: Vec<f64>,
    gradients: GradientTable,
    mask: Vec<bool>,
    voxel_size: [f64; 3],
    affine: [[f64; 4]; 4],
}

impl DwiVolume {
    pub fn new(
        dims: [usize; 3],
        signal: Vec<f64>,
        gradients: GradientTable,
        mask: Vec<bool>,
        voxel_size: [f64; 3],
        affine: [[f64; 4]; 4],
    ) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if signal.len() != n * gradients.len() {
            return Err(Error::Shape(format!(
                "signal holds {} values, dims {dims:?} × {} directions need {}",
                signal.len(),
                gradients.len(),
                n * gradients.len()
            )));
        }
        if mask.len() != n {
            return Err(Error::Shape(format!("mask has {} voxels, volume has {n}", mask.len())));
        }
        let vol = Self {
            dims,
            signal,
            gradients,
            mask,
            voxel_size,
            affine,
        };
        for v in vol.masked_voxels() {
            for d in 0..vol.n_directions() {
                let s = vol.signal_at(v, d);
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "masked voxel {:?} has invalid signal {s} in direction {d}",
                        voxel_position(v, dims)
                    )));
                }
            }
        }
        Ok(vol)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn n_directions(&self) -> usize {
        self.gradients.len()
    }

    pub fn gradients(&self) -> &GradientTable {
        &self.gradients
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn voxel_size(&self) -> [f64; 3] {
        self.voxel_size
    }

    pub fn affine(&self) -> [[f64; 4]; 4] {
        self.affine
    }

    pub fn signal(&self) -> &[f64] {
        &self.signal
    }

    pub fn signal_at(&self, voxel: usize, direction: usize) -> f64 {
        self.signal[voxel + direction * self.n_voxels()]
    }

    pub fn masked_voxels(&self) -> Vec<usize> {
        (0..self.n_voxels()).filter(|&i| self.mask[i]).collect()
    }

    /// `M × N` signal matrix of the listed voxels.
    pub fn signal_matrix(&self, voxels: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_directions(), voxels.len(), |d, j| self.signal_at(voxels[j], d))
    }

    /// Masked voxels as a training set, plus the voxel index of each sample.
    pub fn dataset(&self) -> Result<(Dataset, Vec<usize>)> {
        let voxels = self.masked_voxels();
        if voxels.is_empty() {
            return Err(Error::InvalidInput("mask is empty".into()));
        }
        let coords = voxels
            .iter()
            .map(|&v| NormalizedCoord::voxel_center(voxel_position(v, self.dims), self.dims))
            .collect();
        Ok((Dataset::new(coords, self.signal_matrix(&voxels))?, voxels))
    }

    /// Replaces the mask.
    pub fn with_mask(self, mask: Vec<bool>) -> Result<Self> {
        Self::new(self.dims, self.signal, self.gradients, mask, self.voxel_size, self.affine)
    }

    /// Keeps a subset of gradient directions.
    pub fn select_directions(&self, keep: &[usize]) -> Result<Self> {
        let n = self.n_voxels();
        let mut signal = Vec::with_capacity(n * keep.len());
        for &d in keep {
            signal.extend_from_slice(&self.signal[d * n..(d + 1) * n]);
        }
        Self::new(
            self.dims,
            signal,
            self.gradients.select(keep)?,
            self.mask.clone(),
            self.voxel_size,
            self.affine,
        )
    }

    /// Builds a volume from a 4-D image and its gradient table.
    ///
    /// Volumes listed as b0 in the table are averaged and, when present,
    /// divide the diffusion-weighted signal (voxels with a zero b0 keep
    /// the raw signal). Without a mask, [`threshold_mask`] is used.
    pub fn from_nifti(image: &NiftiImage, gradients: GradientTable, mask: Option<Vec<bool>>) -> Result<Self> {
        if image.dims.len() != 4 {
            return Err(Error::format("dim[0]", format!("expected a 4-D image, found {}-D", image.dims.len())));
        }
        let dims = [image.dims[0], image.dims[1], image.dims[2]];
        let n: usize = dims.iter().product();
        let frames = image.dims[3];
        let needed = gradients
            .volume_indices()
            .iter()
            .chain(gradients.b0_indices())
            .max()
            .copied()
            .unwrap_or(0);
        if needed >= frames {
            return Err(Error::format(
                "dim[4]",
                format!("{frames} volumes in the image, gradient table references volume {needed}"),
            ));
        }
        let b0: Option<Vec<f64>> = (!gradients.b0_indices().is_empty()).then(|| {
            let k = gradients.b0_indices().len() as f64;
            (0..n)
                .map(|v| gradients.b0_indices().iter().map(|&t| image.data[v + t * n]).sum::<f64>() / k)
                .collect()
        });
        let mut signal = Vec::with_capacity(n * gradients.len());
        for &t in gradients.volume_indices() {
            for v in 0..n {
                let s = image.data[v + t * n];
                signal.push(match &b0 {
                    Some(b) if b[v] > 0.0 => s / b[v],
                    _ => s,
                });
            }
        }
        let mask = match mask {
            Some(m) => m,
            None => {
                warn!("no mask supplied, using a signal-threshold mask");
                threshold_mask(&signal, n)
            }
        };
        let voxel_size = [0, 1, 2].map(|i| image.pixdim.get(i).copied().unwrap_or(1.0));
        let mut signal = signal;
        for (i, s) in signal.iter_mut().enumerate() {
            if mask[i % n] && *s < 0.0 {
                *s = 0.0;
            }
        }
        Self::new(dims, signal, gradients, mask, voxel_size, image.affine)
    }

    pub fn to_nifti(&self) -> NiftiImage {
        let mut img = NiftiImage::new(
            vec![self.dims[0], self.dims[1], self.dims[2], self.n_directions()],
            self.signal.clone(),
            Datatype::Float32,
        );
        img.pixdim = vec![self.voxel_size[0], self.voxel_size[1], self.voxel_size[2], 1.0];
        img.affine = self.affine;
        img
    }
}

/// Voxels whose mean signal exceeds 10% of the 99th-percentile mean signal.
pub fn threshold_mask(signal: &[f64], n_voxels: usize) -> Vec<bool> {
    let frames = signal.len() / n_voxels.max(1);
    let means: Vec<f64> = (0..n_voxels)
        .map(|v| (0..frames).map(|t| signal[v + t * n_voxels]).sum::<f64>() / frames.max(1) as f64)
        .collect();
    let mut sorted: Vec<f64> = means.iter().copied().filter(|m| m.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let p99 = sorted
        .get(((sorted.len() as f64 * 0.99) as usize).min(sorted.len().saturating_sub(1)))
        .copied()
        .unwrap_or(0.0);
    means.iter().map(|&m| m.is_finite() && m > 0.1 * p99).collect()
}

/// Per-voxel ODF (or signal) coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientVolume {
    pub dims: [usize; 3],
    pub lmax: usize,
    /// Voxel-major: voxel `v` owns `coeffs[v*K .. (v+1)*K]`.
    pub coeffs: Vec<f64>,
    pub mask: Vec<bool>,
    /// True when the coefficients describe the ODF (FRT applied).
    pub odf: bool,
    pub voxel_size: [f64; 3],
    pub affine: [[f64; 4]; 4],
}

impl CoefficientVolume {
    pub fn zeros(dims: [usize; 3], lmax: usize) -> Self {
        let n: usize = dims.iter().product();
        let k = crate::sh_basis::ShBasisSpec::size_for(lmax);
        Self {
            dims,
            lmax,
            coeffs: vec![0.0; n * k],
            mask: vec![true; n],
            odf: true,
            voxel_size: [1.0; 3],
            affine: nifti::identity(),
        }
    }

    pub fn n_coeffs(&self) -> usize {
        crate::sh_basis::ShBasisSpec::size_for(self.lmax)
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn voxel(&self, v: usize) -> &[f64] {
        let k = self.n_coeffs();
        &self.coeffs[v * k..(v + 1) * k]
    }

    pub fn voxel_mut(&mut self, v: usize) -> &mut [f64] {
        let k = self.n_coeffs();
        &mut self.coeffs[v * k..(v + 1) * k]
    }

    /// Writes `K × N` columns into the listed voxels.
    pub fn scatter(&mut self, voxels: &[usize], columns: &DMatrix<f64>) {
        for (j, &v) in voxels.iter().enumerate() {
            self.voxel_mut(v).copy_from_slice(columns.column(j).as_slice());
        }
    }

    /// Header tag recording degree, convention and FRT flag, e.g. `lmax=8;desc;odf`.
    pub fn intent_tag(&self) -> String {
        format!("lmax={};desc;{}", self.lmax, if self.odf { "odf" } else { "sig" })
    }

    /// 4-D float32 image with the coefficients on the last axis.
    pub fn to_nifti(&self) -> NiftiImage {
        let n = self.n_voxels();
        let k = self.n_coeffs();
        let mut data = vec![0.0; n * k];
        for v in 0..n {
            for c in 0..k {
                data[v + c * n] = self.coeffs[v * k + c];
            }
        }
        let mut img = NiftiImage::new(vec![self.dims[0], self.dims[1], self.dims[2], k], data, Datatype::Float32);
        img.pixdim = vec![self.voxel_size[0], self.voxel_size[1], self.voxel_size[2], 1.0];
        img.affine = self.affine;
        img.intent_name = self.intent_tag();
        img
    }

    pub fn from_nifti(image: &NiftiImage) -> Result<Self> {
        if image.dims.len() != 4 {
            return Err(Error::format("dim[0]", "coefficient volumes are 4-D"));
        }
        let k = image.dims[3];
        let tag = &image.intent_name;
        let lmax = tag
            .strip_prefix("lmax=")
            .and_then(|r| r.split(';').next())
            .and_then(|l| l.parse::<usize>().ok())
            .or_else(|| (0..=20).step_by(2).find(|&l| crate::sh_basis::ShBasisSpec::size_for(l) == k))
            .ok_or_else(|| Error::format("intent_name", format!("cannot infer SH degree from {tag:?} and {k} channels")))?;
        if crate::sh_basis::ShBasisSpec::size_for(lmax) != k {
            return Err(Error::format("dim[4]", format!("{k} channels do not match lmax {lmax}")));
        }
        let dims = [image.dims[0], image.dims[1], image.dims[2]];
        let n: usize = dims.iter().product();
        let mut coeffs = vec![0.0; n * k];
        for v in 0..n {
            for c in 0..k {
                coeffs[v * k + c] = image.data[v + c * n];
            }
        }
        let mask = (0..n).map(|v| coeffs[v * k..(v + 1) * k].iter().any(|x| *x != 0.0)).collect();
        Ok(Self {
            dims,
            lmax,
            coeffs,
            mask,
            odf: !tag.ends_with(";sig"),
            voxel_size: [0, 1, 2].map(|i| image.pixdim.get(i).copied().unwrap_or(1.0)),
            affine: image.affine,
        })
    }
}

/// Loads a 4-D DWI with its FSL sidecars and optional mask image.
pub fn load_dwi(dwi: &Path, bvec: &Path, bval: &Path, mask: Option<&Path>) -> Result<DwiVolume> {
    let image = load_nifti(dwi)?;
    let table = load_gradients(bvec, bval)?;
    let mask = match mask {
        Some(p) => {
            let m = load_nifti(p)?;
            if m.dims.iter().take(3).copied().collect::<Vec<_>>() != image.dims[..3] {
                return Err(Error::Shape(format!(
                    "mask dims {:?} differ from image dims {:?}",
                    m.dims,
                    &image.dims[..3]
                )));
            }
            Some(m.data.iter().map(|&x| x > 0.0).collect())
        }
        None => None,
    };
    DwiVolume::from_nifti(&image, table, mask)
}
