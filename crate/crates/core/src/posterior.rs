//! Closed-form Gaussian posterior over the output layer `W`.
//!
//! With `Ξ` the `r × N` spatial basis at the masked voxels, the precision of
//! `vec(W)` (columns stacked) is
//!
//! ```text
//!   Λ = (1/σ_e²) ( (σ_e²/σ_w²) I_r ⊗ R + ΞΞᵀ ⊗ (ΦG)ᵀΦG )
//! ```
//!
//! and the mean solves `Λ x = (1/σ_e²) vec((ΦG)ᵀ Y Ξᵀ)`. Rotating by the
//! eigenvectors `U` of `ΞΞᵀ = U S Uᵀ` turns `Λ` into `r` independent `K × K`
//! blocks `(1/σ_e²)((σ_e²/σ_w²) R + s_j (ΦG)ᵀΦG)`, so nothing of size
//! `Kr × Kr` is ever factorized.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoding::NormalizedCoord;
use crate::error::{Error, Result};
use crate::field_model::FieldModel;
use crate::metrics::gfa;
use crate::sh_basis::MaternPriorDiagonal;
use crate::training::Dataset;

/// Draws used for uncertainty maps unless configured otherwise.
pub const DEFAULT_SAMPLES: usize = 250;

/// Relative diagonal jitter used when a block is not positive definite.
pub const JITTER: f64 = 1e-10;

/// The data-dependent pieces of the posterior: `ΞΞᵀ` (`r × r`) and `YΞᵀ` (`M × r`).
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub gram: DMatrix<f64>,
    pub cross: DMatrix<f64>,
    pub n_samples: usize,
}

impl SufficientStats {
    pub fn zeros(m: usize, r: usize) -> Self {
        Self {
            gram: DMatrix::zeros(r, r),
            cross: DMatrix::zeros(m, r),
            n_samples: 0,
        }
    }

    /// Adds basis columns `xi` (`r × B`) with their signals `y` (`M × B`).
    pub fn accumulate(&mut self, xi: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
        if xi.ncols() != y.ncols() || xi.nrows() != self.gram.nrows() || y.nrows() != self.cross.nrows() {
            return Err(Error::Shape(format!(
                "basis {}×{} and signals {}×{} do not fit statistics of rank {} with {} directions",
                xi.nrows(),
                xi.ncols(),
                y.nrows(),
                y.ncols(),
                self.gram.nrows(),
                self.cross.nrows()
            )));
        }
        self.gram.gemm(1.0, xi, &xi.transpose(), 1.0);
        self.cross.gemm(1.0, y, &xi.transpose(), 1.0);
        self.n_samples += xi.ncols();
        Ok(())
    }

    pub fn from_basis(xi: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        let mut s = Self::zeros(y.nrows(), xi.nrows());
        s.accumulate(xi, y)?;
        Ok(s)
    }

    /// Statistics of a trained model over a whole dataset, `chunk` points at a time.
    pub fn from_model(model: &FieldModel, data: &Dataset, chunk: usize) -> Result<Self> {
        let mut s = Self::zeros(data.n_directions(), model.rank());
        let idx: Vec<usize> = (0..data.len()).collect();
        for part in idx.chunks(chunk.max(1)) {
            let coords: Vec<NormalizedCoord> = part.iter().map(|&i| data.coords()[i]).collect();
            let xi = model.basis_columns(&coords)?;
            let y = data.signals().select_columns(part);
            s.accumulate(&xi, &y)?;
        }
        Ok(s)
    }
}

/// Dense `Kr × Kr` precision, assembled term by term from its Kronecker form.
///
/// Only meant for validation and small problems.
pub fn assemble_precision(
    gram: &DMatrix<f64>,
    phi_g: &DMatrix<f64>,
    prior: &MaternPriorDiagonal,
    sigma_e2: f64,
    sigma_w2: f64,
) -> Result<DMatrix<f64>> {
    check_variances(sigma_e2, sigma_w2)?;
    let k = phi_g.ncols();
    let r = gram.nrows();
    if prior.len() != k || gram.ncols() != r {
        return Err(Error::Shape("prior or Gram matrix does not match the basis".into()));
    }
    let a = phi_g.tr_mul(phi_g);
    let rho = sigma_e2 / sigma_w2;
    let mut lam = DMatrix::zeros(k * r, k * r);
    for j in 0..r {
        for i in 0..r {
            let g = gram[(i, j)];
            for q in 0..k {
                for p in 0..k {
                    lam[(i * k + p, j * k + q)] = g * a[(p, q)] / sigma_e2;
                }
            }
        }
        for p in 0..k {
            lam[(j * k + p, j * k + p)] += rho * prior.entries()[p] / sigma_e2;
        }
    }
    Ok(lam)
}

fn check_variances(sigma_e2: f64, sigma_w2: f64) -> Result<()> {
    if !(sigma_e2 > 0.0 && sigma_e2.is_finite() && sigma_w2 > 0.0 && sigma_w2.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "variances must be positive and finite (σ_e² = {sigma_e2}, σ_w² = {sigma_w2})"
        )));
    }
    Ok(())
}

/// Gaussian posterior `N(mean, Λ⁻¹)` over `W`, stored in block-diagonal form.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    mean: DMatrix<f64>,
    sigma_e2: f64,
    sigma_w2: f64,
    /// Eigenvectors of `ΞΞᵀ`, one per column.
    rotation: DMatrix<f64>,
    eigenvalues: Vec<f64>,
    /// Cholesky factors of the rotated `K × K` precision blocks.
    blocks: Vec<Cholesky<f64, Dyn>>,
    jittered: usize,
}

impl PosteriorModel {
    pub fn fit(
        stats: &SufficientStats,
        phi_g: &DMatrix<f64>,
        prior: &MaternPriorDiagonal,
        sigma_e2: f64,
        sigma_w2: f64,
    ) -> Result<Self> {
        check_variances(sigma_e2, sigma_w2)?;
        let k = phi_g.ncols();
        let r = stats.gram.nrows();
        if prior.len() != k {
            return Err(Error::Shape(format!("prior has {} entries, basis has {k} columns", prior.len())));
        }
        if stats.cross.nrows() != phi_g.nrows() {
            return Err(Error::Shape(format!(
                "signals have {} directions, basis has {}",
                stats.cross.nrows(),
                phi_g.nrows()
            )));
        }
        let a = phi_g.tr_mul(phi_g);
        let rho = sigma_e2 / sigma_w2;
        let eig = stats.gram.clone().symmetric_eigen();
        let rotation = eig.eigenvectors;
        let eigenvalues: Vec<f64> = eig.eigenvalues.iter().map(|&s| s.max(0.0)).collect();

        let block = |s: f64| -> DMatrix<f64> {
            let mut b = &a * (s / sigma_e2);
            for p in 0..k {
                b[(p, p)] += rho * prior.entries()[p] / sigma_e2;
            }
            b
        };
        let trace: f64 = eigenvalues
            .iter()
            .map(|&s| (0..k).map(|p| (rho * prior.entries()[p] + s * a[(p, p)]) / sigma_e2).sum::<f64>())
            .sum();
        let jitter = JITTER * trace / (k * r) as f64;

        let mut blocks = Vec::with_capacity(r);
        let mut jittered = 0;
        for (j, &s) in eigenvalues.iter().enumerate() {
            let b = block(s);
            let chol = match b.clone().cholesky() {
                Some(c) => c,
                None => {
                    let mut bj = b.clone();
                    for p in 0..k {
                        bj[(p, p)] += jitter;
                    }
                    match bj.cholesky() {
                        Some(c) => {
                            jittered += 1;
                            c
                        }
                        None => {
                            let ev = b.symmetric_eigenvalues();
                            let (lo, hi) = (ev.min(), ev.max());
                            return Err(Error::Numeric(format!(
                                "posterior block {j} is not positive definite even with jitter {jitter:e} \
                                 (eigenvalues in [{lo:e}, {hi:e}], condition ≈ {:e})",
                                hi / lo.abs().max(f64::MIN_POSITIVE)
                            )));
                        }
                    }
                }
            };
            blocks.push(chol);
        }
        if jittered > 0 {
            warn!("{jittered} of {r} posterior blocks needed diagonal jitter {jitter:e}");
        }

        // B = (1/σ_e²)(ΦG)ᵀ Y Ξᵀ, rotated, solved block by block, rotated back
        let rhs = phi_g.tr_mul(&stats.cross) / sigma_e2;
        let mut rotated = rhs * &rotation;
        for (j, chol) in blocks.iter().enumerate() {
            let x = chol.solve(&rotated.column(j).into_owned());
            rotated.set_column(j, &x);
        }
        let mean = rotated * rotation.transpose();
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("posterior mean is not finite".into()));
        }
        Ok(Self {
            mean,
            sigma_e2,
            sigma_w2,
            rotation,
            eigenvalues,
            blocks,
            jittered,
        })
    }

    /// Posterior mean `W*` (`K × r`).
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    /// Posterior mean as `vec(W*)`, columns stacked.
    pub fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(self.mean.as_slice())
    }

    pub fn sigma_e2(&self) -> f64 {
        self.sigma_e2
    }

    pub fn sigma_w2(&self) -> f64 {
        self.sigma_w2
    }

    pub fn rank(&self) -> usize {
        self.mean.ncols()
    }

    pub fn n_coeffs(&self) -> usize {
        self.mean.nrows()
    }

    /// Eigenvalues of `ΞΞᵀ` (clamped at zero) in solver order.
    pub fn basis_spectrum(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Number of blocks that needed diagonal jitter.
    pub fn jittered_blocks(&self) -> usize {
        self.jittered
    }

    /// Marginal variances of every entry of `W` (`K × r`).
    pub fn marginal_variances(&self) -> DMatrix<f64> {
        let k = self.n_coeffs();
        let r = self.rank();
        // diagonal of each inverse block
        let inv_diag: Vec<DVector<f64>> = self
            .blocks
            .iter()
            .map(|c| {
                let inv = c.inverse();
                DVector::from_fn(k, |p, _| inv[(p, p)])
            })
            .collect();
        let mut out = DMatrix::zeros(k, r);
        for j in 0..r {
            for (i, d) in inv_diag.iter().enumerate() {
                let u2 = self.rotation[(j, i)] * self.rotation[(j, i)];
                for p in 0..k {
                    out[(p, j)] += u2 * d[p];
                }
            }
        }
        out
    }

    /// Dense precision rebuilt from the blocks (`Kr × Kr`), for validation.
    pub fn precision_dense(&self) -> DMatrix<f64> {
        let k = self.n_coeffs();
        let r = self.rank();
        let mut lam = DMatrix::zeros(k * r, k * r);
        for (i, c) in self.blocks.iter().enumerate() {
            let l = c.l();
            let b = &l * l.transpose();
            let u = self.rotation.column(i);
            for jb in 0..r {
                for ja in 0..r {
                    let w = u[ja] * u[jb];
                    if w == 0.0 {
                        continue;
                    }
                    let mut view = lam.view_mut((ja * k, jb * k), (k, k));
                    view += &b * w;
                }
            }
        }
        lam
    }

    /// One draw `mean + L⁻ᵀ z`, reshaped to `K × r`.
    pub fn draw<R: rand::Rng>(&self, rng: &mut R) -> DMatrix<f64> {
        let k = self.n_coeffs();
        let mut rotated = DMatrix::zeros(k, self.rank());
        for (j, c) in self.blocks.iter().enumerate() {
            let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
            let x = c
                .l()
                .transpose()
                .solve_upper_triangular(&z)
                .expect("Cholesky factor has a positive diagonal");
            rotated.set_column(j, &x);
        }
        &self.mean + rotated * self.rotation.transpose()
    }

    /// `n` reproducible draws.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }
}

/// Per-voxel GFA spread across posterior draws.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    /// Sample std over sample mean of GFA; `NaN` where undefined.
    pub ratio: Vec<f64>,
    pub mean_gfa: Vec<f64>,
    /// False where the mean GFA is zero and the ratio has no meaning.
    pub defined: Vec<bool>,
    pub n_samples: usize,
}

impl UncertaintyMap {
    /// Mean ratio over the voxels where it is defined.
    pub fn mean_ratio(&self) -> f64 {
        let (sum, n) = self
            .ratio
            .iter()
            .zip(&self.defined)
            .filter(|(_, d)| **d)
            .fold((0.0, 0usize), |(s, n), (r, _)| (s + r, n + 1));
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    }
}

/// GFA std/mean ratio per coordinate over sampled output layers.
pub fn gfa_uncertainty_map(samples: &[DMatrix<f64>], model: &FieldModel, coords: &[NormalizedCoord]) -> Result<UncertaintyMap> {
    if coords.is_empty() {
        return Err(Error::InvalidInput("no voxels for the uncertainty map".into()));
    }
    if samples.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 posterior samples, got {}",
            samples.len()
        )));
    }
    let n = coords.len();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    for chunk_start in (0..n).step_by(4096) {
        let part = &coords[chunk_start..(chunk_start + 4096).min(n)];
        let xi = model.basis_columns(part)?;
        for (s, w) in samples.iter().enumerate() {
            if w.nrows() != model.n_coeffs() || w.ncols() != model.rank() {
                return Err(Error::Shape(format!("sample {s} is {}×{}", w.nrows(), w.ncols())));
            }
            let c = w * &xi;
            for (j, col) in c.column_iter().enumerate() {
                let g = gfa(col.as_slice()).value;
                let i = chunk_start + j;
                // Welford update
                let delta = g - mean[i];
                mean[i] += delta / (s + 1) as f64;
                m2[i] += delta * (g - mean[i]);
            }
        }
    }
    let ns = samples.len();
    let mut ratio = vec![f64::NAN; n];
    let mut defined = vec![false; n];
    for i in 0..n {
        if mean[i] > 0.0 {
            let sd = (m2[i] / (ns - 1) as f64).max(0.0).sqrt();
            ratio[i] = sd / mean[i];
            defined[i] = true;
        }
    }
    Ok(UncertaintyMap {
        ratio,
        mean_gfa: mean,
        defined,
        n_samples: ns,
    })
}
