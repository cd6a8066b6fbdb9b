//! Real symmetric spherical harmonic basis.
//!
//! Only even degrees are kept, so every basis function satisfies
//! `φ(−p) = φ(p)`. Ordering and signs follow the Descoteaux 2007 convention
//! used by most dMRI tooling: for index `j` with degree `l` and order `m`,
//!
//! ```text
//!   m < 0:  √2 · Re(Y_l^|m|)
//!   m = 0:  Y_l^0
//!   m > 0:  √2 · Im(Y_l^m)
//! ```
//!
//! where `Y_l^m(θ, φ) = N_lm · P_l^m(cos θ) · e^{imφ}` is the complex harmonic
//! with the Condon–Shortley phase folded into `P_l^m`. Indices run over
//! ascending `l`, and within a degree over ascending `m`.
//!
//! The coefficient vectors produced by this crate describe the ODF without the
//! isotropic `1/(4π)` offset of Q-ball imaging. GFA and peak directions do not
//! depend on that offset.

use std::f64::consts::PI;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShBasisSpec {
    lmax: usize,
    index_map: Vec<(usize, i32)>,
}

impl ShBasisSpec {
    pub fn new(lmax: usize) -> Result<Self> {
        if lmax % 2 != 0 {
            return Err(Error::Config(format!(
                "maximum SH degree must be even, got {lmax}"
            )));
        }
        let mut index_map = Vec::with_capacity(Self::size_for(lmax));
        for l in (0..=lmax).step_by(2) {
            let li = l as i32;
            for m in -li..=li {
                index_map.push((l, m));
            }
        }
        Ok(Self { lmax, index_map })
    }

    /// Basis size `(lmax + 1)(lmax + 2) / 2`.
    pub fn size_for(lmax: usize) -> usize {
        (lmax + 1) * (lmax + 2) / 2
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn len(&self) -> usize {
        self.index_map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index_map.is_empty()
    }

    pub fn index_map(&self) -> &[(usize, i32)] {
        &self.index_map
    }

    pub fn degree(&self, k: usize) -> usize {
        self.index_map[k].0
    }

    /// Index of `(l, m)` in the basis ordering.
    pub fn index_of(&self, l: usize, m: i32) -> Option<usize> {
        if l % 2 != 0 || l > self.lmax || m.unsigned_abs() as usize > l {
            return None;
        }
        let offset = Self::size_for(l) - (2 * l + 1);
        Some(offset + (m + l as i32) as usize)
    }
}

impl Default for ShBasisSpec {
    fn default() -> Self {
        Self::new(8).expect("lmax 8 is even")
    }
}

/// `P_l(0)` by the three-term recurrence `(n+1) P_{n+1} = (2n+1) x P_n − n P_{n−1}`.
pub fn legendre_at_zero(l: usize) -> Result<f64> {
    if l % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "P_l(0) requested for odd degree {l}; odd degrees are not part of the basis"
        )));
    }
    let x = 0.0_f64;
    let (mut prev, mut cur) = (1.0_f64, x);
    if l == 0 {
        return Ok(prev);
    }
    for n in 1..l {
        let n = n as f64;
        let next = ((2.0 * n + 1.0) * x * cur - n * prev) / (n + 1.0);
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

/// Diagonal of the inverse Funk–Radon transform in the SH basis.
///
/// Multiplying ODF coefficients by this diagonal gives signal coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct FrtDiagonal {
    entries: Vec<f64>,
}

impl FrtDiagonal {
    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Scales the columns of `phi` (M×K) by the diagonal, giving `Φ·G`.
    pub fn right_apply(&self, phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if phi.ncols() != self.entries.len() {
            return Err(Error::Shape(format!(
                "basis matrix has {} columns, FRT diagonal has {} entries",
                phi.ncols(),
                self.entries.len()
            )));
        }
        let mut out = phi.clone();
        for (k, mut col) in out.column_iter_mut().enumerate() {
            col *= self.entries[k];
        }
        Ok(out)
    }
}

pub fn frt_matrix(spec: &ShBasisSpec) -> FrtDiagonal {
    let entries = spec
        .index_map()
        .iter()
        .map(|&(l, _)| {
            let p = legendre_at_zero(l).expect("basis holds even degrees only");
            1.0 / (2.0 * PI * p)
        })
        .collect();
    FrtDiagonal { entries }
}

/// Degree-wise roughness penalty `(κ² + l(l+1))^(ν+1)` of a spherical Matérn prior.
#[derive(Debug, Clone, PartialEq)]
pub struct MaternPriorDiagonal {
    nu: f64,
    kappa: f64,
    entries: Vec<f64>,
}

impl MaternPriorDiagonal {
    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `wᵀ R w` for a single coefficient vector.
    pub fn quadratic_form(&self, w: impl IntoIterator<Item = f64>) -> f64 {
        w.into_iter()
            .zip(&self.entries)
            .map(|(x, r)| r * x * x)
            .sum()
    }
}

pub fn matern_prior_matrix(nu: f64, kappa: f64, spec: &ShBasisSpec) -> Result<MaternPriorDiagonal> {
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::Config(format!("Matérn smoothness must be positive, got {nu}")));
    }
    if !(kappa >= 0.0) || !kappa.is_finite() {
        return Err(Error::Config(format!(
            "Matérn inverse length-scale must be non-negative, got {kappa}"
        )));
    }
    let entries = spec
        .index_map()
        .iter()
        .map(|&(l, _)| {
            let l = l as f64;
            (kappa * kappa + l * (l + 1.0)).powf(nu + 1.0)
        })
        .collect();
    Ok(MaternPriorDiagonal { nu, kappa, entries })
}

/// Evaluates the basis at each direction; row `i` holds `φ_k(p_i)`.
pub fn eval_sh_basis(directions: &[[f64; 3]], spec: &ShBasisSpec) -> Result<DMatrix<f64>> {
    let k = spec.len();
    let mut out = DMatrix::zeros(directions.len(), k);
    let mut row = vec![0.0; k];
    for (i, p) in directions.iter().enumerate() {
        eval_direction(p, spec, &mut row)?;
        for (j, v) in row.iter().enumerate() {
            out[(i, j)] = *v;
        }
    }
    Ok(out)
}

/// Evaluates the basis at a single direction into `out` (length K).
pub fn eval_direction(p: &[f64; 3], spec: &ShBasisSpec, out: &mut [f64]) -> Result<()> {
    let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "direction {p:?} has norm {norm}, expected unit length"
        )));
    }
    if out.len() != spec.len() {
        return Err(Error::Shape(format!(
            "output buffer has length {}, basis size is {}",
            out.len(),
            spec.len()
        )));
    }
    // Even-degree harmonics are antipodally symmetric; evaluating on a fixed
    // hemisphere makes φ(p) and φ(−p) bit-identical.
    let [x, y, z] = canonical_hemisphere(*p);
    let cos_theta = z.clamp(-1.0, 1.0);
    let sin_theta = (x * x + y * y).sqrt();
    let phi = y.atan2(x);

    let lmax = spec.lmax();
    let legendre = normalized_legendre_table(lmax, cos_theta, sin_theta);
    let sqrt2 = std::f64::consts::SQRT_2;
    for (j, &(l, m)) in spec.index_map().iter().enumerate() {
        let am = m.unsigned_abs() as usize;
        let q = legendre[l * (lmax + 1) + am];
        out[j] = match m.cmp(&0) {
            std::cmp::Ordering::Equal => q,
            std::cmp::Ordering::Less => sqrt2 * q * (am as f64 * phi).cos(),
            std::cmp::Ordering::Greater => sqrt2 * q * (am as f64 * phi).sin(),
        };
    }
    Ok(())
}

fn canonical_hemisphere(p: [f64; 3]) -> [f64; 3] {
    let flip = if p[2] != 0.0 {
        p[2] < 0.0
    } else if p[1] != 0.0 {
        p[1] < 0.0
    } else {
        p[0] < 0.0
    };
    if flip {
        [-p[0], -p[1], -p[2]]
    } else {
        p
    }
}

/// Table of `N_lm · P_l^m(x)` (Condon–Shortley phase included) for
/// `0 ≤ m ≤ l ≤ lmax`, laid out as `table[l * (lmax + 1) + m]`.
fn normalized_legendre_table(lmax: usize, x: f64, s: f64) -> Vec<f64> {
    let stride = lmax + 1;
    let mut t = vec![0.0; stride * stride];
    t[0] = 1.0 / (4.0 * PI).sqrt();
    for m in 1..=lmax {
        let mf = m as f64;
        t[m * stride + m] = -((2.0 * mf + 1.0) / (2.0 * mf)).sqrt() * s * t[(m - 1) * stride + m - 1];
    }
    for m in 0..lmax {
        t[(m + 1) * stride + m] = x * (2.0 * m as f64 + 3.0).sqrt() * t[m * stride + m];
    }
    for m in 0..=lmax {
        let mf = m as f64;
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let a = ((4.0 * lf * lf - 1.0) / (lf * lf - mf * mf)).sqrt();
            let b = (((lf - 1.0) * (lf - 1.0) - mf * mf) / (4.0 * (lf - 1.0) * (lf - 1.0) - 1.0)).sqrt();
            t[l * stride + m] = a * (x * t[(l - 1) * stride + m] - b * t[(l - 2) * stride + m]);
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: [f64; 3]) -> [f64; 3] {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    }

    #[test]
    fn basis_size_and_ordering() {
        let spec = ShBasisSpec::new(8).unwrap();
        assert_eq!(spec.len(), 45);
        assert_eq!(spec.index_map()[0], (0, 0));
        assert_eq!(spec.index_map()[1], (2, -2));
        assert_eq!(spec.index_map()[5], (2, 2));
        assert_eq!(spec.index_map()[44], (8, 8));
        for (k, &(l, m)) in spec.index_map().iter().enumerate() {
            assert_eq!(spec.index_of(l, m), Some(k));
        }
        assert_eq!(spec.index_of(3, 0), None);
        assert!(ShBasisSpec::new(7).is_err());
    }

    #[test]
    fn zeroth_harmonic_is_constant() {
        let spec = ShBasisSpec::new(8).unwrap();
        let dirs = [unit([1.0, 2.0, 3.0]), [0.0, 0.0, 1.0], unit([-1.0, 0.5, -0.2])];
        let phi = eval_sh_basis(&dirs, &spec).unwrap();
        for i in 0..3 {
            assert!((phi[(i, 0)] - 0.28209479177387814).abs() < 1e-12);
        }
    }

    #[test]
    fn degree_two_matches_closed_forms() {
        let spec = ShBasisSpec::new(2).unwrap();
        let p = unit([0.3, -0.4, 0.7]);
        let phi = eval_sh_basis(&[p], &spec).unwrap();
        let [x, y, z] = p;
        let y20 = (5.0 / (16.0 * PI)).sqrt() * (3.0 * z * z - 1.0);
        // √2·Im(Y_2^1) with Condon–Shortley: −sqrt(15/4π)·y·z
        let y21 = -(15.0 / (4.0 * PI)).sqrt() * y * z;
        // √2·Re(Y_2^1): −sqrt(15/4π)·x·z
        let y2m1 = -(15.0 / (4.0 * PI)).sqrt() * x * z;
        // √2·Re(Y_2^2): sqrt(15/16π)·(x² − y²)
        let y2m2 = (15.0 / (16.0 * PI)).sqrt() * (x * x - y * y);
        // √2·Im(Y_2^2): sqrt(15/4π)·x·y
        let y22 = (15.0 / (4.0 * PI)).sqrt() * x * y;
        let expected = [1.0 / (2.0 * PI.sqrt()), y2m2, y2m1, y20, y21, y22];
        for (k, e) in expected.iter().enumerate() {
            assert!((phi[(0, k)] - e).abs() < 1e-12, "k={k}: {} vs {e}", phi[(0, k)]);
        }
    }

    #[test]
    fn shape_for_seventy_directions() {
        let spec = ShBasisSpec::new(8).unwrap();
        let dirs: Vec<[f64; 3]> = (0..70)
            .map(|i| {
                let t = i as f64 * 0.37;
                unit([t.cos(), t.sin(), 0.5 + (i as f64 / 70.0)])
            })
            .collect();
        let phi = eval_sh_basis(&dirs, &spec).unwrap();
        assert_eq!(phi.shape(), (70, 45));
    }

    #[test]
    fn rejects_non_unit_direction() {
        let spec = ShBasisSpec::new(4).unwrap();
        assert!(matches!(
            eval_sh_basis(&[[0.0, 0.0, 2.0]], &spec),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn legendre_values() {
        assert_eq!(legendre_at_zero(0).unwrap(), 1.0);
        assert!((legendre_at_zero(2).unwrap() + 0.5).abs() < 1e-15);
        assert!((legendre_at_zero(4).unwrap() - 0.375).abs() < 1e-15);
        assert!((legendre_at_zero(6).unwrap() + 0.3125).abs() < 1e-15);
        assert!(legendre_at_zero(3).is_err());
    }

    #[test]
    fn frt_entries() {
        let spec = ShBasisSpec::new(8).unwrap();
        let frt = frt_matrix(&spec);
        assert_eq!(frt.len(), 45);
        assert!((frt.entries()[0] - 0.15915494309189535).abs() < 1e-14);
        assert!((frt.entries()[1] + 1.0 / PI).abs() < 1e-14);
        for l in (0..=8).step_by(2) {
            let block: Vec<f64> = (0..45)
                .filter(|&k| spec.degree(k) == l)
                .map(|k| frt.entries()[k])
                .collect();
            assert!(block.iter().all(|v| *v == block[0]));
            let expected_sign = if (l / 2) % 2 == 0 { 1.0 } else { -1.0 };
            assert_eq!(block[0].signum(), expected_sign, "degree {l}");
        }
    }

    #[test]
    fn matern_entries() {
        let spec = ShBasisSpec::new(8).unwrap();
        let r = matern_prior_matrix(1.0, 1.0, &spec).unwrap();
        assert_eq!(r.entries()[0], 1.0);
        assert_eq!(r.entries()[spec.index_of(2, 0).unwrap()], 49.0);
        let r0 = matern_prior_matrix(1.0, 0.0, &spec).unwrap();
        assert_eq!(r0.entries()[0], 0.0);
        assert_eq!(r0.entries()[spec.index_of(2, 1).unwrap()], 36.0);
        assert_eq!(r0.entries()[spec.index_of(8, 0).unwrap()], (8.0f64 * 9.0).powi(2));
        let mut last = -1.0;
        for l in (0..=8).step_by(2) {
            let v = r.entries()[spec.index_of(l, 0).unwrap()];
            assert!(v > last);
            last = v;
        }
        assert!(matern_prior_matrix(0.0, 1.0, &spec).is_err());
        assert!(matern_prior_matrix(1.0, -1.0, &spec).is_err());
    }
}
