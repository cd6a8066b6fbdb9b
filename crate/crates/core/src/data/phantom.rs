//! Synthetic multi-tensor phantoms with basis-exact ground truth.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::nifti::identity;
use crate::data::shls::shls_coefficients;
use crate::data::{voxel_position, CoefficientVolume, DwiVolume, GradientTable};
use crate::error::{Error, Result};
use crate::sh_basis::ShBasisSpec;
use crate::sphere::{hemisphere_directions, normalize, sphere_directions};

/// Directions used to build the noiseless ground truth.
pub const TRUTH_DIRECTIONS: usize = 256;

/// One cylindrically symmetric tensor with a mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Compartment {
    pub axis: [f64; 3],
    /// Diffusivity along the axis (mm²/s).
    pub lambda_par: f64,
    /// Diffusivity across the axis (mm²/s).
    pub lambda_perp: f64,
    pub weight: f64,
}

impl Compartment {
    pub fn fiber(axis: [f64; 3], weight: f64) -> Self {
        Self {
            axis,
            lambda_par: 1.7e-3,
            lambda_perp: 0.3e-3,
            weight,
        }
    }

    pub fn isotropic(d: f64) -> Self {
        Self {
            axis: [0.0, 0.0, 1.0],
            lambda_par: d,
            lambda_perp: d,
            weight: 1.0,
        }
    }

    /// `exp(-b gᵀ D g)` for a unit gradient `g`.
    pub fn attenuation(&self, g: [f64; 3], b: f64) -> f64 {
        let a = normalize(self.axis);
        let c = g[0] * a[0] + g[1] * a[1] + g[2] * a[2];
        (-b * (self.lambda_perp + (self.lambda_par - self.lambda_perp) * c * c)).exp()
    }

    pub fn is_anisotropic(&self) -> bool {
        self.lambda_par != self.lambda_perp
    }
}

/// Axis-aligned box in normalized coordinates `[lo, hi)` containing voxel centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub compartments: Vec<Compartment>,
}

impl Region {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Regions are tested in order; the first containing a voxel wins.
    pub regions: Vec<Region>,
    pub background: Vec<Compartment>,
    pub n_directions: usize,
    pub b_value: f64,
    /// Mean signal over noise standard deviation; `inf` is noiseless.
    pub snr: f64,
    pub seed: u64,
    pub lmax: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::crossing(32, 20.0, 0)
    }
}

impl PhantomSpec {
    /// Cube of side `n`: an x-fiber slab, a y-fiber slab crossing it, a small
    /// z-fiber bundle, and isotropic background.
    pub fn crossing(n: usize, snr: f64, seed: u64) -> Self {
        let x = Compartment::fiber([1.0, 0.0, 0.0], 1.0);
        let y = Compartment::fiber([0.0, 1.0, 0.0], 1.0);
        let half = |c: &Compartment| Compartment { weight: 0.5, ..c.clone() };
        Self {
            dims: [n; 3],
            regions: vec![
                Region {
                    name: "crossing".into(),
                    lo: [0.5, 0.25, 0.0],
                    hi: [0.75, 0.5, 1.0],
                    compartments: vec![half(&x), half(&y)],
                },
                Region {
                    name: "fiber-x".into(),
                    lo: [0.0, 0.25, 0.0],
                    hi: [1.0, 0.5, 1.0],
                    compartments: vec![x],
                },
                Region {
                    name: "fiber-y".into(),
                    lo: [0.5, 0.0, 0.0],
                    hi: [0.75, 1.0, 1.0],
                    compartments: vec![y],
                },
                Region {
                    name: "fiber-z".into(),
                    lo: [0.125, 0.625, 0.0],
                    hi: [0.25, 0.875, 1.0],
                    compartments: vec![Compartment::fiber([0.0, 0.0, 1.0], 1.0)],
                },
            ],
            background: vec![Compartment::isotropic(0.7e-3)],
            n_directions: 70,
            b_value: 1000.0,
            snr,
            seed,
            lmax: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("phantom dims {:?} must be positive", self.dims)));
        }
        if !(self.snr > 0.0) {
            return Err(Error::Config(format!("snr must be positive, got {}", self.snr)));
        }
        if !(self.b_value > 0.0 && self.b_value.is_finite()) {
            return Err(Error::Config(format!("b_value must be positive, got {}", self.b_value)));
        }
        ShBasisSpec::new(self.lmax)?;
        let all = self
            .regions
            .iter()
            .map(|r| (r.name.as_str(), r.compartments.as_slice()))
            .chain(std::iter::once(("background", self.background.as_slice())));
        for (name, comps) in all {
            if comps.is_empty() {
                return Err(Error::Config(format!("region {name} has no compartments")));
            }
            let total: f64 = comps.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 || comps.iter().any(|c| c.weight < 0.0) {
                return Err(Error::Config(format!("region {name}: weights must be >= 0 and sum to 1, got {total}")));
            }
            for c in comps {
                if !(c.lambda_par > 0.0 && c.lambda_perp > 0.0) {
                    return Err(Error::Config(format!(
                        "region {name}: tensor eigenvalues ({}, {}) are not positive",
                        c.lambda_par, c.lambda_perp
                    )));
                }
                let n = (c.axis.iter().map(|a| a * a).sum::<f64>()).sqrt();
                if !(n > 0.0 && n.is_finite()) {
                    return Err(Error::Config(format!("region {name}: axis {:?} is degenerate", c.axis)));
                }
            }
        }
        Ok(())
    }

    pub fn gradients(&self) -> Result<GradientTable> {
        GradientTable::new(hemisphere_directions(self.n_directions), self.b_value)
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub spec: PhantomSpec,
    /// Noisy acquisition (mask covers every voxel).
    pub dwi: DwiVolume,
    /// Noise-free acquisition on the same directions.
    pub noiseless: DwiVolume,
    /// ODF coefficients fitted to the noiseless signal on a dense sphere.
    pub truth: CoefficientVolume,
    /// Region index per voxel; `None` is background.
    pub labels: Vec<Option<usize>>,
    pub noise_sigma: f64,
}

impl Phantom {
    /// Compartments present at a voxel.
    pub fn compartments(&self, voxel: usize) -> &[Compartment] {
        match self.labels[voxel] {
            Some(r) => &self.spec.regions[r].compartments,
            None => &self.spec.background,
        }
    }

    /// Fiber axis of voxels containing exactly one anisotropic compartment.
    pub fn single_fiber_axis(&self, voxel: usize) -> Option<[f64; 3]> {
        let comps = self.compartments(voxel);
        match comps {
            [c] if c.is_anisotropic() => Some(normalize(c.axis)),
            _ => None,
        }
    }
}

fn signal_for(comps: &[Compartment], dirs: &[[f64; 3]], b: f64) -> Vec<f64> {
    dirs.iter()
        .map(|&g| comps.iter().map(|c| c.weight * c.attenuation(g, b)).sum())
        .collect()
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let dims = spec.dims;
    let n: usize = dims.iter().product();
    let table = spec.gradients()?;
    let dirs = table.directions().to_vec();
    let sh = ShBasisSpec::new(spec.lmax)?;
    let dense = sphere_directions(TRUTH_DIRECTIONS);

    // per-region signal and truth, shared by every voxel of the region
    let groups: Vec<&[Compartment]> = spec
        .regions
        .iter()
        .map(|r| r.compartments.as_slice())
        .chain(std::iter::once(spec.background.as_slice()))
        .collect();
    let signals: Vec<Vec<f64>> = groups.iter().map(|c| signal_for(c, &dirs, spec.b_value)).collect();
    let dense_signal = DMatrix::from_fn(dense.len(), groups.len(), |i, j| {
        groups[j].iter().map(|c| c.weight * c.attenuation(dense[i], spec.b_value)).sum()
    });
    let truth_cols = shls_coefficients(&dense, &dense_signal, &sh, 0.0)?;

    let labels: Vec<Option<usize>> = (0..n)
        .map(|v| {
            let p = voxel_position(v, dims);
            let c = [0, 1, 2].map(|a| (p[a] as f64 + 0.5) / dims[a] as f64);
            spec.regions.iter().position(|r| r.contains(c))
        })
        .collect();
    let group_of = |v: usize| labels[v].unwrap_or(spec.regions.len());

    let m = dirs.len();
    let mut clean = vec![0.0; n * m];
    for v in 0..n {
        let s = &signals[group_of(v)];
        for d in 0..m {
            clean[v + d * n] = s[d];
        }
    }
    let mean_signal = clean.iter().sum::<f64>() / clean.len() as f64;
    let noise_sigma = if spec.snr.is_infinite() { 0.0 } else { mean_signal / spec.snr };
    let mut noisy = clean.clone();
    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        for s in noisy.iter_mut() {
            // clamp keeps the rare negative draw inside the non-negative signal domain
            *s = (*s + normal.sample(&mut rng)).max(0.0);
        }
    }

    let mut truth = CoefficientVolume::zeros(dims, spec.lmax);
    for v in 0..n {
        truth.voxel_mut(v).copy_from_slice(truth_cols.column(group_of(v)).as_slice());
    }
    let mask = vec![true; n];
    let affine = identity();
    Ok(Phantom {
        spec: spec.clone(),
        dwi: DwiVolume::new(dims, noisy, table.clone(), mask.clone(), [1.0; 3], affine)?,
        noiseless: DwiVolume::new(dims, clean, table, mask, [1.0; 3], affine)?,
        truth,
        labels,
        noise_sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_a_seed() {
        let spec = PhantomSpec::crossing(8, 20.0, 5);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.dwi, b.dwi);
        let c = generate_phantom(&PhantomSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.dwi, c.dwi);
    }

    #[test]
    fn noise_statistics_match_the_spec() {
        let spec = PhantomSpec::crossing(32, 20.0, 1);
        let p = generate_phantom(&spec).unwrap();
        let clean = p.noiseless.signal();
        let noisy = p.dwi.signal();
        let mean = clean.iter().sum::<f64>() / clean.len() as f64;
        let resid: Vec<f64> = noisy.iter().zip(clean).map(|(a, b)| a - b).collect();
        let var = resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64;
        let noisy_mean = noisy.iter().sum::<f64>() / noisy.len() as f64;
        assert!((noisy_mean / mean - 1.0).abs() < 0.1);
        assert!((var.sqrt() / (mean / 20.0) - 1.0).abs() < 0.1);
    }

    #[test]
    fn labels_follow_the_layout() {
        let p = generate_phantom(&PhantomSpec::crossing(32, f64::INFINITY, 0)).unwrap();
        let name = |v: [usize; 3]| p.labels[crate::data::voxel_index(v, [32; 3])].map(|r| p.spec.regions[r].name.as_str());
        assert_eq!(name([20, 10, 3]), Some("crossing"));
        assert_eq!(name([2, 10, 3]), Some("fiber-x"));
        assert_eq!(name([20, 2, 3]), Some("fiber-y"));
        assert_eq!(name([5, 22, 3]), Some("fiber-z"));
        assert_eq!(name([30, 30, 30]), None);
        assert_eq!(p.noise_sigma, 0.0);
        assert_eq!(p.dwi, p.noiseless);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = PhantomSpec::crossing(8, 20.0, 0);
        s.regions[0].compartments[0].weight = 0.9;
        assert!(matches!(generate_phantom(&s), Err(Error::Config(_))));
        let mut s = PhantomSpec::crossing(8, 20.0, 0);
        s.background[0].lambda_perp = -1e-3;
        assert!(matches!(generate_phantom(&s), Err(Error::Config(_))));
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let s = PhantomSpec::crossing(16, 40.0, 2);
        let text = toml::to_string(&s).unwrap();
        let back: PhantomSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
        assert!(toml::from_str::<PhantomSpec>(&format!("{text}\nbogus = 1\n")).is_err());
    }
}
