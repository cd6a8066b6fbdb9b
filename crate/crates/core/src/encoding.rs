//! Multiresolution grid-hash positional encoding.
//!
//! Each level `l` overlays a regular grid of resolution `N_l` on the unit
//! cube. A point gathers the feature vectors stored at the 8 corners of its
//! cell, blends them trilinearly, and the per-level blends are concatenated
//! coarse to fine. The normalized input coordinate is appended last when
//! `include_coords` is set.
//!
//! Corner lookup uses direct row-major indexing `x + (N+1)·(y + (N+1)·z)`
//! while the level grid fits in the table, and otherwise the spatial hash
//! `(x·1 ⊕ y·2654435761 ⊕ z·805459861) mod 2^m`. A directly indexed level
//! only allocates its `(N+1)³` reachable entries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const HASH_PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

/// Table initialization half-width: entries start uniform in `[−1e-4, 1e-4]`.
pub const TABLE_INIT_RANGE: f64 = 1e-4;

/// A coordinate in the unit cube `[0, 1]³`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedCoord([f64; 3]);

impl NormalizedCoord {
    pub fn new(v: [f64; 3]) -> Result<Self> {
        if v.iter().all(|c| (0.0..=1.0).contains(c)) {
            Ok(Self(v))
        } else {
            Err(Error::InvalidInput(format!("coordinate {v:?} outside the unit cube")))
        }
    }

    /// Center of voxel `index` in a grid of `dims`, mapped into the unit cube.
    pub fn voxel_center(index: [usize; 3], dims: [usize; 3]) -> Self {
        Self([
            (index[0] as f64 + 0.5) / dims[0] as f64,
            (index[1] as f64 + 0.5) / dims[1] as f64,
            (index[2] as f64 + 0.5) / dims[2] as f64,
        ])
    }

    pub fn get(&self) -> [f64; 3] {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashGridConfig {
    pub n_levels: usize,
    pub base_resolution: usize,
    pub level_scale: f64,
    pub features_per_entry: usize,
    pub log2_table_size: u32,
    pub include_coords: bool,
}

impl HashGridConfig {
    /// 14 levels from resolution 6, 2 features, 2^20 entries, finest level
    /// at the voxel pitch of a volume whose largest dimension is `finest`.
    pub fn default_for_extent(finest: usize) -> Self {
        Self {
            n_levels: 14,
            base_resolution: 6,
            level_scale: Self::scale_for_finest(6, 14, finest),
            features_per_entry: 2,
            log2_table_size: 20,
            include_coords: true,
        }
    }

    /// 4 levels from resolution 80 with growth 1.13 and 8 features.
    pub fn optimized() -> Self {
        Self {
            n_levels: 4,
            base_resolution: 80,
            level_scale: 1.13,
            features_per_entry: 8,
            log2_table_size: 20,
            include_coords: true,
        }
    }

    /// Growth factor that takes `base` to `finest` over `n_levels` levels.
    pub fn scale_for_finest(base: usize, n_levels: usize, finest: usize) -> f64 {
        if n_levels < 2 || finest <= base {
            return 2.0;
        }
        (finest as f64 / base as f64).powf(1.0 / (n_levels as f64 - 1.0))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_levels < 1 {
            return Err(Error::Config("hash grid needs at least one level".into()));
        }
        if self.base_resolution < 2 {
            return Err(Error::Config(format!(
                "base resolution must be at least 2, got {}",
                self.base_resolution
            )));
        }
        if !(self.level_scale > 1.0) || !self.level_scale.is_finite() {
            return Err(Error::Config(format!(
                "level scale must exceed 1, got {}",
                self.level_scale
            )));
        }
        if self.features_per_entry < 1 {
            return Err(Error::Config("features per entry must be at least 1".into()));
        }
        if !(1..=30).contains(&self.log2_table_size) {
            return Err(Error::Config(format!(
                "log2 table size must be in 1..=30, got {}",
                self.log2_table_size
            )));
        }
        Ok(())
    }

    /// Width of the encoded feature vector.
    pub fn output_width(&self) -> usize {
        self.n_levels * self.features_per_entry + if self.include_coords { 3 } else { 0 }
    }

    fn table_capacity(&self) -> usize {
        1usize << self.log2_table_size
    }
}

/// `floor(N_min · b^level)`.
pub fn level_resolution(level: usize, config: &HashGridConfig) -> Result<usize> {
    if level >= config.n_levels {
        return Err(Error::OutOfRange {
            index: level,
            limit: config.n_levels,
        });
    }
    let raw = config.base_resolution as f64 * config.level_scale.powi(level as i32);
    // Guard against b^l landing a hair under an integer it equals exactly.
    Ok((raw + 1e-9).floor() as usize)
}

fn uses_direct_indexing(resolution: usize, config: &HashGridConfig) -> bool {
    let side = resolution as u128 + 1;
    side * side * side <= config.table_capacity() as u128
}

fn index_with_resolution(coords: [u32; 3], resolution: usize, config: &HashGridConfig) -> usize {
    if uses_direct_indexing(resolution, config) {
        let side = resolution + 1;
        coords[0] as usize + side * (coords[1] as usize + side * coords[2] as usize)
    } else {
        let h = (coords[0] as u64).wrapping_mul(HASH_PRIMES[0])
            ^ (coords[1] as u64).wrapping_mul(HASH_PRIMES[1])
            ^ (coords[2] as u64).wrapping_mul(HASH_PRIMES[2]);
        (h & (config.table_capacity() as u64 - 1)) as usize
    }
}

/// Table slot of grid corner `coords` on `level`.
pub fn hash_index(coords: [u32; 3], level: usize, config: &HashGridConfig) -> Result<usize> {
    let resolution = level_resolution(level, config)?;
    if coords.iter().any(|&c| c as usize > resolution) {
        return Err(Error::InvalidInput(format!(
            "grid corner {coords:?} outside level resolution {resolution}"
        )));
    }
    Ok(index_with_resolution(coords, resolution, config))
}

/// One touched table entry and the gradient flowing into it.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryGradient {
    pub level: usize,
    pub index: usize,
    pub grad: Vec<f64>,
}

/// The 8 corner slots and trilinear weights of a point on one level.
pub type CellCorners = [(usize, f64); 8];

#[derive(Debug, Clone, PartialEq)]
pub struct HashGridState {
    config: HashGridConfig,
    resolutions: Vec<usize>,
    tables: Vec<Vec<f64>>,
}

impl HashGridState {
    pub fn new<R: Rng>(config: HashGridConfig, rng: &mut R) -> Result<Self> {
        let mut state = Self::zeros(config)?;
        for table in &mut state.tables {
            for x in table.iter_mut() {
                *x = rng.random_range(-TABLE_INIT_RANGE..=TABLE_INIT_RANGE);
            }
        }
        Ok(state)
    }

    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let resolutions = (0..config.n_levels)
            .map(|l| level_resolution(l, &config))
            .collect::<Result<Vec<_>>>()?;
        let tables = resolutions
            .iter()
            .map(|&n| {
                let entries = if uses_direct_indexing(n, &config) {
                    (n + 1).pow(3)
                } else {
                    config.table_capacity()
                };
                vec![0.0; entries * config.features_per_entry]
            })
            .collect();
        Ok(Self {
            config,
            resolutions,
            tables,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    pub fn resolutions(&self) -> &[usize] {
        &self.resolutions
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tables
    }

    pub fn parameter_count(&self) -> usize {
        self.tables.iter().map(Vec::len).sum()
    }

    pub fn output_width(&self) -> usize {
        self.config.output_width()
    }

    pub fn entry(&self, level: usize, index: usize) -> &[f64] {
        let f = self.config.features_per_entry;
        &self.tables[level][index * f..(index + 1) * f]
    }

    pub fn entry_mut(&mut self, level: usize, index: usize) -> &mut [f64] {
        let f = self.config.features_per_entry;
        &mut self.tables[level][index * f..(index + 1) * f]
    }

    /// Corner slots and trilinear weights of `v` on `level`.
    pub fn corners(&self, v: &NormalizedCoord, level: usize) -> CellCorners {
        let n = self.resolutions[level];
        let mut base = [0u32; 3];
        let mut frac = [0.0; 3];
        for d in 0..3 {
            let pos = v.0[d] * n as f64;
            let cell = (pos.floor() as usize).min(n - 1);
            base[d] = cell as u32;
            frac[d] = pos - cell as f64;
        }
        let mut out = [(0usize, 0.0f64); 8];
        for (c, slot) in out.iter_mut().enumerate() {
            let mut w = 1.0;
            let mut corner = base;
            for d in 0..3 {
                if c >> d & 1 == 1 {
                    corner[d] += 1;
                    w *= frac[d];
                } else {
                    w *= 1.0 - frac[d];
                }
            }
            *slot = (index_with_resolution(corner, n, &self.config), w);
        }
        out
    }

    /// Writes the encoding of `v` into `out` (length `output_width`).
    pub fn encode_into(&self, v: &NormalizedCoord, out: &mut [f64]) {
        self.encode_traced(v, out, |_, _| {});
    }

    /// As `encode_into`, calling `visit(level, index)` for every table read.
    pub fn encode_traced(
        &self,
        v: &NormalizedCoord,
        out: &mut [f64],
        mut visit: impl FnMut(usize, usize),
    ) {
        let f = self.config.features_per_entry;
        debug_assert_eq!(out.len(), self.output_width());
        for level in 0..self.config.n_levels {
            let block = &mut out[level * f..(level + 1) * f];
            block.iter_mut().for_each(|x| *x = 0.0);
            let table = &self.tables[level];
            for (index, w) in self.corners(v, level) {
                visit(level, index);
                let e = &table[index * f..(index + 1) * f];
                for (o, x) in block.iter_mut().zip(e) {
                    *o += w * x;
                }
            }
        }
        if self.config.include_coords {
            let off = self.config.n_levels * f;
            out[off..off + 3].copy_from_slice(&v.0);
        }
    }

    pub fn encode(&self, v: &NormalizedCoord) -> Vec<f64> {
        let mut out = vec![0.0; self.output_width()];
        self.encode_into(v, &mut out);
        out
    }

    /// Gradients of `⟨upstream, encode(v)⟩` with respect to every touched entry.
    ///
    /// Entries hit by more than one corner (hash collisions) are merged.
    pub fn encode_gradient(&self, v: &NormalizedCoord, upstream: &[f64]) -> Vec<EntryGradient> {
        let f = self.config.features_per_entry;
        let mut out: Vec<EntryGradient> = Vec::new();
        for level in 0..self.config.n_levels {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|g| *g == 0.0) {
                continue;
            }
            for (index, w) in self.corners(v, level) {
                if w == 0.0 {
                    continue;
                }
                let grad: Vec<f64> = up.iter().map(|g| g * w).collect();
                match out.iter_mut().find(|e| e.level == level && e.index == index) {
                    Some(e) => e.grad.iter_mut().zip(&grad).for_each(|(a, b)| *a += b),
                    None => out.push(EntryGradient { level, index, grad }),
                }
            }
        }
        out
    }

    /// Adds the gradient of `⟨upstream, encode(v)⟩` into dense per-level buffers
    /// shaped like `tables()`.
    pub fn accumulate_gradient(&self, v: &NormalizedCoord, upstream: &[f64], grads: &mut [Vec<f64>]) {
        let f = self.config.features_per_entry;
        for level in 0..self.config.n_levels {
            let up = &upstream[level * f..(level + 1) * f];
            let g = &mut grads[level];
            for (index, w) in self.corners(v, level) {
                for (slot, u) in g[index * f..(index + 1) * f].iter_mut().zip(up) {
                    *slot += w * u;
                }
            }
        }
    }
}
