//! The coefficient-field network `c(v) = W · ξ_θ(v)`.
//!
//! In grid-hash mode `ξ_θ(v) = head(encode(v))`; in global mode the raw
//! coordinate feeds the head directly. The head output width is the
//! spatial-basis rank `r`, and `W` is `K × r`.
//!
//! Batched activations are stored feature-major: one column per point.

pub mod checkpoint;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::{HashGridConfig, HashGridState, NormalizedCoord};
use crate::error::{Error, Result};
use crate::sh_basis::{FrtDiagonal, ShBasisSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sine,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpHeadConfig {
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub omega0: f64,
}

impl MlpHeadConfig {
    pub fn sine(depth: usize, width: usize) -> Self {
        Self {
            depth,
            width,
            activation: Activation::Sine,
            omega0: 30.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 {
            return Err(Error::Config(format!(
                "MLP head needs depth and width ≥ 1, got {}×{}",
                self.depth, self.width
            )));
        }
        if self.activation == Activation::Sine && !(self.omega0 > 0.0) {
            return Err(Error::Config(format!(
                "sine frequency must be positive, got {}",
                self.omega0
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `None` selects the global mode (raw coordinates into the head).
    pub encoding: Option<HashGridConfig>,
    pub head: MlpHeadConfig,
    pub lmax: usize,
}

impl ModelConfig {
    /// Grid-hash encoder (14 levels) with a 2×64 sine head.
    pub fn hashenc_default(finest_extent: usize) -> Self {
        Self {
            encoding: Some(HashGridConfig::default_for_extent(finest_extent)),
            head: MlpHeadConfig::sine(2, 64),
            lmax: 8,
        }
    }

    /// Grid-hash encoder (4 levels, 8 features) with a 3×128 sine head.
    pub fn hashenc_optimized() -> Self {
        Self {
            encoding: Some(HashGridConfig::optimized()),
            head: MlpHeadConfig::sine(3, 128),
            lmax: 8,
        }
    }

    /// Global 10×1024 sine network.
    pub fn siren_baseline() -> Self {
        Self {
            encoding: None,
            head: MlpHeadConfig::sine(10, 1024),
            lmax: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(e) = &self.encoding {
            e.validate()?;
        }
        self.head.validate()?;
        ShBasisSpec::new(self.lmax)?;
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.encoding.as_ref().map_or(3, HashGridConfig::output_width)
    }

    pub fn rank(&self) -> usize {
        self.head.width
    }

    pub fn n_coeffs(&self) -> usize {
        ShBasisSpec::size_for(self.lmax)
    }
}

/// Fully connected layer; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: DMatrix::zeros(fan_out, fan_in),
            bias: DVector::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn affine(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weight * x;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldModel {
    config: ModelConfig,
    pub encoder: Option<HashGridState>,
    pub layers: Vec<Dense>,
    /// `K × r` output layer.
    pub w: DMatrix<f64>,
}

/// Intermediate values of a batched forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Head input, `in × B`.
    pub input: DMatrix<f64>,
    /// Pre-activations per head layer, including the `ω0` factor on the first sine layer.
    pub pre: Vec<DMatrix<f64>>,
    /// Activations per head layer; the last one is the spatial basis `Ξ` (`r × B`).
    pub acts: Vec<DMatrix<f64>>,
    /// Coefficients `W Ξ`, `K × B`.
    pub coeffs: DMatrix<f64>,
}

impl ForwardCache {
    pub fn basis(&self) -> &DMatrix<f64> {
        self.acts.last().expect("head has at least one layer")
    }
}

impl FieldModel {
    /// A model with every parameter zero (tables included).
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = config
            .encoding
            .clone()
            .map(HashGridState::zeros)
            .transpose()?;
        let mut layers = Vec::with_capacity(config.head.depth);
        let mut fan_in = config.input_width();
        for _ in 0..config.head.depth {
            layers.push(Dense::zeros(fan_in, config.head.width));
            fan_in = config.head.width;
        }
        let w = DMatrix::zeros(config.n_coeffs(), config.rank());
        Ok(Self {
            config,
            encoder,
            layers,
            w,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_coeffs(&self) -> usize {
        self.w.nrows()
    }

    pub fn parameter_count(&self) -> usize {
        self.encoder.as_ref().map_or(0, HashGridState::parameter_count)
            + self.head_parameter_count()
            + self.w.len()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.layers.iter().map(Dense::parameter_count).sum()
    }

    /// Upper bound on parameters a single point reads: 8 corners per level
    /// plus the full head and `W`.
    pub fn parameters_touched_per_point(&self) -> usize {
        let table = self.config.encoding.as_ref().map_or(0, |e| {
            8 * e.n_levels * e.features_per_entry
        });
        table + self.head_parameter_count() + self.w.len()
    }

    fn check_shapes(&self) -> Result<()> {
        let mut fan_in = self.config.input_width();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.fan_in() != fan_in || layer.bias.len() != layer.fan_out() {
                return Err(Error::Config(format!(
                    "head layer {i} is {}×{}, expected input width {fan_in}",
                    layer.fan_out(),
                    layer.fan_in()
                )));
            }
            fan_in = layer.fan_out();
        }
        if self.w.ncols() != fan_in || self.w.nrows() != self.config.n_coeffs() {
            return Err(Error::Config(format!(
                "output layer is {}×{}, expected {}×{fan_in}",
                self.w.nrows(),
                self.w.ncols(),
                self.config.n_coeffs()
            )));
        }
        Ok(())
    }

    /// Head input for each coordinate, `in × B`.
    pub fn head_input(&self, coords: &[NormalizedCoord]) -> DMatrix<f64> {
        match &self.encoder {
            Some(enc) => {
                let width = enc.output_width();
                let mut out = DMatrix::zeros(width, coords.len());
                for (j, v) in coords.iter().enumerate() {
                    enc.encode_into(v, out.column_mut(j).as_mut_slice());
                }
                out
            }
            None => DMatrix::from_fn(3, coords.len(), |i, j| coords[j].get()[i]),
        }
    }

    fn activate(&self, layer_index: usize, z: &mut DMatrix<f64>) {
        match self.config.head.activation {
            Activation::Sine => {
                if layer_index == 0 {
                    *z *= self.config.head.omega0;
                }
                z.apply(|x| *x = x.sin());
            }
            Activation::Relu => z.apply(|x| *x = x.max(0.0)),
        }
    }

    /// Forward pass keeping what backpropagation needs.
    pub fn forward_cached(&self, coords: &[NormalizedCoord]) -> Result<ForwardCache> {
        self.check_shapes()?;
        let input = self.head_input(coords);
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<DMatrix<f64>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(acts.last().unwrap_or(&input));
            if self.config.head.activation == Activation::Sine && i == 0 {
                z *= self.config.head.omega0;
            }
            let mut a = z.clone();
            match self.config.head.activation {
                Activation::Sine => a.apply(|v| *v = v.sin()),
                Activation::Relu => a.apply(|v| *v = v.max(0.0)),
            }
            pre.push(z);
            acts.push(a);
        }
        let coeffs = &self.w * acts.last().expect("head has at least one layer");
        Ok(ForwardCache {
            input,
            pre,
            acts,
            coeffs,
        })
    }

    /// Spatial basis `ξ_θ(v)` as an `r × B` matrix (one column per point).
    pub fn basis_columns(&self, coords: &[NormalizedCoord]) -> Result<DMatrix<f64>> {
        self.check_shapes()?;
        let mut x = self.head_input(coords);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.affine(&x);
            self.activate(i, &mut z);
            x = z;
        }
        Ok(x)
    }

    /// Spatial basis, one row per point (`B × r`).
    pub fn spatial_basis(&self, coords: &[NormalizedCoord]) -> Result<DMatrix<f64>> {
        Ok(self.basis_columns(coords)?.transpose())
    }

    /// ODF coefficients `K × B` (one column per point).
    pub fn coefficient_columns(&self, coords: &[NormalizedCoord]) -> Result<DMatrix<f64>> {
        Ok(&self.w * self.basis_columns(coords)?)
    }

    /// ODF coefficients, one row per point (`B × K`).
    pub fn coefficients(&self, coords: &[NormalizedCoord]) -> Result<DMatrix<f64>> {
        Ok(self.coefficient_columns(coords)?.transpose())
    }

    /// Coefficients for a large point set, evaluated in chunks.
    pub fn coefficients_chunked(&self, coords: &[NormalizedCoord], chunk: usize) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.n_coeffs(), coords.len());
        for (c, part) in coords.chunks(chunk.max(1)).enumerate() {
            let block = self.coefficient_columns(part)?;
            out.columns_mut(c * chunk.max(1), part.len()).copy_from(&block);
        }
        Ok(out)
    }
}

/// Predicted signal `Φ·G·c` for each row of `coeffs` (`B × K` → `B × M`).
pub fn predict_signal(coeffs: &DMatrix<f64>, phi: &DMatrix<f64>, frt: &FrtDiagonal) -> Result<DMatrix<f64>> {
    if coeffs.ncols() != phi.ncols() {
        return Err(Error::Shape(format!(
            "coefficients have {} columns, basis matrix has {}",
            coeffs.ncols(),
            phi.ncols()
        )));
    }
    let phi_g = frt.right_apply(phi)?;
    Ok(coeffs * phi_g.transpose())
}

/// Randomly initialized model, reproducible from `seed`.
///
/// Sine heads use the SIREN scheme: first-layer weights uniform in
/// `±1/fan_in`, deeper weights in `±√(6/fan_in)/ω0`. ReLU heads use He-uniform
/// `±√(6/fan_in)`. Biases are uniform in `±1/√fan_in`. `W` follows the deeper
/// sine rule with `fan_in = r`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<FieldModel> {
    let mut model = FieldModel::zeros(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if let Some(enc) = &config.encoding {
        model.encoder = Some(HashGridState::new(enc.clone(), &mut rng)?);
    }
    let omega0 = config.head.omega0;
    for (i, layer) in model.layers.iter_mut().enumerate() {
        let fan_in = layer.fan_in() as f64;
        let bound = match (config.head.activation, i) {
            (Activation::Sine, 0) => 1.0 / fan_in,
            (Activation::Sine, _) => (6.0 / fan_in).sqrt() / omega0,
            (Activation::Relu, _) => (6.0 / fan_in).sqrt(),
        };
        fill_uniform(layer.weight.as_mut_slice(), bound, &mut rng);
        fill_uniform(layer.bias.as_mut_slice(), 1.0 / fan_in.sqrt(), &mut rng);
    }
    let bound = (6.0 / model.rank() as f64).sqrt() / omega0;
    fill_uniform(model.w.as_mut_slice(), bound, &mut rng);
    Ok(model)
}

fn fill_uniform<R: Rng>(xs: &mut [f64], bound: f64, rng: &mut R) {
    for x in xs {
        *x = rng.random_range(-bound..=bound);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh_basis::{eval_sh_basis, frt_matrix};
    use crate::sphere::hemisphere_directions;

    fn grid_coords(n: usize) -> Vec<NormalizedCoord> {
        let mut out = Vec::new();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    out.push(NormalizedCoord::voxel_center([x, y, z], [n, n, n]));
                }
            }
        }
        out
    }

    #[test]
    fn zero_sine_head_gives_zero_basis() {
        let model = FieldModel::zeros(ModelConfig::hashenc_default(32)).unwrap();
        let b = model.spatial_basis(&grid_coords(3)).unwrap();
        assert_eq!(b.shape(), (27, 64));
        assert!(b.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn default_shapes() {
        let model = init_model(&ModelConfig::hashenc_default(224), 1).unwrap();
        assert_eq!(model.config().input_width(), 31);
        assert_eq!(model.rank(), 64);
        let c = model.coefficients(&grid_coords(2)).unwrap();
        assert_eq!(c.shape(), (8, 45));
    }

    #[test]
    fn forward_is_deterministic_and_linear_in_w() {
        let mut model = init_model(&ModelConfig::hashenc_default(32), 7).unwrap();
        let coords = grid_coords(4);
        let a = model.coefficients(&coords).unwrap();
        let b = model.coefficients(&coords).unwrap();
        assert_eq!(a, b);
        model.w *= 2.0;
        let c = model.coefficients(&coords).unwrap();
        for (x, y) in a.iter().zip(c.iter()) {
            assert_eq!(2.0 * x, *y);
        }
        model.w.fill(0.0);
        assert!(model.coefficients(&coords).unwrap().iter().all(|x| *x == 0.0));
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ModelConfig::hashenc_default(32);
        let a = init_model(&cfg, 11).unwrap();
        let b = init_model(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = init_model(&cfg, 12).unwrap();
        assert_ne!(a.w, c.w);
        let bound = 1.0 / 31.0;
        assert!(a.layers[0].weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn fresh_model_outputs_are_small() {
        let model = init_model(&ModelConfig::hashenc_default(32), 2024).unwrap();
        let c = model.coefficients(&grid_coords(10)).unwrap();
        assert_eq!(c.nrows(), 1000);
        assert!(c.iter().all(|x| x.is_finite() && x.abs() < 10.0));
    }

    #[test]
    fn isotropic_coefficients_give_constant_signal() {
        let spec = ShBasisSpec::new(8).unwrap();
        let dirs = hemisphere_directions(70);
        let phi = eval_sh_basis(&dirs, &spec).unwrap();
        let frt = frt_matrix(&spec);
        let mut c = DMatrix::zeros(1, 45);
        c[(0, 0)] = 3.0;
        let s = predict_signal(&c, &phi, &frt).unwrap();
        assert_eq!(s.shape(), (1, 70));
        let expected = 3.0 / (2.0 * std::f64::consts::PI) / (2.0 * std::f64::consts::PI.sqrt());
        for v in s.iter() {
            assert!((v - expected).abs() < 1e-14);
        }
        let zero = predict_signal(&DMatrix::zeros(2, 45), &phi, &frt).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        assert!(predict_signal(&DMatrix::zeros(2, 44), &phi, &frt).is_err());
    }

    #[test]
    fn global_mode_has_same_contract() {
        let cfg = ModelConfig {
            encoding: None,
            head: MlpHeadConfig::sine(3, 16),
            lmax: 8,
        };
        let model = init_model(&cfg, 5).unwrap();
        let c = model.coefficients(&grid_coords(2)).unwrap();
        assert_eq!(c.shape(), (8, 45));
        assert_eq!(model.spatial_basis(&grid_coords(2)).unwrap().ncols(), 16);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut model = init_model(&ModelConfig::hashenc_default(32), 5).unwrap();
        model.w = DMatrix::zeros(45, 10);
        assert!(matches!(model.coefficients(&grid_coords(1)), Err(Error::Config(_))));
    }

    #[test]
    fn per_point_touch_is_a_tiny_fraction() {
        let model = init_model(&ModelConfig::hashenc_default(224), 0).unwrap();
        let touched = model.parameters_touched_per_point();
        assert_eq!(touched, 8 * 14 * 2 + model.head_parameter_count() + 45 * 64);
        assert!((touched as f64) < 1e-3 * model.parameter_count() as f64);
    }

    #[test]
    fn relu_head_runs() {
        let cfg = ModelConfig {
            encoding: Some(HashGridConfig::default_for_extent(32)),
            head: MlpHeadConfig {
                depth: 2,
                width: 32,
                activation: Activation::Relu,
                omega0: 30.0,
            },
            lmax: 4,
        };
        let model = init_model(&cfg, 3).unwrap();
        let c = model.coefficients(&grid_coords(3)).unwrap();
        assert_eq!(c.shape(), (27, 15));
        assert!(c.iter().all(|x| x.is_finite()));
    }
}
