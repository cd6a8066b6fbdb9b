//! Fitting the coefficient field to observed signals.
//!
//! The objective is the MAP form of the Gaussian model:
//!
//! ```text
//!   L = (1/B) Σ_i ‖y_i − ΦG·W·ξ(v_i)‖² + λ_c Σ_j w_jᵀ R_γ w_j
//! ```
//!
//! with `w_j` the columns of `W`. Gradients are exact reverse-mode
//! derivatives, accumulated chunk by chunk so large batches stay within
//! memory. Optimization is Adam with one learning rate for the hash tables
//! and one for the head and `W`.

use std::path::PathBuf;
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::NormalizedCoord;
use crate::error::{Error, Result};
use crate::field_model::checkpoint::{self, Checkpoint};
use crate::field_model::{init_model, Activation, Dense, FieldModel, ModelConfig};
use crate::sh_basis::{FrtDiagonal, MaternPriorDiagonal};

/// Default candidate sweep for the coefficient-penalty strength.
pub const LAMBDA_C_CANDIDATES: [f64; 3] = [1e-7, 1e-6, 1e-5];

/// Decade sweep covering the default one and the strongly penalized range.
pub const LAMBDA_C_EXTENDED: [f64; 7] = [1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_head: f64,
    pub lr_tables: f64,
    /// Learning rate for models without a grid encoder.
    pub lr_global_siren: f64,
    pub lambda_c: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub shuffle: bool,
    /// Drop the final short batch of each epoch.
    pub drop_last: bool,
    /// Points per forward/backward chunk inside a batch. Does not change the math.
    pub chunk_size: usize,
    /// Where to write the model if training diverges.
    pub dump_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            batch_size: 65_536,
            lr_head: 1e-3,
            lr_tables: 1e-2,
            lr_global_siren: 1e-6,
            lambda_c: 1e-6,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shuffle: true,
            drop_last: false,
            chunk_size: 4096,
            dump_path: None,
        }
    }
}

impl TrainConfig {
    /// Protocol for the global 10×1024 sine baseline.
    pub fn siren_baseline() -> Self {
        Self {
            epochs: 10_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.epochs < 1 || self.chunk_size < 1 {
            return Err(Error::Config("epochs, batch size and chunk size must be ≥ 1".into()));
        }
        for (name, lr) in [
            ("lr_head", self.lr_head),
            ("lr_tables", self.lr_tables),
            ("lr_global_siren", self.lr_global_siren),
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.lambda_c >= 0.0) {
            return Err(Error::Config(format!("lambda_c must be ≥ 0, got {}", self.lambda_c)));
        }
        Ok(())
    }
}

/// One observed voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub coord: NormalizedCoord,
    pub signal: Vec<f64>,
}

/// Masked voxels with their signals, stored as an `M × N` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    coords: Vec<NormalizedCoord>,
    signals: DMatrix<f64>,
}

impl Dataset {
    pub fn new(coords: Vec<NormalizedCoord>, signals: DMatrix<f64>) -> Result<Self> {
        if coords.len() != signals.ncols() {
            return Err(Error::Shape(format!(
                "{} coordinates but {} signal columns",
                coords.len(),
                signals.ncols()
            )));
        }
        if let Some(i) = signals.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite signal value in sample {}",
                i / signals.nrows().max(1)
            )));
        }
        Ok(Self { coords, signals })
    }

    pub fn from_samples(samples: &[TrainingSample]) -> Result<Self> {
        let m = samples.first().map_or(0, |s| s.signal.len());
        if samples.iter().any(|s| s.signal.len() != m) {
            return Err(Error::Shape("samples have differing signal lengths".into()));
        }
        let signals = DMatrix::from_fn(m, samples.len(), |i, j| samples[j].signal[i]);
        Self::new(samples.iter().map(|s| s.coord).collect(), signals)
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn n_directions(&self) -> usize {
        self.signals.nrows()
    }

    pub fn coords(&self) -> &[NormalizedCoord] {
        &self.coords
    }

    /// `M × N` signal matrix.
    pub fn signals(&self) -> &DMatrix<f64> {
        &self.signals
    }

    pub fn sample(&self, i: usize) -> TrainingSample {
        TrainingSample {
            coord: self.coords[i],
            signal: self.signals.column(i).iter().copied().collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            coords: indices.iter().map(|&i| self.coords[i]).collect(),
            signals: self.signals.select_columns(indices),
        }
    }

    /// Same voxels restricted to the listed gradient directions.
    pub fn select_directions(&self, rows: &[usize]) -> Self {
        Self {
            coords: self.coords.clone(),
            signals: self.signals.select_rows(rows),
        }
    }
}

/// Fixed pieces of the objective: `ΦG`, the prior penalty and its weight.
#[derive(Debug, Clone)]
pub struct Objective {
    phi_g: DMatrix<f64>,
    prior: MaternPriorDiagonal,
    lambda_c: f64,
}

impl Objective {
    pub fn new(phi: &DMatrix<f64>, frt: &FrtDiagonal, prior: MaternPriorDiagonal, lambda_c: f64) -> Result<Self> {
        if prior.len() != frt.len() {
            return Err(Error::Shape(format!(
                "prior has {} entries, basis has {}",
                prior.len(),
                frt.len()
            )));
        }
        Ok(Self {
            phi_g: frt.right_apply(phi)?,
            prior,
            lambda_c,
        })
    }

    pub fn phi_g(&self) -> &DMatrix<f64> {
        &self.phi_g
    }

    pub fn prior(&self) -> &MaternPriorDiagonal {
        &self.prior
    }

    pub fn lambda_c(&self) -> f64 {
        self.lambda_c
    }

    pub fn with_lambda_c(&self, lambda_c: f64) -> Self {
        Self {
            lambda_c,
            ..self.clone()
        }
    }

    /// `Σ_j w_jᵀ R w_j` (without `λ_c`).
    pub fn penalty(&self, w: &DMatrix<f64>) -> f64 {
        w.column_iter()
            .map(|col| self.prior.quadratic_form(col.iter().copied()))
            .sum()
    }

    fn check(&self, model: &FieldModel, data: &Dataset) -> Result<()> {
        if self.phi_g.ncols() != model.n_coeffs() {
            return Err(Error::Shape(format!(
                "model has {} coefficients, basis has {}",
                model.n_coeffs(),
                self.phi_g.ncols()
            )));
        }
        if self.phi_g.nrows() != data.n_directions() {
            return Err(Error::Shape(format!(
                "data has {} directions, basis has {}",
                data.n_directions(),
                self.phi_g.nrows()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub data: f64,
    /// `λ_c Σ_j w_jᵀ R w_j`.
    pub penalty: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.data + self.penalty
    }
}

/// Gradients shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Dense per-level buffers; only entries touched by the batch are nonzero.
    pub tables: Vec<Vec<f64>>,
    pub layers: Vec<Dense>,
    pub w: DMatrix<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &FieldModel) -> Self {
        Self {
            tables: model
                .encoder
                .as_ref()
                .map(|e| e.tables().iter().map(|t| vec![0.0; t.len()]).collect())
                .unwrap_or_default(),
            layers: model
                .layers
                .iter()
                .map(|l| Dense::zeros(l.fan_in(), l.fan_out()))
                .collect(),
            w: DMatrix::zeros(model.w.nrows(), model.w.ncols()),
        }
    }

    /// Entries with a nonzero table gradient, per level.
    /// Gradient entries in the parameter order of [`checkpoint::flatten`].
    pub fn flatten(&self, model: &FieldModel) -> Vec<f64> {
        let mut shaped = model.clone();
        if let Some(enc) = &mut shaped.encoder {
            for (t, g) in enc.tables_mut().iter_mut().zip(&self.tables) {
                t.copy_from_slice(g);
            }
        }
        shaped.layers = self.layers.clone();
        shaped.w = self.w.clone();
        checkpoint::flatten(&shaped)
    }

    pub fn touched_table_entries(&self, features_per_entry: usize) -> usize {
        self.tables
            .iter()
            .map(|t| {
                t.chunks(features_per_entry)
                    .filter(|e| e.iter().any(|g| *g != 0.0))
                    .count()
            })
            .sum()
    }
}

fn batch_columns(data: &Dataset, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if let Some(&i) = batch.iter().find(|&&i| i >= data.len()) {
        return Err(Error::OutOfRange {
            index: i,
            limit: data.len(),
        });
    }
    Ok(())
}

fn check_finite(terms: LossTerms) -> Result<LossTerms> {
    if terms.data.is_finite() && terms.penalty.is_finite() {
        Ok(terms)
    } else {
        Err(Error::Numeric(format!(
            "objective is not finite (data {}, penalty {})",
            terms.data, terms.penalty
        )))
    }
}

/// Objective value on the samples `batch` of `data`.
pub fn loss(model: &FieldModel, data: &Dataset, batch: &[usize], objective: &Objective) -> Result<LossTerms> {
    objective.check(model, data)?;
    batch_columns(data, batch)?;
    let mut sq = 0.0;
    for chunk in batch.chunks(4096) {
        let coords: Vec<NormalizedCoord> = chunk.iter().map(|&i| data.coords[i]).collect();
        let coeffs = model.coefficient_columns(&coords)?;
        let pred = &objective.phi_g * coeffs;
        for (j, &i) in chunk.iter().enumerate() {
            sq += (pred.column(j) - data.signals.column(i)).norm_squared();
        }
    }
    check_finite(LossTerms {
        data: sq / batch.len() as f64,
        penalty: objective.lambda_c * objective.penalty(&model.w),
    })
}

/// Objective value and its exact gradient on the samples `batch`.
pub fn backward(
    model: &FieldModel,
    data: &Dataset,
    batch: &[usize],
    objective: &Objective,
    chunk_size: usize,
) -> Result<(LossTerms, Gradients)> {
    objective.check(model, data)?;
    batch_columns(data, batch)?;
    let mut grads = Gradients::zeros_like(model);
    let scale = 2.0 / batch.len() as f64;
    let mut sq = 0.0;
    let sine = model.config().head.activation == Activation::Sine;
    let omega0 = model.config().head.omega0;

    for chunk in batch.chunks(chunk_size.max(1)) {
        let coords: Vec<NormalizedCoord> = chunk.iter().map(|&i| data.coords[i]).collect();
        let cache = model.forward_cached(&coords)?;
        let mut resid = &objective.phi_g * &cache.coeffs;
        for (j, &i) in chunk.iter().enumerate() {
            let mut col = resid.column_mut(j);
            col -= data.signals.column(i);
            sq += col.norm_squared();
        }
        resid *= scale;
        let d_coeffs = objective.phi_g.tr_mul(&resid);
        grads.w += &d_coeffs * cache.basis().transpose();
        let mut d_act = model.w.tr_mul(&d_coeffs);

        for l in (0..model.layers.len()).rev() {
            let z = &cache.pre[l];
            let mut dz = d_act;
            if sine {
                dz.zip_apply(z, |g, zv| *g *= zv.cos());
                if l == 0 {
                    dz *= omega0;
                }
            } else {
                dz.zip_apply(z, |g, zv| {
                    if zv <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            let x = if l == 0 { &cache.input } else { &cache.acts[l - 1] };
            grads.layers[l].weight += &dz * x.transpose();
            grads.layers[l].bias += dz.column_sum();
            d_act = model.layers[l].weight.tr_mul(&dz);
        }

        if let Some(enc) = &model.encoder {
            for (j, v) in coords.iter().enumerate() {
                enc.accumulate_gradient(v, d_act.column(j).as_slice(), &mut grads.tables);
            }
        }
    }

    if objective.lambda_c > 0.0 {
        let r = objective.prior.entries();
        for (k, mut row) in grads.w.row_iter_mut().enumerate() {
            for (g, w) in row.iter_mut().zip(model.w.row(k).iter()) {
                *g += 2.0 * objective.lambda_c * r[k] * w;
            }
        }
    }

    let terms = check_finite(LossTerms {
        data: sq / batch.len() as f64,
        penalty: objective.lambda_c * objective.penalty(&model.w),
    })?;
    Ok((terms, grads))
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam with separate learning rates for hash tables and for head + `W`.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    lr_tables: f64,
    lr_rest: f64,
    step: i32,
    tables: Vec<Moments>,
    layers: Vec<(Moments, Moments)>,
    w: Moments,
}

impl Adam {
    pub fn new(model: &FieldModel, cfg: &TrainConfig) -> Self {
        let lr_rest = if model.encoder.is_some() {
            cfg.lr_head
        } else {
            cfg.lr_global_siren
        };
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            lr_tables: cfg.lr_tables,
            lr_rest,
            step: 0,
            tables: model
                .encoder
                .as_ref()
                .map(|e| e.tables().iter().map(|t| Moments::new(t.len())).collect())
                .unwrap_or_default(),
            layers: model
                .layers
                .iter()
                .map(|l| (Moments::new(l.weight.len()), Moments::new(l.bias.len())))
                .collect(),
            w: Moments::new(model.w.len()),
        }
    }

    pub fn apply(&mut self, model: &mut FieldModel, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let update = |p: &mut [f64], g: &[f64], mo: &mut Moments, lr: f64| {
            for i in 0..p.len() {
                let gi = g[i];
                let m = b1 * mo.m[i] + (1.0 - b1) * gi;
                let v = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
                mo.m[i] = m;
                mo.v[i] = v;
                if m != 0.0 {
                    p[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                }
            }
        };
        if let Some(enc) = &mut model.encoder {
            for ((t, g), mo) in enc.tables_mut().iter_mut().zip(&grads.tables).zip(&mut self.tables) {
                update(t, g, mo, self.lr_tables);
            }
        }
        for ((layer, g), (mw, mb)) in model.layers.iter_mut().zip(&grads.layers).zip(&mut self.layers) {
            update(layer.weight.as_mut_slice(), g.weight.as_slice(), mw, self.lr_rest);
            update(layer.bias.as_mut_slice(), g.bias.as_slice(), mb, self.lr_rest);
        }
        update(model.w.as_mut_slice(), grads.w.as_slice(), &mut self.w, self.lr_rest);
    }
}

/// Per-epoch progress record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch data terms seen during the epoch.
    pub data_term: f64,
    /// Penalty term at the end of the epoch.
    pub penalty_term: f64,
    /// Wall-clock seconds since training started.
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FieldModel,
    pub history: Vec<EpochRecord>,
}

/// Runs Adam for `cfg.epochs` full passes over `data`.
///
/// `on_epoch` sees each record and the current model (for logging or periodic
/// checkpoints).
pub fn train(
    data: &Dataset,
    mut model: FieldModel,
    objective: &Objective,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &FieldModel),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    objective.check(&model, data)?;
    let objective = objective.with_lambda_c(cfg.lambda_c);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(&model, cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let start = Instant::now();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            if cfg.drop_last && batch.len() < cfg.batch_size && seen > 0 {
                break;
            }
            let (terms, grads) = match backward(&model, data, batch, &objective, cfg.chunk_size) {
                Ok(v) => v,
                Err(Error::Numeric(msg)) => {
                    return Err(diverged(&model, cfg, epoch, f64::NAN, f64::NAN, &msg));
                }
                Err(e) => return Err(e),
            };
            adam.apply(&mut model, &grads);
            weighted += terms.data * batch.len() as f64;
            seen += batch.len();
        }
        let record = EpochRecord {
            epoch,
            data_term: weighted / seen as f64,
            penalty_term: objective.lambda_c * objective.penalty(&model.w),
            seconds: start.elapsed().as_secs_f64(),
        };
        if !record.data_term.is_finite() || !record.penalty_term.is_finite() {
            return Err(diverged(&model, cfg, epoch, record.data_term, record.penalty_term, "non-finite loss"));
        }
        on_epoch(&record, &model);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

fn diverged(model: &FieldModel, cfg: &TrainConfig, epoch: usize, data_term: f64, penalty_term: f64, why: &str) -> Error {
    warn!("training diverged at epoch {epoch}: {why}");
    let dump = cfg.dump_path.as_ref().and_then(|path| {
        let ckpt = Checkpoint {
            model: model.clone(),
            grid: None,
        };
        match ckpt.save(path) {
            Ok(()) => Some(path.clone()),
            Err(e) => {
                warn!("could not write divergence dump: {e}");
                None
            }
        }
    });
    Error::Diverged {
        epoch,
        data_term,
        penalty_term,
        dump,
    }
}

/// Residual sum of squares of the model over the whole dataset.
pub fn residual_sum_of_squares(model: &FieldModel, data: &Dataset, objective: &Objective) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    Ok(loss(model, data, &all, objective)?.data * data.len() as f64)
}

/// Measurement-noise variance `RSS / (N·M − dof)` with `dof = K·r` (the
/// number of entries of `W`), capped at half the observation count.
/// Floors at `1e-12`.
pub fn estimate_sigma_e(model: &FieldModel, data: &Dataset, objective: &Objective) -> Result<f64> {
    let rss = residual_sum_of_squares(model, data, objective)?;
    let n_obs = (data.len() * data.n_directions()) as f64;
    let dof = ((model.n_coeffs() * model.rank()) as f64).min(0.5 * n_obs);
    Ok((rss / (n_obs - dof)).max(1e-12))
}

/// Prior variance of `W` by moments: `vec(W)ᵀ (I ⊗ R) vec(W) / (K·r)`. Floors at `1e-12`.
pub fn estimate_sigma_w(model: &FieldModel, prior: &MaternPriorDiagonal) -> f64 {
    let pen: f64 = model
        .w
        .column_iter()
        .map(|c| prior.quadratic_form(c.iter().copied()))
        .sum();
    (pen / model.w.len() as f64).max(1e-12)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaScore {
    pub lambda_c: f64,
    /// Held-out predictive MSE, `None` if training failed.
    pub heldout_mse: Option<f64>,
    /// Penalty term `λ_c Σ w_jᵀ R w_j` of the fitted model.
    pub penalty_term: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LambdaSelection {
    pub best: f64,
    pub scores: Vec<LambdaScore>,
}

/// Every `stride`-th gradient direction is held out for scoring.
pub const HELDOUT_STRIDE: usize = 5;

/// Grid search for `λ_c`: one model per candidate, trained on the
/// non-held-out directions of `data` and scored by predictive MSE on the
/// held-out ones. Ties go to the smaller value.
pub fn select_lambda_c(
    data: &Dataset,
    model_config: &ModelConfig,
    phi: &DMatrix<f64>,
    frt: &FrtDiagonal,
    prior: &MaternPriorDiagonal,
    candidates: &[f64],
    budget: &TrainConfig,
) -> Result<LambdaSelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidInput("no λ_c candidates".into()));
    }
    if candidates.len() == 1 {
        return Ok(LambdaSelection {
            best: candidates[0],
            scores: vec![LambdaScore {
                lambda_c: candidates[0],
                heldout_mse: None,
                penalty_term: None,
            }],
        });
    }
    let m = data.n_directions();
    let (held, kept): (Vec<usize>, Vec<usize>) = (0..m).partition(|i| i % HELDOUT_STRIDE == HELDOUT_STRIDE - 1);
    if held.is_empty() || kept.is_empty() {
        return Err(Error::InvalidInput(format!("too few directions ({m}) to hold any out")));
    }
    let train_set = data.select_directions(&kept);
    let test_set = data.select_directions(&held);
    let train_obj = Objective::new(&phi.select_rows(&kept), frt, prior.clone(), 0.0)?;
    let test_obj = Objective::new(&phi.select_rows(&held), frt, prior.clone(), 0.0)?;

    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut scores = Vec::with_capacity(sorted.len());
    for &lambda_c in &sorted {
        let cfg = TrainConfig {
            lambda_c,
            ..budget.clone()
        };
        let fitted = init_model(model_config, budget.seed)
            .and_then(|m0| train(&train_set, m0, &train_obj, &cfg, |_, _| {}));
        match fitted {
            Ok(out) => {
                let all: Vec<usize> = (0..test_set.len()).collect();
                let mse = loss(&out.model, &test_set, &all, &test_obj)?.data / held.len() as f64;
                let pen = lambda_c * train_obj.penalty(&out.model.w);
                info!("λ_c = {lambda_c:e}: held-out MSE {mse:.6e}");
                scores.push(LambdaScore {
                    lambda_c,
                    heldout_mse: Some(mse),
                    penalty_term: Some(pen),
                });
            }
            Err(e) => {
                warn!("λ_c = {lambda_c:e} skipped: {e}");
                scores.push(LambdaScore {
                    lambda_c,
                    heldout_mse: None,
                    penalty_term: None,
                });
            }
        }
    }
    let best = scores
        .iter()
        .filter_map(|s| s.heldout_mse.map(|m| (s.lambda_c, m)))
        .fold(None, |acc: Option<(f64, f64)>, (l, m)| match acc {
            Some((_, bm)) if m >= bm => acc,
            _ => Some((l, m)),
        })
        .ok_or_else(|| Error::Numeric("training failed for every λ_c candidate".into()))?
        .0;
    Ok(LambdaSelection { best, scores })
}
