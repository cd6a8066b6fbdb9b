//! Timing harness for training throughput, inference latency and posterior cost.
//!
//! Every timed kernel first passes a correctness gate; a failed gate aborts
//! the benchmark with [`Error::Numeric`]. All computation here is
//! single-threaded, so the recorded thread count is always 1.

use std::collections::BTreeMap;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::NormalizedCoord;
use crate::error::{Error, Result};
use crate::field_model::checkpoint::{flatten, unflatten};
use crate::field_model::{init_model, FieldModel, ModelConfig};
use crate::posterior::{assemble_precision, PosteriorModel, SufficientStats};
use crate::sh_basis::{eval_sh_basis, frt_matrix, matern_prior_matrix, ShBasisSpec};
use crate::sphere::hemisphere_directions;
use crate::training::{backward, loss, train, Dataset, Objective, TrainConfig};

/// Smallest number of timed runs behind a median.
pub const MIN_RUNS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineInfo {
    pub cpu_model: String,
    pub logical_cpus: usize,
    pub os: String,
    pub arch: String,
}

impl MachineInfo {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|m| m.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu_model,
            logical_cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

/// Peak resident set size of this process in KiB, where the OS reports it.
pub fn peak_rss_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find(|l| l.starts_with("VmHWM:"))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    /// Wall-clock seconds of each warm run.
    pub runs: Vec<f64>,
    pub median_seconds: f64,
    /// Trainable parameters read or written per evaluated point, if meaningful.
    pub params_touched_per_point: Option<usize>,
    pub peak_rss_kib: Option<u64>,
    pub threads: usize,
    pub machine: MachineInfo,
    /// Scenario-specific figures (throughput, extrapolation factors, ...).
    pub extra: BTreeMap<String, f64>,
}

impl BenchReport {
    fn new(scenario: impl Into<String>, runs: Vec<f64>) -> Self {
        Self {
            scenario: scenario.into(),
            median_seconds: median(&runs),
            runs,
            params_touched_per_point: None,
            peak_rss_kib: peak_rss_kib(),
            threads: 1,
            machine: MachineInfo::detect(),
            extra: BTreeMap::new(),
        }
    }

    /// One line per report, for terminal summaries.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: median {:.4} s over {} runs",
            self.scenario,
            self.median_seconds,
            self.runs.len()
        );
        for (k, v) in &self.extra {
            s.push_str(&format!(", {k} {v:.4}"));
        }
        s
    }
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One untimed warm-up run, then `runs` timed ones.
pub fn time_runs<T>(runs: usize, mut f: impl FnMut() -> Result<T>) -> Result<Vec<f64>> {
    f()?;
    (0..runs.max(MIN_RUNS))
        .map(|_| {
            let t = Instant::now();
            f()?;
            Ok(t.elapsed().as_secs_f64())
        })
        .collect()
}

/// Largest relative error between analytic and central-difference gradients
/// over every parameter of `model` on a small random problem.
pub fn gradient_check(model: &FieldModel, seed: u64) -> Result<f64> {
    let spec = ShBasisSpec::new(model.config().lmax)?;
    let dirs = hemisphere_directions(spec.len() + 4);
    let phi = eval_sh_basis(&dirs, &spec)?;
    let prior = matern_prior_matrix(1.0, 0.0, &spec)?;
    let obj = Objective::new(&phi, &frt_matrix(&spec), prior, 1e-3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let coords = (0..n)
        .map(|_| NormalizedCoord::new([rng.random(), rng.random(), rng.random()]))
        .collect::<Result<Vec<_>>>()?;
    let y = DMatrix::from_fn(dirs.len(), n, |_, _| rng.random_range(0.0..1.0));
    let data = Dataset::new(coords, y)?;
    let batch: Vec<usize> = (0..n).collect();
    let (_, grads) = backward(model, &data, &batch, &obj, n)?;
    let analytic = grads.flatten(model);
    let theta = flatten(model);
    let h = 1e-6;
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut t = theta.clone();
        t[i] += h;
        unflatten(&mut probe, &t);
        let up = loss(&probe, &data, &batch, &obj)?.total();
        t[i] -= 2.0 * h;
        unflatten(&mut probe, &t);
        let down = loss(&probe, &data, &batch, &obj)?.total();
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
    }
    Ok(worst)
}

/// Training throughput of two profiles on the same data and batch size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputComparison {
    pub a: BenchReport,
    pub b: BenchReport,
    /// Voxels per second of `a` over those of `b`.
    pub ratio: f64,
}

/// Times one training epoch per run for each profile.
pub fn bench_train_epoch(
    (name_a, config_a): (&str, &ModelConfig),
    (name_b, config_b): (&str, &ModelConfig),
    data: &Dataset,
    objective: &Objective,
    cfg: &TrainConfig,
    runs: usize,
) -> Result<ThroughputComparison> {
    let epoch_cfg = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    let one = |name: &str, config: &ModelConfig| -> Result<BenchReport> {
        gate_training(config)?;
        let model = init_model(config, cfg.seed)?;
        let times = time_runs(runs, || train(data, model.clone(), objective, &epoch_cfg, |_, _| {}))?;
        let mut r = BenchReport::new(format!("train-epoch/{name}"), times);
        r.params_touched_per_point = Some(model.parameters_touched_per_point());
        r.extra.insert("voxels_per_second".into(), data.len() as f64 / r.median_seconds);
        r.extra.insert("batch_size".into(), cfg.batch_size.min(data.len()) as f64);
        Ok(r)
    };
    let a = one(name_a, config_a)?;
    let b = one(name_b, config_b)?;
    let ratio = b.median_seconds / a.median_seconds;
    Ok(ThroughputComparison { a, b, ratio })
}

/// Gradient check on a model of the same kind, shrunk to a checkable size.
fn gate_training(config: &ModelConfig) -> Result<()> {
    let mut tiny = config.clone();
    tiny.lmax = 2;
    tiny.head.depth = tiny.head.depth.min(2);
    tiny.head.width = tiny.head.width.min(8);
    if let Some(enc) = tiny.encoding.as_mut() {
        enc.n_levels = enc.n_levels.min(2);
        enc.base_resolution = enc.base_resolution.min(3);
        enc.log2_table_size = enc.log2_table_size.min(6);
        enc.features_per_entry = enc.features_per_entry.min(2);
    }
    let err = gradient_check(&init_model(&tiny, 7)?, 11)?;
    if !(err < 1e-4) {
        return Err(Error::Numeric(format!("gradient gate failed: relative error {err:e}")));
    }
    Ok(())
}

/// Inference latency over `coords`.
///
/// When `max_points` is below the coordinate count, only that many points are
/// timed and the median is scaled linearly to the full set; the factor is
/// recorded as `extrapolation`.
pub fn bench_inference(
    name: &str,
    model: &FieldModel,
    coords: &[NormalizedCoord],
    chunk: usize,
    max_points: Option<usize>,
    runs: usize,
) -> Result<BenchReport> {
    if coords.is_empty() {
        return Err(Error::InvalidInput("no coordinates to evaluate".into()));
    }
    let gate: Vec<NormalizedCoord> = coords.iter().step_by((coords.len() / 64).max(1)).copied().collect();
    let whole = model.coefficient_columns(&gate)?;
    let parts = model.coefficients_chunked(&gate, 7)?;
    if (&whole - &parts).amax() > 1e-12 * whole.amax().max(1.0) {
        return Err(Error::Numeric("chunked inference disagrees with a single pass".into()));
    }
    let n = max_points.map_or(coords.len(), |m| m.clamp(1, coords.len()));
    let timed = &coords[..n];
    let times = time_runs(runs, || model.coefficients_chunked(timed, chunk))?;
    let factor = coords.len() as f64 / n as f64;
    let mut r = BenchReport::new(format!("infer/{name}"), times.iter().map(|t| t * factor).collect());
    r.params_touched_per_point = Some(model.parameters_touched_per_point());
    r.extra.insert("points".into(), coords.len() as f64);
    r.extra.insert("extrapolation".into(), factor);
    Ok(r)
}

/// Posterior mean and marginal variances on a random problem of rank `r`.
pub fn bench_posterior(ranks: &[usize], n_points: usize, n_directions: usize, runs: usize, seed: u64) -> Result<Vec<BenchReport>> {
    gate_posterior(seed)?;
    let spec = ShBasisSpec::new(8)?;
    let phi = eval_sh_basis(&hemisphere_directions(n_directions), &spec)?;
    let phi_g = frt_matrix(&spec).right_apply(&phi)?;
    let prior = matern_prior_matrix(1.0, 0.0, &spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = DMatrix::from_fn(n_directions, n_points, |_, _| rng.random_range(0.0..1.0));
    ranks
        .iter()
        .map(|&r| {
            let xi = DMatrix::from_fn(r, n_points, |_, _| rng.random_range(-1.0..1.0));
            let stats = SufficientStats::from_basis(&xi, &y)?;
            let times = time_runs(runs, || {
                let post = PosteriorModel::fit(&stats, &phi_g, &prior, 0.01, 1.0)?;
                Ok(post.marginal_variances())
            })?;
            let mut rep = BenchReport::new(format!("posterior/r={r}"), times);
            rep.extra.insert("rank".into(), r as f64);
            rep.params_touched_per_point = Some(spec.len() * r);
            Ok(rep)
        })
        .collect()
}

/// Block solver against a dense solve on a small problem.
fn gate_posterior(seed: u64) -> Result<()> {
    let spec = ShBasisSpec::new(2)?;
    let (n, r, m) = (5, 3, 8);
    let phi = eval_sh_basis(&hemisphere_directions(m), &spec)?;
    let phi_g = frt_matrix(&spec).right_apply(&phi)?;
    let prior = matern_prior_matrix(1.0, 0.5, &spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xi = DMatrix::from_fn(r, n, |_, _| rng.random_range(-1.0..1.0));
    let y = DMatrix::from_fn(m, n, |_, _| rng.random_range(0.0..1.0));
    let stats = SufficientStats::from_basis(&xi, &y)?;
    let (se2, sw2) = (0.2, 1.5);
    let post = PosteriorModel::fit(&stats, &phi_g, &prior, se2, sw2)?;
    let dense = assemble_precision(&stats.gram, &phi_g, &prior, se2, sw2)?;
    let rhs = DVector::from_column_slice((phi_g.tr_mul(&stats.cross) / se2).as_slice());
    let chol = dense
        .cholesky()
        .ok_or_else(|| Error::Numeric("dense precision is not positive definite".into()))?;
    let mean = chol.solve(&rhs);
    let var = chol.inverse().diagonal();
    let rel = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        d / b.iter().map(|x| x * x).sum::<f64>().sqrt()
    };
    let e_mean = rel(post.mean_vec().as_slice(), mean.as_slice());
    let e_var = rel(post.marginal_variances().as_slice(), var.as_slice());
    if !(e_mean < 1e-8 && e_var < 1e-8) {
        return Err(Error::Numeric(format!(
            "posterior gate failed: mean error {e_mean:e}, variance error {e_var:e}"
        )));
    }
    Ok(())
}
