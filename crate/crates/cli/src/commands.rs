//! Subcommand implementations.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::DMatrix;
use odfield::bench::{bench_inference, bench_posterior, bench_train_epoch, BenchReport, ThroughputComparison};
use odfield::data::{
    generate_phantom, load_dwi, load_nifti, load_gradients, save_gradients, save_nifti, shls_fit, voxel_position,
    CoefficientVolume, Datatype, DwiVolume, NiftiImage, PhantomSpec,
};
use odfield::encoding::NormalizedCoord;
use odfield::field_model::checkpoint::{Checkpoint, GridInfo};
use odfield::field_model::{init_model, FieldModel, ModelConfig};
use odfield::metrics::dti::dti_maps_from_coefficients;
use odfield::metrics::{fsim_volume_median, fsimc_volume_median, gfa, gfa_volume, FsimVolumeReport, ScalarVolume};
use odfield::posterior::{gfa_uncertainty_map, PosteriorModel, SufficientStats};
use odfield::sh_basis::{eval_sh_basis, frt_matrix, matern_prior_matrix, MaternPriorDiagonal, ShBasisSpec};
use odfield::training::{
    estimate_sigma_e, estimate_sigma_w, select_lambda_c, train, EpochRecord, Objective,
};
use odfield::Error;
use serde::Serialize;

use crate::config::{PriorConfig, Profile, ResolvedConfig, RunConfig};
use crate::{render, BenchScenario, Command, DwiArgs, MetricKind};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl CliError {
    /// 0 success, 1 usage, 2 data or format, 3 numeric failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 1,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Phantom {
            spec,
            out,
            seed,
            snr,
            size,
            force,
        } => cmd_phantom(spec.as_deref(), &out, seed, snr, size, force),
        Command::Train {
            config,
            data,
            out,
            profile,
            epochs,
            batch_size,
            lambda_c,
            select_lambda,
            seed,
            checkpoint_every,
            force,
        } => {
            let mut cfg = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            apply_train_flags(&mut cfg, profile, epochs, batch_size, lambda_c, select_lambda, seed);
            merge_paths(&mut cfg, &data, out);
            cmd_train(&cfg, checkpoint_every, force)
        }
        Command::FitShls {
            data,
            lambda,
            out,
            force,
        } => cmd_fit_shls(&data, lambda, &out, force),
        Command::Infer {
            checkpoint,
            out,
            upsample,
            dims,
            coords,
            chunk,
            force,
        } => cmd_infer(&checkpoint, &out, upsample, dims, coords.as_deref(), chunk, force),
        Command::Sample {
            checkpoint,
            data,
            n,
            seed,
            config,
            save_samples,
            out,
            force,
        } => cmd_sample(&checkpoint, &data, n, seed, config.as_deref(), save_samples, &out, force),
        Command::Metrics {
            reference,
            test,
            kind,
            bvec,
            bval,
            png,
            out,
            force,
        } => cmd_metrics(&reference, &test, kind, bvec.zip(bval), png, &out, force),
        Command::Bench {
            scenario,
            runs,
            phantom_size,
            grid,
            max_points,
            threads,
            out,
            force,
        } => cmd_bench(scenario, runs, phantom_size, grid, max_points, threads, &out, force),
    }
}

// ---------- shared helpers ----------

/// Refuses to replace existing outputs unless forced.
fn guard(paths: &[PathBuf], force: bool) -> CliResult<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            p.display()
        ))),
        None => Ok(()),
    }
}

fn make_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format("json", e.to_string()))?;
    write_text(path, &(text + "\n"))
}

/// Sidecar recording the resolved parameters of a run.
fn run_record(path: &Path, command: &str, params: &impl Serialize) -> CliResult<()> {
    #[derive(Serialize)]
    struct Record<'a, T: Serialize> {
        command: &'a str,
        version: &'a str,
        params: &'a T,
    }
    let text = toml::to_string_pretty(&Record {
        command,
        version: env!("CARGO_PKG_VERSION"),
        params,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    write_text(path, &text)
}

/// `out.nii.gz` → `out.run.toml`.
fn sidecar(out: &Path) -> PathBuf {
    let name = out.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let stem = name.trim_end_matches(".gz").trim_end_matches(".nii").trim_end_matches(".csv");
    out.with_file_name(format!("{stem}.run.toml"))
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing --{flag}")))
}

fn load_volume(data: &DwiArgs) -> CliResult<DwiVolume> {
    let dwi = require(&data.dwi, "dwi")?;
    let bvec = require(&data.bvec, "bvec")?;
    let bval = require(&data.bval, "bval")?;
    Ok(load_dwi(dwi, bvec, bval, data.mask.as_deref())?)
}

fn prior_for(prior: &PriorConfig, spec: &ShBasisSpec) -> CliResult<MaternPriorDiagonal> {
    Ok(matern_prior_matrix(prior.nu, prior.kappa, spec)?)
}

fn grid_of(dwi: &DwiVolume) -> GridInfo {
    GridInfo {
        dims: dwi.dims(),
        pixdim: dwi.voxel_size(),
        affine: dwi.affine(),
    }
}

// ---------- phantom ----------

fn cmd_phantom(
    spec_path: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    snr: Option<f64>,
    size: Option<usize>,
    force: bool,
) -> CliResult<()> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str::<PhantomSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => PhantomSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    if let Some(s) = snr {
        spec.snr = s;
    }
    if let Some(n) = size {
        spec.dims = [n; 3];
    }
    spec.validate()?;
    let files = ["dwi.nii.gz", "dwi.bvec", "dwi.bval", "mask.nii.gz", "truth.nii.gz", "labels.nii.gz", "phantom.toml"]
        .map(|f| out.join(f));
    guard(&files, force)?;
    make_dir(out)?;

    let t = Instant::now();
    let p = generate_phantom(&spec)?;
    save_nifti(&p.dwi.to_nifti(), &files[0])?;
    save_gradients(p.dwi.gradients(), &files[1], &files[2])?;
    let dims = p.dwi.dims();
    let as_image = |values: Vec<f64>| {
        let mut img = NiftiImage::new(dims.to_vec(), values, Datatype::Uint8);
        img.affine = p.dwi.affine();
        img.pixdim = p.dwi.voxel_size().to_vec();
        img
    };
    save_nifti(&as_image(p.dwi.mask().iter().map(|&m| m as u8 as f64).collect()), &files[3])?;
    save_nifti(&p.truth.to_nifti(), &files[4])?;
    save_nifti(&as_image(p.labels.iter().map(|l| l.map_or(0.0, |r| (r + 1) as f64)).collect()), &files[5])?;
    let text = toml::to_string_pretty(&spec).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&files[6], &format!("# noise sigma {:e}\n{text}", p.noise_sigma))?;
    info!(
        "phantom {dims:?} × {} directions written to {} in {:.1} s",
        p.dwi.n_directions(),
        out.display(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

// ---------- train ----------

fn apply_train_flags(
    cfg: &mut RunConfig,
    profile: Option<Profile>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lambda_c: Option<f64>,
    select_lambda: bool,
    seed: Option<u64>,
) {
    if let Some(p) = profile {
        cfg.profile = p;
    }
    if let Some(s) = seed {
        cfg.seed = s;
        if let Some(t) = cfg.train.as_mut() {
            t.remove("seed");
        }
    }
    let table = cfg.train.get_or_insert_with(toml::Table::new);
    if let Some(e) = epochs {
        table.insert("epochs".into(), toml::Value::Integer(e as i64));
    }
    if let Some(b) = batch_size {
        table.insert("batch_size".into(), toml::Value::Integer(b as i64));
    }
    if let Some(l) = lambda_c {
        table.insert("lambda_c".into(), toml::Value::Float(l));
    }
    if select_lambda {
        cfg.selection.enabled = true;
    }
}

fn merge_paths(cfg: &mut RunConfig, data: &DwiArgs, out: Option<PathBuf>) {
    let p = &mut cfg.paths;
    for (slot, flag) in [
        (&mut p.dwi, &data.dwi),
        (&mut p.bvec, &data.bvec),
        (&mut p.bval, &data.bval),
        (&mut p.mask, &data.mask),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    if out.is_some() {
        p.out = out;
    }
}

#[derive(Serialize)]
struct TrainSummary {
    profile: Profile,
    n_voxels: usize,
    n_directions: usize,
    epochs: usize,
    batch_size: usize,
    lambda_c: f64,
    wall_clock_seconds: f64,
    seconds_per_epoch: f64,
    final_data_term: f64,
    final_penalty_term: f64,
    parameters: usize,
    parameters_touched_per_point: usize,
    lambda_selection: Option<Vec<(f64, Option<f64>)>>,
}

fn cmd_train(cfg: &RunConfig, checkpoint_every: Option<usize>, force: bool) -> CliResult<()> {
    let out = require(&cfg.paths.out, "out")?.to_path_buf();
    let data_args = DwiArgs {
        dwi: cfg.paths.dwi.clone(),
        bvec: cfg.paths.bvec.clone(),
        bval: cfg.paths.bval.clone(),
        mask: cfg.paths.mask.clone(),
    };
    let files = ["model.ckpt", "loss.csv", "config.toml", "train.json"].map(|f| out.join(f));
    guard(&files, force)?;
    let dwi = load_volume(&data_args)?;
    let finest = *dwi.dims().iter().max().expect("3 dims");
    let mut resolved = cfg.resolve(finest)?;
    make_dir(&out)?;

    let (data, voxels) = dwi.dataset()?;
    let spec = ShBasisSpec::new(resolved.model.lmax)?;
    let phi = eval_sh_basis(dwi.gradients().directions(), &spec)?;
    let frt = frt_matrix(&spec);
    let prior = prior_for(&resolved.prior, &spec)?;

    let mut selection = None;
    if resolved.selection.enabled {
        let sel = &resolved.selection;
        if sel.slice_axis > 2 {
            return Err(CliError::Usage(format!("selection slice axis {} is not 0, 1 or 2", sel.slice_axis)));
        }
        let dims = dwi.dims();
        let slice: Vec<usize> = (0..data.len())
            .filter(|&i| voxel_position(voxels[i], dims)[sel.slice_axis] == dims[sel.slice_axis] / 2)
            .collect();
        if slice.is_empty() {
            return Err(Error::InvalidInput("central selection slice has no masked voxels".into()).into());
        }
        let budget = odfield::training::TrainConfig {
            epochs: sel.epochs,
            batch_size: sel.batch_size,
            ..resolved.train.clone()
        };
        info!("selecting λ_c on {} voxels over {:?}", slice.len(), sel.candidates);
        let result = select_lambda_c(&data.subset(&slice), &resolved.model, &phi, &frt, &prior, &sel.candidates, &budget)?;
        info!("selected λ_c = {:e}", result.best);
        resolved.train.lambda_c = result.best;
        selection = Some(result.scores.iter().map(|s| (s.lambda_c, s.heldout_mse)).collect());
    }
    write_text(&files[2], &resolved.to_toml()?)?;

    let objective = Objective::new(&phi, &frt, prior, resolved.train.lambda_c)?;
    let model = init_model(&resolved.model, resolved.seed)?;
    let grid = grid_of(&dwi);
    let epochs = resolved.train.epochs;
    let log_every = (epochs / 20).max(1);
    let mut periodic_error = None;
    let start = Instant::now();
    let outcome = train(&data, model, &objective, &resolved.train, |r: &EpochRecord, m: &FieldModel| {
        if r.epoch % log_every == 0 || r.epoch + 1 == epochs {
            info!(
                "epoch {:>6}  data {:.6e}  penalty {:.3e}  {:.1} s",
                r.epoch, r.data_term, r.penalty_term, r.seconds
            );
        }
        if let Some(k) = checkpoint_every.filter(|&k| k > 0) {
            if (r.epoch + 1) % k == 0 && periodic_error.is_none() {
                let ckpt = Checkpoint {
                    model: m.clone(),
                    grid: Some(grid.clone()),
                };
                if let Err(e) = ckpt.save(&out.join(format!("model-epoch{}.ckpt", r.epoch + 1))) {
                    periodic_error = Some(e);
                }
            }
        }
    })?;
    if let Some(e) = periodic_error {
        return Err(e.into());
    }
    let seconds = start.elapsed().as_secs_f64();

    let mut csv = String::from("epoch,data_term,penalty_term,seconds\n");
    for r in &outcome.history {
        csv.push_str(&format!("{},{:.9e},{:.9e},{:.4}\n", r.epoch, r.data_term, r.penalty_term, r.seconds));
    }
    write_text(&files[1], &csv)?;
    Checkpoint {
        model: outcome.model.clone(),
        grid: Some(grid),
    }
    .save(&files[0])?;
    let last = outcome.history.last().expect("at least one epoch");
    write_json(
        &files[3],
        &TrainSummary {
            profile: resolved.profile,
            n_voxels: data.len(),
            n_directions: data.n_directions(),
            epochs,
            batch_size: resolved.train.batch_size,
            lambda_c: resolved.train.lambda_c,
            wall_clock_seconds: seconds,
            seconds_per_epoch: seconds / epochs as f64,
            final_data_term: last.data_term,
            final_penalty_term: last.penalty_term,
            parameters: outcome.model.parameter_count(),
            parameters_touched_per_point: outcome.model.parameters_touched_per_point(),
            lambda_selection: selection,
        },
    )?;
    info!("trained in {seconds:.1} s; outputs in {}", out.display());
    Ok(())
}

// ---------- fit-shls ----------

fn cmd_fit_shls(data: &DwiArgs, lambda: f64, out: &Path, force: bool) -> CliResult<()> {
    #[derive(Serialize)]
    struct Params<'a> {
        dwi: &'a Option<PathBuf>,
        bvec: &'a Option<PathBuf>,
        bval: &'a Option<PathBuf>,
        mask: &'a Option<PathBuf>,
        lambda: f64,
        lmax: usize,
    }
    if !(lambda >= 0.0) {
        return Err(CliError::Usage(format!("--lambda must be ≥ 0, got {lambda}")));
    }
    let record = sidecar(out);
    guard(&[out.to_path_buf(), record.clone()], force)?;
    let dwi = load_volume(data)?;
    let cv = shls_fit(&dwi, &ShBasisSpec::new(8)?, lambda)?;
    save_nifti(&cv.to_nifti(), out)?;
    run_record(
        &record,
        "fit-shls",
        &Params {
            dwi: &data.dwi,
            bvec: &data.bvec,
            bval: &data.bval,
            mask: &data.mask,
            lambda,
            lmax: 8,
        },
    )?;
    info!("SHLS coefficients written to {}", out.display());
    Ok(())
}

// ---------- infer ----------

fn read_coords(path: &Path) -> CliResult<Vec<NormalizedCoord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(format!("{} line {}", path.display(), i + 1), e.to_string()))?;
        if vals.len() != 3 {
            return Err(Error::format(
                format!("{} line {}", path.display(), i + 1),
                format!("expected 3 values, found {}", vals.len()),
            )
            .into());
        }
        out.push(NormalizedCoord::new([vals[0], vals[1], vals[2]])?);
    }
    if out.is_empty() {
        return Err(Error::format(path.display().to_string(), "no coordinates").into());
    }
    Ok(out)
}

/// Geometry of a grid covering the same extent as `grid` with `dims` voxels.
fn resampled_grid(grid: &GridInfo, dims: [usize; 3]) -> GridInfo {
    let s: [f64; 3] = std::array::from_fn(|i| grid.dims[i] as f64 / dims[i] as f64);
    let mut affine = grid.affine;
    for r in 0..3 {
        let shift: f64 = (0..3).map(|c| grid.affine[r][c] * (0.5 * s[c] - 0.5)).sum();
        for c in 0..3 {
            affine[r][c] = grid.affine[r][c] * s[c];
        }
        affine[r][3] += shift;
    }
    GridInfo {
        dims,
        pixdim: std::array::from_fn(|i| grid.pixdim[i] * s[i]),
        affine,
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_infer(
    checkpoint: &Path,
    out: &Path,
    upsample: f64,
    dims: Option<Vec<usize>>,
    coords: Option<&Path>,
    chunk: usize,
    force: bool,
) -> CliResult<()> {
    #[derive(Serialize)]
    struct Params<'a> {
        checkpoint: &'a Path,
        coords: Option<&'a Path>,
        dims: Option<[usize; 3]>,
        upsample: f64,
        points: usize,
        seconds: f64,
    }
    let record = sidecar(out);
    guard(&[out.to_path_buf(), record.clone()], force)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let model = &ckpt.model;
    let t = Instant::now();
    if let Some(path) = coords {
        let pts = read_coords(path)?;
        let c = model.coefficients_chunked(&pts, chunk)?;
        let mut csv = String::from("x,y,z");
        for k in 0..c.nrows() {
            csv.push_str(&format!(",c{k}"));
        }
        csv.push('\n');
        for (p, col) in pts.iter().zip(c.column_iter()) {
            let [x, y, z] = p.get();
            csv.push_str(&format!("{x},{y},{z},"));
            csv.push_str(&col.iter().map(|x| format!("{x:.9e}")).collect::<Vec<_>>().join(","));
            csv.push('\n');
        }
        write_text(out, &csv)?;
        let seconds = t.elapsed().as_secs_f64();
        run_record(
            &record,
            "infer",
            &Params {
                checkpoint,
                coords: Some(path),
                dims: None,
                upsample,
                points: pts.len(),
                seconds,
            },
        )?;
        info!("{} points evaluated in {seconds:.2} s", pts.len());
        return Ok(());
    }
    let base = ckpt.grid.clone().ok_or_else(|| {
        CliError::Usage("checkpoint has no grid geometry; pass --dims or --coords".into())
    })?;
    let target = match dims {
        Some(d) => [d[0], d[1], d[2]],
        None => {
            if !(upsample > 0.0 && upsample.is_finite()) {
                return Err(CliError::Usage(format!("--upsample must be positive, got {upsample}")));
            }
            base.dims.map(|d| ((d as f64 * upsample).round() as usize).max(1))
        }
    };
    if target.contains(&0) {
        return Err(CliError::Usage("grid extents must be positive".into()));
    }
    let grid = resampled_grid(&base, target);
    let n: usize = target.iter().product();
    let pts: Vec<NormalizedCoord> = (0..n)
        .map(|i| NormalizedCoord::voxel_center(voxel_position(i, target), target))
        .collect();
    let c = model.coefficients_chunked(&pts, chunk)?;
    let mut cv = CoefficientVolume::zeros(target, model.config().lmax);
    cv.voxel_size = grid.pixdim;
    cv.affine = grid.affine;
    cv.scatter(&(0..n).collect::<Vec<_>>(), &c);
    save_nifti(&cv.to_nifti(), out)?;
    let seconds = t.elapsed().as_secs_f64();
    run_record(
        &record,
        "infer",
        &Params {
            checkpoint,
            coords: None,
            dims: Some(target),
            upsample,
            points: n,
            seconds,
        },
    )?;
    info!("{target:?} grid ({} coefficients per voxel) inferred in {seconds:.2} s", c.nrows());
    Ok(())
}

// ---------- sample ----------

#[derive(Serialize)]
struct SampleSummary {
    checkpoint: PathBuf,
    n_samples: usize,
    seed: u64,
    sigma_e2: f64,
    sigma_w2: f64,
    prior_nu: f64,
    prior_kappa: f64,
    jittered_blocks: usize,
    /// One draw cannot give a spread; the uncertainty map is undefined.
    single_sample: bool,
    mean_ratio: Option<f64>,
    undefined_voxels: usize,
}

/// Prior from `--config`, else from `config.toml` next to the checkpoint, else defaults.
fn sample_prior(checkpoint: &Path, config: Option<&Path>) -> CliResult<PriorConfig> {
    if let Some(p) = config {
        return Ok(RunConfig::load(p)?.prior);
    }
    let sibling = checkpoint.with_file_name("config.toml");
    if sibling.exists() {
        let text = fs::read_to_string(&sibling).map_err(|e| Error::io(&sibling, e))?;
        if let Ok(r) = toml::from_str::<ResolvedConfig>(&text) {
            info!("prior taken from {}", sibling.display());
            return Ok(r.prior);
        }
    }
    Ok(PriorConfig::default())
}

#[allow(clippy::too_many_arguments)]
fn cmd_sample(
    checkpoint: &Path,
    data_args: &DwiArgs,
    n: usize,
    seed: u64,
    config: Option<&Path>,
    save_samples: bool,
    out: &Path,
    force: bool,
) -> CliResult<()> {
    if n == 0 {
        return Err(CliError::Usage("-n must be at least 1".into()));
    }
    let mut files: Vec<PathBuf> = ["uncertainty.nii.gz", "mean_gfa.nii.gz", "posterior_mean.nii.gz", "sample.json"]
        .iter()
        .map(|f| out.join(f))
        .collect();
    if save_samples {
        files.push(out.join("gfa_samples.nii.gz"));
    }
    guard(&files, force)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let dwi = load_volume(data_args)?;
    let prior_cfg = sample_prior(checkpoint, config)?;
    make_dir(out)?;

    let model = ckpt.model;
    let spec = ShBasisSpec::new(model.config().lmax)?;
    let (data, voxels) = dwi.dataset()?;
    let phi = eval_sh_basis(dwi.gradients().directions(), &spec)?;
    let prior = prior_for(&prior_cfg, &spec)?;
    let objective = Objective::new(&phi, &frt_matrix(&spec), prior.clone(), 0.0)?;
    let sigma_e2 = estimate_sigma_e(&model, &data, &objective)?;
    let sigma_w2 = estimate_sigma_w(&model, &prior);
    let stats = SufficientStats::from_model(&model, &data, 4096)?;
    let post = PosteriorModel::fit(&stats, objective.phi_g(), &prior, sigma_e2, sigma_w2)?;
    info!("σ_e² = {sigma_e2:.4e}, σ_w² = {sigma_w2:.4e}; drawing {n} samples");
    let samples = post.sample(n, seed);

    let dims = dwi.dims();
    let n_vox = dwi.n_voxels();
    let scalar = |values: Vec<f64>, mask: Vec<bool>| ScalarVolume {
        dims,
        values,
        mask,
        voxel_size: dwi.voxel_size(),
        affine: dwi.affine(),
    };
    let mut mean_model = model.clone();
    mean_model.w = post.mean().clone();
    let mut mean_cv = CoefficientVolume::zeros(dims, model.config().lmax);
    mean_cv.voxel_size = dwi.voxel_size();
    mean_cv.affine = dwi.affine();
    mean_cv.scatter(&voxels, &mean_model.coefficients_chunked(data.coords(), 4096)?);
    for (v, m) in mean_cv.mask.iter_mut().enumerate() {
        *m = dwi.mask()[v];
    }
    save_nifti(&mean_cv.to_nifti(), &files[2])?;

    let mut ratio = vec![f64::NAN; n_vox];
    let mut mean_gfa = vec![0.0; n_vox];
    let mut defined = vec![false; n_vox];
    let single = n == 1;
    if single {
        warn!("a single posterior draw has no spread; the uncertainty map is flagged undefined");
        let mut one = model.clone();
        one.w = samples[0].clone();
        let c = one.coefficients_chunked(data.coords(), 4096)?;
        for (j, &v) in voxels.iter().enumerate() {
            mean_gfa[v] = gfa(c.column(j).as_slice()).value;
        }
    } else {
        let map = gfa_uncertainty_map(&samples, &model, data.coords())?;
        for (j, &v) in voxels.iter().enumerate() {
            ratio[v] = map.ratio[j];
            mean_gfa[v] = map.mean_gfa[j];
            defined[v] = map.defined[j];
        }
    }
    let undefined = voxels.iter().filter(|&&v| !defined[v]).count();
    let kept: Vec<f64> = voxels.iter().filter(|&&v| defined[v]).map(|&v| ratio[v]).collect();
    let mean_ratio = (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64);
    save_nifti(&scalar(ratio, defined.clone()).to_nifti(), &files[0])?;
    save_nifti(&scalar(mean_gfa, dwi.mask().to_vec()).to_nifti(), &files[1])?;

    if save_samples {
        let xi = model.basis_columns(data.coords())?;
        let mut all = vec![0.0; n_vox * n];
        for (s, w) in samples.iter().enumerate() {
            let c: DMatrix<f64> = w * &xi;
            for (j, &v) in voxels.iter().enumerate() {
                all[v + n_vox * s] = gfa(c.column(j).as_slice()).value;
            }
        }
        let mut img = NiftiImage::new(vec![dims[0], dims[1], dims[2], n], all, Datatype::Float32);
        img.affine = dwi.affine();
        save_nifti(&img, &files[4])?;
    }

    write_json(
        &files[3],
        &SampleSummary {
            checkpoint: checkpoint.to_path_buf(),
            n_samples: n,
            seed,
            sigma_e2,
            sigma_w2,
            prior_nu: prior_cfg.nu,
            prior_kappa: prior_cfg.kappa,
            jittered_blocks: post.jittered_blocks(),
            single_sample: single,
            mean_ratio,
            undefined_voxels: undefined,
        },
    )?;
    info!("posterior outputs written to {}", out.display());
    Ok(())
}

// ---------- metrics ----------

enum Maps {
    Scalar(ScalarVolume),
    Color(odfield::metrics::RgbVolume),
}

fn metric_input(
    path: &Path,
    kind: MetricKind,
    table: Option<&odfield::data::GradientTable>,
) -> CliResult<Maps> {
    let img = load_nifti(path)?;
    let is_scalar = img.dims.len() == 3 || (img.dims.len() == 4 && img.dims[3] == 1);
    match (kind, is_scalar) {
        (MetricKind::Gfa, true) => Ok(Maps::Scalar(ScalarVolume::from_nifti(&img)?)),
        (MetricKind::Gfa, false) => Ok(Maps::Scalar(gfa_volume(&CoefficientVolume::from_nifti(&img)?))),
        (MetricKind::Dti, true) => Err(Error::format(
            path.display().to_string(),
            "DTI comparison needs coefficient volumes, found a scalar map",
        )
        .into()),
        (MetricKind::Dti, false) => {
            let cv = CoefficientVolume::from_nifti(&img)?;
            let t = table.ok_or_else(|| CliError::Usage("--kind dti needs --bvec and --bval".into()))?;
            Ok(Maps::Color(dti_maps_from_coefficients(&cv, t.directions(), t.b_value())?.1))
        }
    }
}

#[derive(Serialize)]
struct MetricsSummary {
    kind: &'static str,
    reference: PathBuf,
    test: PathBuf,
    median: f64,
    slices: usize,
    skipped: usize,
}

#[allow(clippy::too_many_arguments)]
fn cmd_metrics(
    reference: &Path,
    test: &Path,
    kind: MetricKind,
    gradients: Option<(PathBuf, PathBuf)>,
    png: bool,
    out: &Path,
    force: bool,
) -> CliResult<()> {
    let name = match kind {
        MetricKind::Gfa => "fsim-gfa",
        MetricKind::Dti => "fsim-dti",
    };
    let mut files = vec![out.join("report.tsv"), out.join("summary.json")];
    if png {
        for who in ["ref", "test"] {
            for axis in 0..3 {
                files.push(out.join(format!("{who}_{}.png", odfield::metrics::fsim::axis_name(axis))));
            }
        }
    }
    guard(&files, force)?;
    let table = match &gradients {
        Some((bvec, bval)) => Some(load_gradients(bvec, bval)?),
        None => None,
    };
    let a = metric_input(reference, kind, table.as_ref())?;
    let b = metric_input(test, kind, table.as_ref())?;
    let report: FsimVolumeReport = match (&a, &b) {
        (Maps::Scalar(x), Maps::Scalar(y)) => fsim_volume_median(x, y)?,
        (Maps::Color(x), Maps::Color(y)) => fsimc_volume_median(x, y)?,
        _ => unreachable!("both inputs share the metric kind"),
    };
    make_dir(out)?;
    write_text(&files[0], &report.to_records(name))?;
    write_json(
        &files[1],
        &MetricsSummary {
            kind: name,
            reference: reference.to_path_buf(),
            test: test.to_path_buf(),
            median: report.median,
            slices: report.scores.len(),
            skipped: report.skipped,
        },
    )?;
    if png {
        let mut k = 2;
        for maps in [&a, &b] {
            for axis in 0..3 {
                let img = match maps {
                    Maps::Scalar(v) => render::scalar_slice(v, axis, v.dims[axis] / 2, 1.0),
                    Maps::Color(v) => render::rgb_slice(v, axis, v.dims[axis] / 2),
                };
                render::save(&img, &files[k])?;
                k += 1;
            }
        }
    }
    println!("{name} median {:.6} over {} slices", report.median, report.scores.len());
    Ok(())
}

// ---------- bench ----------

#[derive(Serialize, Default)]
struct BenchFile {
    train: Vec<ThroughputComparison>,
    inference: Vec<BenchReport>,
    inference_ratio: Option<f64>,
    posterior: Vec<BenchReport>,
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    scenario: BenchScenario,
    runs: usize,
    phantom_size: usize,
    grid: usize,
    max_points: usize,
    threads: usize,
    out: &Path,
    force: bool,
) -> CliResult<()> {
    if threads != 1 {
        return Err(CliError::Usage(format!(
            "--threads {threads}: the kernels are single-threaded, only 1 is supported"
        )));
    }
    if phantom_size < 2 || grid < 1 {
        return Err(CliError::Usage("phantom size must be ≥ 2 and grid ≥ 1".into()));
    }
    guard(&[out.to_path_buf()], force)?;
    let mut file = BenchFile::default();
    let want = |s: BenchScenario| scenario == BenchScenario::All || scenario == s;

    if want(BenchScenario::Train) {
        let p = generate_phantom(&PhantomSpec::crossing(phantom_size, 20.0, 0))?;
        let (data, _) = p.dwi.dataset()?;
        let spec = ShBasisSpec::new(8)?;
        let phi = eval_sh_basis(p.dwi.gradients().directions(), &spec)?;
        let obj = Objective::new(&phi, &frt_matrix(&spec), matern_prior_matrix(1.0, 0.0, &spec)?, 1e-6)?;
        let cfg = odfield::training::TrainConfig::default();
        let default = ModelConfig::hashenc_default(phantom_size);
        for (a, b) in [
            (("hashenc-default", &default), ("siren-baseline", &ModelConfig::siren_baseline())),
            (("hashenc-optimized", &ModelConfig::hashenc_optimized()), ("hashenc-default", &default)),
        ] {
            let c = bench_train_epoch(a, b, &data, &obj, &cfg, runs)?;
            println!("{}\n{}\n  {} vs {}: {:.2}× throughput", c.a.summary(), c.b.summary(), a.0, b.0, c.ratio);
            file.train.push(c);
        }
    }
    if want(BenchScenario::Infer) {
        let dims = [grid; 3];
        let pts: Vec<NormalizedCoord> = (0..grid * grid * grid)
            .map(|i| NormalizedCoord::voxel_center(voxel_position(i, dims), dims))
            .collect();
        let fast = bench_inference("hashenc-default", &init_model(&ModelConfig::hashenc_default(grid), 0)?, &pts, 4096, None, runs)?;
        let slow = bench_inference(
            "siren-baseline",
            &init_model(&ModelConfig::siren_baseline(), 0)?,
            &pts,
            4096,
            Some(max_points),
            runs,
        )?;
        let ratio = slow.median_seconds / fast.median_seconds;
        println!("{}\n{}\n  inference ratio {ratio:.1}×", fast.summary(), slow.summary());
        file.inference = vec![fast, slow];
        file.inference_ratio = Some(ratio);
    }
    if want(BenchScenario::Posterior) {
        file.posterior = bench_posterior(&[1, 16, 64, 256, 1024], 4096, 70, runs, 0)?;
        for r in &file.posterior {
            println!("{}", r.summary());
        }
    }
    write_json(out, &file)
}
