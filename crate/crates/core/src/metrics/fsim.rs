//! Feature similarity (FSIM / FSIMc) between 2-D images.
//!
//! Phase congruency comes from a log-Gabor bank (4 scales, 4 orientations,
//! minimum wavelength 6, scale factor 2, bandwidth 0.55, angular ratio 1.2,
//! noise threshold k = 2), gradient magnitude from the Scharr operator.
//! Local similarity `S_PC · S_G` is pooled with weights `max(PC₁, PC₂)`.
//! Scalar images are mapped to `[0, 255]` by the reference image's 1st and
//! 99th percentiles before scoring; color images are scaled from `[0, 1]`.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::metrics::{RgbVolume, ScalarVolume};

const N_SCALES: usize = 4;
const N_ORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ON_F: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const NOISE_K: f64 = 2.0;
const EPSILON: f64 = 1e-4;
const T1: f64 = 0.85;
const T2: f64 = 160.0;
const T3: f64 = 200.0;
const T4: f64 = 200.0;
const LAMBDA: f64 = 0.03;

/// Row-major grayscale image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Image2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} pixels for a {rows}×{cols} image", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// Row-major color image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FsimScore {
    pub value: f64,
    /// The reference has no contrast or no phase-congruent features;
    /// `value` is NaN.
    pub degenerate: bool,
}

impl FsimScore {
    fn undefined() -> Self {
        Self {
            value: f64::NAN,
            degenerate: true,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Affine map taking the reference's robust range to `[0, 255]`.
fn robust_range(reference: &Image2) -> Option<(f64, f64)> {
    let mut v: Vec<f64> = reference.data.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (percentile(&v, 0.01), percentile(&v, 0.99));
    if hi <= lo {
        (lo, hi) = (v[0], v[v.len() - 1]);
    }
    (hi > lo).then_some((lo, hi))
}

fn fft2(data: &mut [Complex64], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    for r in data.chunks_mut(cols) {
        row_fft.process(r);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = data[r * cols + c];
        }
        col_fft.process(&mut col);
        for r in 0..rows {
            data[r * cols + c] = col[r];
        }
    }
    if inverse {
        let s = 1.0 / (rows * cols) as f64;
        for x in data.iter_mut() {
            *x *= s;
        }
    }
}

/// Centered frequency coordinates, already shifted so index 0 is DC.
fn freq_axis(n: usize) -> Vec<f64> {
    let centered: Vec<f64> = if n % 2 == 1 {
        let h = (n as f64 - 1.0) / 2.0;
        (0..n).map(|i| (i as f64 - h) / (n as f64 - 1.0).max(1.0)).collect()
    } else {
        (0..n).map(|i| (i as f64 - (n / 2) as f64) / n as f64).collect()
    };
    // inverse fftshift
    let shift = n / 2;
    (0..n).map(|i| centered[(i + shift) % n]).collect()
}

/// Summed phase congruency over orientations.
fn phase_congruency(img: &Image2) -> Vec<f64> {
    let (rows, cols) = (img.rows, img.cols);
    let n = rows * cols;
    let mut spectrum: Vec<Complex64> = img.data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft2(&mut spectrum, rows, cols, false);

    let fx = freq_axis(cols);
    let fy = freq_axis(rows);
    let mut radius = vec![0.0; n];
    let mut sin_t = vec![0.0; n];
    let mut cos_t = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (fx[c], fy[r]);
            let i = r * cols + c;
            radius[i] = (x * x + y * y).sqrt();
            let theta = (-y).atan2(x);
            sin_t[i] = theta.sin();
            cos_t[i] = theta.cos();
        }
    }
    radius[0] = 1.0;
    let lowpass: Vec<f64> = radius.iter().map(|&rad| 1.0 / (1.0 + (rad / 0.45).powi(30))).collect();
    let log_gabor: Vec<Vec<f64>> = (0..N_SCALES)
        .map(|s| {
            let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let denom = 2.0 * SIGMA_ON_F.ln().powi(2);
            let mut g: Vec<f64> = radius
                .iter()
                .zip(&lowpass)
                .map(|(&rad, &lp)| (-(rad / fo).ln().powi(2) / denom).exp() * lp)
                .collect();
            g[0] = 0.0;
            g
        })
        .collect();

    let mut energy_all = vec![0.0; n];
    let mut an_all = vec![0.0; n];
    let theta_sigma = PI / N_ORIENT as f64 / D_THETA_ON_SIGMA;
    for o in 0..N_ORIENT {
        let angle = o as f64 * PI / N_ORIENT as f64;
        let (sa, ca) = angle.sin_cos();
        let spread: Vec<f64> = (0..n)
            .map(|i| {
                let ds = sin_t[i] * ca - cos_t[i] * sa;
                let dc = cos_t[i] * ca + sin_t[i] * sa;
                let dtheta = ds.atan2(dc).abs();
                (-dtheta * dtheta / (2.0 * theta_sigma * theta_sigma)).exp()
            })
            .collect();
        let mut sum_e = vec![0.0; n];
        let mut sum_o = vec![0.0; n];
        let mut sum_an = vec![0.0; n];
        let mut responses: Vec<Vec<Complex64>> = Vec::with_capacity(N_SCALES);
        let mut spatial_filters: Vec<Vec<f64>> = Vec::with_capacity(N_SCALES);
        let mut em_n = 0.0;
        for (s, lg) in log_gabor.iter().enumerate() {
            let filter: Vec<f64> = lg.iter().zip(&spread).map(|(a, b)| a * b).collect();
            let mut spatial: Vec<Complex64> = filter.iter().map(|&f| Complex64::new(f, 0.0)).collect();
            fft2(&mut spatial, rows, cols, true);
            spatial_filters.push(spatial.iter().map(|z| z.re * (n as f64).sqrt()).collect());
            if s == 0 {
                em_n = filter.iter().map(|f| f * f).sum();
            }
            let mut eo: Vec<Complex64> = spectrum.iter().zip(&filter).map(|(z, f)| z * f).collect();
            fft2(&mut eo, rows, cols, true);
            for i in 0..n {
                sum_an[i] += eo[i].norm();
                sum_e[i] += eo[i].re;
                sum_o[i] += eo[i].im;
            }
            responses.push(eo);
        }
        let mut energy = vec![0.0; n];
        for i in 0..n {
            let x = (sum_e[i] * sum_e[i] + sum_o[i] * sum_o[i]).sqrt() + EPSILON;
            let (me, mo) = (sum_e[i] / x, sum_o[i] / x);
            for eo in &responses {
                let (e, od) = (eo[i].re, eo[i].im);
                energy[i] += e * me + od * mo - (e * mo - od * me).abs();
            }
        }

        // noise from the smallest scale's median energy
        let mut e2: Vec<f64> = responses[0].iter().map(|z| z.norm_sqr()).collect();
        e2.sort_by(f64::total_cmp);
        let median = percentile(&e2, 0.5);
        let mean_e2n = -median / 0.5f64.ln();
        let noise_power = if em_n > 0.0 { mean_e2n / em_n } else { 0.0 };
        let mut sum_an2 = 0.0;
        let mut sum_aiaj = 0.0;
        for i in 0..n {
            for si in 0..N_SCALES {
                sum_an2 += spatial_filters[si][i] * spatial_filters[si][i];
                for sj in si + 1..N_SCALES {
                    sum_aiaj += spatial_filters[si][i] * spatial_filters[sj][i];
                }
            }
        }
        let noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_aiaj;
        let tau = (noise_energy2 / 2.0).max(0.0).sqrt();
        let noise_mean = tau * (PI / 2.0).sqrt();
        let noise_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let threshold = (noise_mean + NOISE_K * noise_sigma) / 1.7;
        for i in 0..n {
            energy_all[i] += (energy[i] - threshold).max(0.0);
            an_all[i] += sum_an[i];
        }
    }
    energy_all
        .iter()
        .zip(&an_all)
        .map(|(e, a)| e / (a + EPSILON))
        .collect()
}

/// Scharr gradient magnitude with zero padding.
fn gradient_magnitude(img: &Image2) -> Vec<f64> {
    let (rows, cols) = (img.rows as isize, img.cols as isize);
    let at = |r: isize, c: isize| {
        if r < 0 || c < 0 || r >= rows || c >= cols {
            0.0
        } else {
            img.data[(r * cols + c) as usize]
        }
    };
    let mut out = Vec::with_capacity(img.data.len());
    for r in 0..rows {
        for c in 0..cols {
            let gx = (3.0 * (at(r - 1, c - 1) - at(r - 1, c + 1))
                + 10.0 * (at(r, c - 1) - at(r, c + 1))
                + 3.0 * (at(r + 1, c - 1) - at(r + 1, c + 1)))
                / 16.0;
            let gy = (3.0 * (at(r - 1, c - 1) - at(r + 1, c - 1))
                + 10.0 * (at(r - 1, c) - at(r + 1, c))
                + 3.0 * (at(r - 1, c + 1) - at(r + 1, c + 1)))
                / 16.0;
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    out
}

/// Average-pool by the integer factor the FSIM protocol applies to large images.
fn downsample(img: &Image2) -> Image2 {
    let f = ((img.rows.min(img.cols) as f64 / 256.0).round() as usize).max(1);
    if f == 1 {
        return img.clone();
    }
    let (rows, cols) = (img.rows / f, img.cols / f);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut s = 0.0;
            for dr in 0..f {
                for dc in 0..f {
                    s += img.get(r * f + dr, c * f + dc);
                }
            }
            data.push(s / (f * f) as f64);
        }
    }
    Image2 { rows, cols, data }
}

struct Features {
    pc1: Vec<f64>,
    pc2: Vec<f64>,
    similarity: Vec<f64>,
}

fn luminance_features(a: &Image2, b: &Image2) -> Features {
    let (a, b) = (downsample(a), downsample(b));
    let (pc1, pc2) = (phase_congruency(&a), phase_congruency(&b));
    let (g1, g2) = (gradient_magnitude(&a), gradient_magnitude(&b));
    let similarity = (0..pc1.len())
        .map(|i| {
            let s_pc = (2.0 * pc1[i] * pc2[i] + T1) / (pc1[i] * pc1[i] + pc2[i] * pc2[i] + T1);
            let s_g = (2.0 * g1[i] * g2[i] + T2) / (g1[i] * g1[i] + g2[i] * g2[i] + T2);
            s_pc * s_g
        })
        .collect();
    Features { pc1, pc2, similarity }
}

fn pool(pc1: &[f64], pc2: &[f64], sim: impl Iterator<Item = f64>) -> FsimScore {
    let (mut num, mut den) = (0.0, 0.0);
    for ((a, b), s) in pc1.iter().zip(pc2).zip(sim) {
        let w = a.max(*b);
        num += s * w;
        den += w;
    }
    if den > 0.0 {
        FsimScore {
            value: num / den,
            degenerate: false,
        }
    } else {
        FsimScore::undefined()
    }
}

/// FSIM of `test` against `reference` (grayscale).
pub fn fsim(reference: &Image2, test: &Image2) -> Result<FsimScore> {
    if reference.rows != test.rows || reference.cols != test.cols {
        return Err(Error::Shape(format!(
            "reference is {}×{}, test is {}×{}",
            reference.rows, reference.cols, test.rows, test.cols
        )));
    }
    let Some((lo, hi)) = robust_range(reference) else {
        return Ok(FsimScore::undefined());
    };
    let scale = 255.0 / (hi - lo);
    let a = reference.map(|x| (x - lo) * scale);
    let b = test.map(|x| (x - lo) * scale);
    if b.data.iter().any(|x| !x.is_finite()) || a.data.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("images contain non-finite pixels".into()));
    }
    let f = luminance_features(&a, &b);
    Ok(pool(&f.pc1, &f.pc2, f.similarity.into_iter()))
}

fn yiq(img: &RgbImage2, channel: usize) -> Image2 {
    let coef = [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]][channel];
    Image2 {
        rows: img.rows,
        cols: img.cols,
        data: img
            .data
            .iter()
            .map(|p| 255.0 * (coef[0] * p[0] + coef[1] * p[1] + coef[2] * p[2]))
            .collect(),
    }
}

/// Color variant: luma carries phase congruency and gradients, chroma
/// similarity enters with exponent 0.03.
pub fn fsimc(reference: &RgbImage2, test: &RgbImage2) -> Result<FsimScore> {
    if reference.rows != test.rows || reference.cols != test.cols {
        return Err(Error::Shape(format!(
            "reference is {}×{}, test is {}×{}",
            reference.rows, reference.cols, test.rows, test.cols
        )));
    }
    if reference.data.iter().chain(&test.data).flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("images contain non-finite pixels".into()));
    }
    let (y1, y2) = (yiq(reference, 0), yiq(test, 0));
    let f = luminance_features(&y1, &y2);
    let (i1, i2) = (downsample(&yiq(reference, 1)), downsample(&yiq(test, 1)));
    let (q1, q2) = (downsample(&yiq(reference, 2)), downsample(&yiq(test, 2)));
    let sim = (0..f.similarity.len()).map(|k| {
        let s_i = (2.0 * i1.data[k] * i2.data[k] + T3) / (i1.data[k].powi(2) + i2.data[k].powi(2) + T3);
        let s_q = (2.0 * q1.data[k] * q2.data[k] + T4) / (q1.data[k].powi(2) + q2.data[k].powi(2) + T4);
        let c = s_i * s_q;
        // real part of a possibly negative base raised to a fractional power
        let chroma = c.abs().powf(LAMBDA) * if c < 0.0 { (LAMBDA * PI).cos() } else { 1.0 };
        f.similarity[k] * chroma
    });
    Ok(pool(&f.pc1, &f.pc2, sim))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceScore {
    /// 0 sagittal, 1 coronal, 2 axial.
    pub axis: usize,
    pub index: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FsimVolumeReport {
    pub median: f64,
    pub scores: Vec<SliceScore>,
    /// Slices skipped for an empty mask or a featureless reference.
    pub skipped: usize,
}

impl FsimVolumeReport {
    /// `metric axis slice value` lines followed by a summary line.
    pub fn to_records(&self, metric: &str) -> String {
        let mut out = String::from("metric\taxis\tslice\tvalue\n");
        for s in &self.scores {
            out.push_str(&format!("{metric}\t{}\t{}\t{:.6}\n", axis_name(s.axis), s.index, s.value));
        }
        out.push_str(&format!(
            "# {metric} median {:.6} over {} slices ({} skipped)\n",
            self.median,
            self.scores.len(),
            self.skipped
        ));
        out
    }
}

pub fn axis_name(axis: usize) -> &'static str {
    ["sagittal", "coronal", "axial"][axis.min(2)]
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn collect_median(
    dims: [usize; 3],
    mut score: impl FnMut(usize, usize) -> Result<Option<FsimScore>>,
) -> Result<FsimVolumeReport> {
    let mut scores = Vec::new();
    let mut skipped = 0;
    for axis in 0..3 {
        for index in 0..dims[axis] {
            match score(axis, index)? {
                Some(s) if !s.degenerate => scores.push(SliceScore {
                    axis,
                    index,
                    value: s.value,
                }),
                _ => skipped += 1,
            }
        }
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput("no slice could be scored".into()));
    }
    let mut v: Vec<f64> = scores.iter().map(|s| s.value).collect();
    Ok(FsimVolumeReport {
        median: median(&mut v),
        scores,
        skipped,
    })
}

/// Median FSIM over all sagittal, coronal and axial slices.
pub fn fsim_volume_median(reference: &ScalarVolume, test: &ScalarVolume) -> Result<FsimVolumeReport> {
    if reference.dims != test.dims {
        return Err(Error::Shape(format!("volume dims {:?} vs {:?}", reference.dims, test.dims)));
    }
    collect_median(reference.dims, |axis, index| {
        let (a, mask) = reference.slice(axis, index);
        if !mask.iter().any(|m| *m) {
            return Ok(None);
        }
        let (b, _) = test.slice(axis, index);
        fsim(&a, &b).map(Some)
    })
}

/// Median FSIMc over all slices of two color volumes.
pub fn fsimc_volume_median(reference: &RgbVolume, test: &RgbVolume) -> Result<FsimVolumeReport> {
    if reference.dims != test.dims {
        return Err(Error::Shape(format!("volume dims {:?} vs {:?}", reference.dims, test.dims)));
    }
    collect_median(reference.dims, |axis, index| {
        let (a, mask) = reference.slice(axis, index);
        if !mask.iter().any(|m| *m) {
            return Ok(None);
        }
        let (b, _) = test.slice(axis, index);
        fsimc(&a, &b).map(Some)
    })
}
