//! PSNR and SSIM, computed on unit-range values.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::imaging::{internal_to_unit, Image};

/// Reported for identical images instead of infinity.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio with peak 1 on the unit range.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let mut sum = 0.0f64;
    for (&u, &v) in a.data().iter().zip(b.data()) {
        let d = f64::from(internal_to_unit(u)) - f64::from(internal_to_unit(v));
        sum += d * d;
    }
    let mse = sum / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let centre = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - centre;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut horiz = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            horiz[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * horiz[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Structural similarity: 11×11 Gaussian window (σ = 1.5), mean over all
/// window positions and channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (h, w, channels) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let k = gaussian_kernel();
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let pa: Vec<f64> = a.data()[c * hw..(c + 1) * hw]
            .iter()
            .map(|&v| f64::from(internal_to_unit(v)))
            .collect();
        let pb: Vec<f64> = b.data()[c * hw..(c + 1) * hw]
            .iter()
            .map(|&v| f64::from(internal_to_unit(v)))
            .collect();
        let square = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<_>>();
        let cross: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &k);
        let mu_b = filter_valid(&pb, h, w, &k);
        let aa = filter_valid(&square(&pa), h, w, &k);
        let bb = filter_valid(&square(&pb), h, w, &k);
        let ab = filter_valid(&cross, h, w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = aa[i] - ma * ma;
            let var_b = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
        }
        count += mu_a.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores plus their arithmetic means.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, prediction: &Image, truth: &Image) -> Result<&MetricRow> {
        let row = MetricRow {
            name: name.into(),
            psnr: psnr(prediction, truth)?,
            ssim: ssim(prediction, truth)?,
        };
        self.rows.push(row);
        Ok(self.rows.last().expect("just pushed"))
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ssim))
    }

    /// `filename,psnr,ssim` rows followed by a `mean` aggregate row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filename,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.name, r.psnr, r.ssim);
        }
        let _ = writeln!(out, "mean,{},{}", self.mean_psnr(), self.mean_ssim());
        out
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}
