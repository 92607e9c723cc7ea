//! Full-reference image quality: PSNR and SSIM on `[0, 1]` images.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub const PSNR_CAP: f64 = 100.0;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check(op: &'static str, a: &Tensor3, b: &Tensor3) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    check("mse", a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

/// `10·log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let mid = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let total: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= total);
    g
}

/// Valid separable Gaussian filtering of a `w × h` plane (row-major, `h` fastest).
fn filter(plane: &[f64], w: usize, h: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - WINDOW + 1, h - WINDOW + 1);
    let mut tmp = vec![0.0; w * oh];
    for i in 0..w {
        let row = &plane[i * h..(i + 1) * h];
        for j in 0..oh {
            tmp[i * oh + j] = g.iter().zip(&row[j..j + WINDOW]).map(|(k, v)| k * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for i in 0..ow {
        for j in 0..oh {
            out[i * oh + j] = (0..WINDOW).map(|k| g[k] * tmp[(i + k) * oh + j]).sum();
        }
    }
    out
}

/// Mean local SSIM (11×11 Gaussian window, σ = 1.5), averaged over channels.
pub fn ssim(a: &Tensor3, b: &Tensor3) -> Result<f64> {
    check("ssim", a, b)?;
    let s = a.shape();
    if s.w < WINDOW || s.h < WINDOW {
        return Err(Error::InvalidInput(format!(
            "ssim needs images of at least {WINDOW}×{WINDOW}, got {}×{}",
            s.w, s.h
        )));
    }
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..s.c {
        let x: Vec<f64> = a.channel(c).iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = b.channel(c).iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let mx = filter(&x, s.w, s.h, &g);
        let my = filter(&y, s.w, s.h, &g);
        let sxx = filter(&prod(&x, &x), s.w, s.h, &g);
        let syy = filter(&prod(&y, &y), s.w, s.h, &g);
        let sxy = filter(&prod(&x, &y), s.w, s.h, &g);
        let mut sum = 0.0;
        for i in 0..mx.len() {
            let (mu_x, mu_y) = (mx[i], my[i]);
            let vx = sxx[i] - mu_x * mu_x;
            let vy = syy[i] - mu_y * mu_y;
            let cxy = sxy[i] - mu_x * mu_y;
            sum += ((2.0 * mu_x * mu_y + C1) * (2.0 * cxy + C2))
                / ((mu_x * mu_x + mu_y * mu_y + C1) * (vx + vy + C2));
        }
        total += sum / mx.len() as f64;
    }
    Ok(total / s.c as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn compute(reference: &Tensor3, test: &Tensor3) -> Result<Self> {
        Ok(MetricReport {
            psnr: psnr(reference, test)?,
            ssim: ssim(reference, test)?,
        })
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "psnr={:.4} ssim={:.6}", self.psnr, self.ssim)
    }
}
