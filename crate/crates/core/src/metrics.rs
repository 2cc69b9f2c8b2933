//! Image quality metrics on `[.., H, W]` tensors with values in `[0, 1]`.

use std::fmt;

use crate::error::{dim_err, Result};
use crate::tensor::{Real, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

pub fn mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`] dB.
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-12 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian of length `k`.
pub fn gaussian_window(k: usize, sigma: f64) -> Vec<f64> {
    let c = (k as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|i| g[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions, averaged over leading dims.
/// Images smaller than the window use a window of the smaller side.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b)?;
    let s = a.shape();
    if s.len() < 2 {
        return Err(dim_err!("ssim needs [.., H, W], got {:?}", s));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let k = SSIM_WINDOW.min(h).min(w);
    let g = gaussian_window(k, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let x: Vec<f64> = a.data()[p * h * w..][..h * w]
            .iter()
            .map(|v| v.f64())
            .collect();
        let y: Vec<f64> = b.data()[p * h * w..][..h * w]
            .iter()
            .map(|v| v.f64())
            .collect();
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let sxx = filter_valid(&prod(&x, &x), h, w, &g);
        let syy = filter_valid(&prod(&y, &y), h, w, &g);
        let sxy = filter_valid(&prod(&x, &y), h, w, &g);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / planes as f64)
}

/// Mean and population standard deviation of a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricStats {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

/// PSNR/SSIM over a test set.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr: MetricStats,
    pub ssim: MetricStats,
    pub per_image: Vec<(f64, f64)>,
}

impl EvalReport {
    pub fn from_pairs(per_image: Vec<(f64, f64)>) -> Self {
        let p: Vec<f64> = per_image.iter().map(|x| x.0).collect();
        let s: Vec<f64> = per_image.iter().map(|x| x.1).collect();
        Self {
            psnr: MetricStats::from_samples(&p),
            ssim: MetricStats::from_samples(&s),
            per_image,
        }
    }

    /// Machine-readable block, one `key=value` per line.
    pub fn to_kv(&self) -> String {
        format!(
            "psnr_mean={:.4}\npsnr_std={:.4}\nssim_mean={:.6}\nssim_std={:.6}\nn={}\n",
            self.psnr.mean, self.psnr.std, self.ssim.mean, self.ssim.std, self.psnr.n
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "PSNR {:.2} ± {:.2} dB  SSIM {:.4} ± {:.4}  (n={})",
            self.psnr.mean, self.psnr.std, self.ssim.mean, self.ssim.std, self.psnr.n
        )
    }
}
