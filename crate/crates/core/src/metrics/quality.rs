use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR reported for a zero-error pair.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Set when the MSE was zero and the value is the cap.
    pub capped: bool,
}

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "images are {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, peak: f64) -> Psnr {
    if mse <= 0.0 {
        Psnr {
            db: PSNR_CAP_DB,
            capped: true,
        }
    } else {
        let db = 10.0 * (peak * peak / mse).log10();
        Psnr {
            db: db.min(PSNR_CAP_DB),
            capped: db >= PSNR_CAP_DB,
        }
    }
}

/// `10·log10(peak² / MSE)` over all pixels and channels.
pub fn psnr(pred: &Image, gt: &Image, peak: f64) -> Result<Psnr> {
    psnr_masked(pred, gt, None, peak)
}

/// PSNR restricted to pixels where `mask` (row-major, one entry per pixel) is set.
pub fn psnr_masked(pred: &Image, gt: &Image, mask: Option<&[bool]>, peak: f64) -> Result<Psnr> {
    same_dims(pred, gt)?;
    if !(peak > 0.0) {
        return Err(Error::Invalid(format!("peak must be positive, got {peak}")));
    }
    let (h, w) = pred.dims();
    if let Some(m) = mask {
        if m.len() != h * w {
            return Err(Error::Shape("mask size differs from image".into()));
        }
    }
    let mut sum = 0f64;
    let mut n = 0usize;
    for (i, (a, b)) in pred
        .data()
        .chunks_exact(3)
        .zip(gt.data().chunks_exact(3))
        .enumerate()
    {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for c in 0..3 {
            let d = a[c] as f64 - b[c] as f64;
            sum += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Err(Error::Invalid("PSNR over an empty region".into()));
    }
    Ok(psnr_from_mse(sum / n as f64, peak))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0f64; h * ow];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0f64;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Per-channel SSIM maps (valid mode, `(H-10)×(W-10)` each).
fn ssim_maps(pred: &Image, gt: &Image) -> Result<Vec<Vec<f64>>> {
    same_dims(pred, gt)?;
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut maps = Vec::with_capacity(3);
    for c in 0..3 {
        let x: Vec<f64> = pred
            .data()
            .iter()
            .skip(c)
            .step_by(3)
            .map(|v| *v as f64)
            .collect();
        let y: Vec<f64> = gt
            .data()
            .iter()
            .skip(c)
            .step_by(3)
            .map(|v| *v as f64)
            .collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let map = (0..mx.len())
            .map(|i| {
                let (a, b) = (mx[i], my[i]);
                let vx = sxx[i] - a * a;
                let vy = syy[i] - b * b;
                let cov = sxy[i] - a * b;
                ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2))
            })
            .collect();
        maps.push(map);
    }
    Ok(maps)
}

/// Mean SSIM (Gaussian 11×11 window, σ = 1.5, K1 = 0.01, K2 = 0.03, L = 1),
/// averaged over channels.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    let maps = ssim_maps(pred, gt)?;
    let per: Vec<f64> = maps
        .iter()
        .map(|m| m.iter().sum::<f64>() / m.len() as f64)
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}
