//! Global homography pre-alignment of a prediction onto its ground truth.
//!
//! Gauss-Newton (forward additive Lucas-Kanade) on luminance over an image
//! pyramid. The homography acts on coordinates normalised per level (pixel
//! centres, origin at the image centre, scaled by half the longer side), so
//! the same parameters carry across levels without rescaling.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};

use super::quality::psnr_masked;
use crate::error::{Error, Result};
use crate::image::Image;

pub const WARP_MAX_ITERS: usize = 200;
pub const WARP_TOL: f64 = 1e-6;
const MIN_LEVEL_SIDE: usize = 16;
const MAX_LEVELS: usize = 5;
/// Mean squared luminance gradient below which an image counts as textureless.
const TEXTURE_FLOOR: f64 = 1e-10;
const MIN_VALID_FRACTION: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct WarpResult {
    pub warped: Image,
    /// Row-major, one entry per pixel: set where the warp sampled inside `pred`.
    pub mask: Vec<bool>,
    pub success: bool,
    /// Maps ground-truth pixel coordinates to prediction pixel coordinates.
    pub homography: [[f64; 3]; 3],
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl WarpResult {
    pub fn valid_fraction(&self) -> f64 {
        self.mask.iter().filter(|m| **m).count() as f64 / self.mask.len().max(1) as f64
    }

    /// Pixel translation part of the homography.
    pub fn translation(&self) -> (f64, f64) {
        (self.homography[0][2], self.homography[1][2])
    }

    /// Largest rectangle found by greedily trimming the side with the most
    /// invalid pixels until none remain.
    pub fn valid_rect(&self) -> Option<Rect> {
        let (h, w) = self.warped.dims();
        let (mut t, mut l, mut b, mut r) = (0usize, 0usize, h, w);
        loop {
            if t >= b || l >= r {
                return None;
            }
            let bad = |y: usize, x: usize| !self.mask[y * w + x];
            let top = (l..r).filter(|&x| bad(t, x)).count();
            let bottom = (l..r).filter(|&x| bad(b - 1, x)).count();
            let left = (t..b).filter(|&y| bad(y, l)).count();
            let right = (t..b).filter(|&y| bad(y, r - 1)).count();
            let worst = top.max(bottom).max(left).max(right);
            if worst == 0 {
                let inner_ok = (t..b).all(|y| (l..r).all(|x| !bad(y, x)));
                if inner_ok {
                    return Some(Rect {
                        top: t,
                        left: l,
                        height: b - t,
                        width: r - l,
                    });
                }
                // holes inside: trim the shorter dimension
                if b - t > r - l {
                    t += 1;
                } else {
                    l += 1;
                }
                continue;
            }
            if worst == top {
                t += 1;
            } else if worst == bottom {
                b -= 1;
            } else if worst == left {
                l += 1;
            } else {
                r -= 1;
            }
        }
    }
}

struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn at(&self, y: usize, x: usize) -> f64 {
        self.v[y * self.w + x]
    }

    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                v[y * w + x] = 0.25
                    * (self.at(2 * y, 2 * x)
                        + self.at(2 * y, 2 * x + 1)
                        + self.at(2 * y + 1, 2 * x)
                        + self.at(2 * y + 1, 2 * x + 1));
            }
        }
        Plane { h, w, v }
    }

    fn gradients(&self) -> (Plane, Plane) {
        let (h, w) = (self.h, self.w);
        let mut gx = vec![0f64; h * w];
        let mut gy = vec![0f64; h * w];
        for y in 0..h {
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
                gx[y * w + x] = (self.at(y, x1) - self.at(y, x0)) / (x1 - x0).max(1) as f64;
                gy[y * w + x] = (self.at(y1, x) - self.at(y0, x)) / (y1 - y0).max(1) as f64;
            }
        }
        (Plane { h, w, v: gx }, Plane { h, w, v: gy })
    }

    /// Bilinear sample; `None` outside `[0, w-1] × [0, h-1]`.
    fn sample(&self, x: f64, y: f64) -> Option<f64> {
        if !(x >= 0.0 && y >= 0.0 && x <= (self.w - 1) as f64 && y <= (self.h - 1) as f64) {
            return None;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.w - 1), (y0 + 1).min(self.h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = self.at(y0, x0) * (1.0 - fx) + self.at(y0, x1) * fx;
        let bot = self.at(y1, x0) * (1.0 - fx) + self.at(y1, x1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }
}

/// Pixel-centre ↔ normalised coordinate frame of one pyramid level.
#[derive(Clone, Copy)]
struct Frame {
    s: f64,
    cx: f64,
    cy: f64,
}

impl Frame {
    fn new(h: usize, w: usize) -> Self {
        Self {
            s: h.max(w) as f64 / 2.0,
            cx: w as f64 / 2.0,
            cy: h as f64 / 2.0,
        }
    }

    /// `N` such that `normalised = N · [x, y, 1]`.
    fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.s,
            0.0,
            (0.5 - self.cx) / self.s,
            0.0,
            1.0 / self.s,
            (0.5 - self.cy) / self.s,
            0.0,
            0.0,
            1.0,
        )
    }
}

fn homography(p: &SVector<f64, 8>) -> Matrix3<f64> {
    Matrix3::new(
        1.0 + p[0],
        p[1],
        p[2],
        p[3],
        1.0 + p[4],
        p[5],
        p[6],
        p[7],
        1.0,
    )
}

fn project(m: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let v = m * Vector3::new(x, y, 1.0);
    if v[2].abs() < 1e-12 {
        return None;
    }
    Some((v[0] / v[2], v[1] / v[2]))
}

/// Refines `p` on one level. Returns iterations used, or `None` if the normal
/// equations became singular.
fn refine(template: &Plane, image: &Plane, p: &mut SVector<f64, 8>) -> Option<usize> {
    let (gx, gy) = image.gradients();
    let frame = Frame::new(image.h, image.w);
    let n = frame.matrix();
    let n_inv = n.try_inverse()?;
    for it in 0..WARP_MAX_ITERS {
        let hm = homography(p);
        let to_pixel = n_inv * hm * n;
        let mut jtj = SMatrix::<f64, 8, 8>::zeros();
        let mut jtr = SVector::<f64, 8>::zeros();
        let mut count = 0usize;
        for y in 0..template.h {
            for x in 0..template.w {
                let xn = (x as f64 + 0.5 - frame.cx) / frame.s;
                let yn = (y as f64 + 0.5 - frame.cy) / frame.s;
                let Some((px, py)) = project(&to_pixel, x as f64, y as f64) else {
                    continue;
                };
                let Some(iv) = image.sample(px, py) else {
                    continue;
                };
                let ix = gx.sample(px, py).unwrap_or(0.0) * frame.s;
                let iy = gy.sample(px, py).unwrap_or(0.0) * frame.s;
                let d = p[6] * xn + p[7] * yn + 1.0;
                let (u, v) = match project(&hm, xn, yn) {
                    Some(uv) => uv,
                    None => continue,
                };
                let j = SVector::<f64, 8>::from([
                    ix * xn / d,
                    ix * yn / d,
                    ix / d,
                    iy * xn / d,
                    iy * yn / d,
                    iy / d,
                    -(ix * u + iy * v) * xn / d,
                    -(ix * u + iy * v) * yn / d,
                ]);
                let r = iv - template.at(y, x);
                jtj += j * j.transpose();
                jtr += j * r;
                count += 1;
            }
        }
        if count < 8 {
            return None;
        }
        let damp = 1e-9 * jtj.trace().max(1e-300);
        for i in 0..8 {
            jtj[(i, i)] += damp;
        }
        let delta = jtj.cholesky()?.solve(&(-jtr));
        if !delta.iter().all(|v| v.is_finite()) {
            return None;
        }
        *p += delta;
        if delta.norm() < WARP_TOL {
            return Some(it + 1);
        }
    }
    Some(WARP_MAX_ITERS)
}

fn warp_rgb(pred: &Image, to_pixel: &Matrix3<f64>) -> (Image, Vec<bool>) {
    let (h, w) = pred.dims();
    let planes: Vec<Plane> = (0..3)
        .map(|c| Plane {
            h,
            w,
            v: pred
                .data()
                .iter()
                .skip(c)
                .step_by(3)
                .map(|v| *v as f64)
                .collect(),
        })
        .collect();
    let mut out = Image::new(h, w);
    let mut mask = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if let Some((px, py)) = project(to_pixel, x as f64, y as f64) {
                if planes[0].sample(px, py).is_some() {
                    mask[y * w + x] = true;
                    for (c, plane) in planes.iter().enumerate() {
                        out.set(y, x, c, plane.sample(px, py).unwrap_or(0.0) as f32);
                    }
                }
            }
        }
    }
    (out, mask)
}

fn identity(pred: &Image, iterations: usize) -> WarpResult {
    let (h, w) = pred.dims();
    WarpResult {
        warped: pred.clone(),
        mask: vec![true; h * w],
        success: false,
        homography: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        iterations,
    }
}

/// Estimates a homography taking `pred` onto `gt` and warps `pred`. Failure
/// (textureless input, singular system, too little overlap, or a warp that
/// lowers PSNR) yields the unwarped prediction with `success = false`.
pub fn align_warp(pred: &Image, gt: &Image) -> Result<WarpResult> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "images are {:?} and {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (h, w) = gt.dims();
    let template = Plane {
        h,
        w,
        v: gt.luminance(),
    };
    let image = Plane {
        h,
        w,
        v: pred.luminance(),
    };
    let texture = |pl: &Plane| {
        let (gx, gy) = pl.gradients();
        gx.v.iter()
            .zip(&gy.v)
            .map(|(a, b)| a * a + b * b)
            .sum::<f64>()
            / (h * w) as f64
    };
    if h < 2 || w < 2 || texture(&template) < TEXTURE_FLOOR || texture(&image) < TEXTURE_FLOOR {
        return Ok(identity(pred, 0));
    }
    let mut pyramid = vec![(template, image)];
    while pyramid.len() < MAX_LEVELS {
        let (t, i) = pyramid.last().expect("non-empty");
        if t.h / 2 < MIN_LEVEL_SIDE || t.w / 2 < MIN_LEVEL_SIDE {
            break;
        }
        let next = (t.downsample(), i.downsample());
        pyramid.push(next);
    }
    let mut p = SVector::<f64, 8>::zeros();
    let mut iterations = 0;
    for (t, i) in pyramid.iter().rev() {
        match refine(t, i, &mut p) {
            Some(n) => iterations += n,
            None => return Ok(identity(pred, iterations)),
        }
    }
    let n = Frame::new(h, w).matrix();
    let Some(n_inv) = n.try_inverse() else {
        return Ok(identity(pred, iterations));
    };
    let to_pixel = n_inv * homography(&p) * n;
    let (warped, mask) = warp_rgb(pred, &to_pixel);
    let mut result = WarpResult {
        warped,
        mask,
        success: true,
        homography: [
            [to_pixel[(0, 0)], to_pixel[(0, 1)], to_pixel[(0, 2)]],
            [to_pixel[(1, 0)], to_pixel[(1, 1)], to_pixel[(1, 2)]],
            [to_pixel[(2, 0)], to_pixel[(2, 1)], to_pixel[(2, 2)]],
        ],
        iterations,
    };
    if result.valid_fraction() < MIN_VALID_FRACTION {
        return Ok(identity(pred, iterations));
    }
    let before = psnr_masked(pred, gt, None, 1.0)?.db;
    let after = psnr_masked(&result.warped, gt, Some(&result.mask), 1.0)?.db;
    if !(after >= before) {
        result = identity(pred, iterations);
    }
    Ok(result)
}
