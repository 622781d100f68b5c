//! Deterministic synthetic data: textured scenes with hard edges, their
//! Gaussian-blurred counterparts, and writers for the on-disk dataset
//! layout. Used for smoke runs and tests where no real data is available.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_io::{write_png, ImagePair, Split};
use crate::error::{Error, Result};
use crate::image::Image;

/// Smooth sinusoidal texture overlaid with a few flat rectangles, so the
/// scene has both gradients and step edges.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<[f32; 4]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.05..0.2),
            ]
        })
        .collect();
    let base: [f32; 3] = [
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
        rng.random_range(0.3..0.7),
    ];
    let rects: Vec<(usize, usize, usize, usize, [f32; 3])> = (0..4)
        .map(|_| {
            let top = rng.random_range(0..height);
            let left = rng.random_range(0..width);
            let h = rng.random_range(1..=height.div_ceil(2));
            let w = rng.random_range(1..=width.div_ceil(2));
            let c = [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
            ];
            (top, left, h, w, c)
        })
        .collect();
    Image::from_fn(height, width, |y, x, c| {
        if let Some(r) = rects
            .iter()
            .rev()
            .find(|(t, l, h, w, _)| y >= *t && y < t + h && x >= *l && x < l + w)
        {
            return r.4[c];
        }
        let mut v = base[c];
        for (i, [fx, fy, ph, amp]) in waves.iter().enumerate() {
            v += amp * (fx * x as f32 + fy * y as f32 + ph + (i + c) as f32).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Isotropic Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Result<Image> {
    let (h, w) = img.dims();
    let buf = image::Rgb32FImage::from_raw(w as u32, h as u32, img.data().to_vec())
        .ok_or_else(|| Error::Shape("image buffer size mismatch".into()))?;
    let blurred = image::imageops::blur(&buf, sigma);
    Image::from_vec(h, w, blurred.into_raw())
}

/// `n` blurred/sharp pairs named `p000…`, four pairs per scene id.
pub fn synthetic_pairs(
    n: usize,
    height: usize,
    width: usize,
    sigma: f32,
    seed: u64,
) -> Result<Vec<ImagePair>> {
    (0..n)
        .map(|i| {
            let sharp = synthetic_scene(
                height,
                width,
                seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            );
            let blur = gaussian_blur(&sharp, sigma)?;
            ImagePair::new(format!("p{i:03}"), format!("s{:02}", i / 4), blur, sharp)
        })
        .collect()
}

/// Writes pairs as `<root>/<split>/<scene>/<pair>_{blur,sharp}.png`.
pub fn write_split(root: &Path, split: Split, pairs: &[ImagePair]) -> Result<()> {
    for p in pairs {
        let dir = root.join(split.as_str()).join(p.scene_id());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_png(p.blur(), &dir.join(format!("{}_blur.png", p.pair_id())))?;
        write_png(p.sharp(), &dir.join(format!("{}_sharp.png", p.pair_id())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = synthetic_scene(20, 30, 7);
        assert_eq!(a, synthetic_scene(20, 30, 7));
        assert_ne!(a, synthetic_scene(20, 30, 8));
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn blur_keeps_constants_and_smooths_edges() {
        let flat = Image::filled(10, 10, 0.4);
        let b = gaussian_blur(&flat, 1.5).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-5));
        let step = Image::from_fn(10, 10, |_, x, _| if x < 5 { 0.0 } else { 1.0 });
        let s = gaussian_blur(&step, 1.5).unwrap();
        assert!(s.get(5, 4, 0) > 0.05 && s.get(5, 5, 0) < 0.95);
    }
}
