//! Full-resolution restoration: divisibility padding, tiled fallback and
//! test-time augmentation.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{read_image, write_result, DatasetIndex};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::models::ImageModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaTransform {
    Identity,
    Hflip,
    Vflip,
    Hvflip,
    /// Bilinear downscale to 90% (antialiased), restore, upscale back.
    #[serde(rename = "scale_down_10pct")]
    ScaleDown10pct,
}

impl TtaTransform {
    pub fn as_str(&self) -> &'static str {
        match self {
            TtaTransform::Identity => "identity",
            TtaTransform::Hflip => "hflip",
            TtaTransform::Vflip => "vflip",
            TtaTransform::Hvflip => "hvflip",
            TtaTransform::ScaleDown10pct => "scale_down_10pct",
        }
    }
}

impl FromStr for TtaTransform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "identity" => TtaTransform::Identity,
            "hflip" => TtaTransform::Hflip,
            "vflip" => TtaTransform::Vflip,
            "hvflip" => TtaTransform::Hvflip,
            "scale_down_10pct" | "scale" => TtaTransform::ScaleDown10pct,
            other => return Err(Error::Config(format!("unknown TTA transform {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtaMerge {
    #[default]
    Mean,
    Median,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TtaSpec {
    pub transforms: Vec<TtaTransform>,
    #[serde(default)]
    pub merge: TtaMerge,
}

/// Relative size of the downscaled TTA branch.
pub const TTA_SCALE: f64 = 0.9;

impl TtaSpec {
    pub fn identity() -> Self {
        Self {
            transforms: vec![TtaTransform::Identity],
            merge: TtaMerge::Mean,
        }
    }

    pub fn flips() -> Self {
        Self {
            transforms: vec![
                TtaTransform::Identity,
                TtaTransform::Hflip,
                TtaTransform::Vflip,
            ],
            merge: TtaMerge::Mean,
        }
    }

    /// Flips plus the slight downscale.
    pub fn flips_and_scale() -> Self {
        Self {
            transforms: vec![
                TtaTransform::Identity,
                TtaTransform::Hflip,
                TtaTransform::Vflip,
                TtaTransform::ScaleDown10pct,
            ],
            merge: TtaMerge::Mean,
        }
    }

    /// Comma-separated transform names, e.g. `identity,hflip,vflip`.
    pub fn parse(s: &str) -> Result<Self> {
        let transforms = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(TtaTransform::from_str)
            .collect::<Result<Vec<_>>>()?;
        let spec = Self {
            transforms,
            merge: TtaMerge::Mean,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.transforms.contains(&TtaTransform::Identity) {
            return Err(Error::Config("TTA spec must include identity".into()));
        }
        for (i, t) in self.transforms.iter().enumerate() {
            if self.transforms[..i].contains(t) {
                return Err(Error::Config(format!(
                    "TTA transform {} listed twice",
                    t.as_str()
                )));
            }
        }
        Ok(())
    }
}

fn flip(img: &Image, t: TtaTransform) -> Image {
    match t {
        TtaTransform::Hflip => img.flip_horizontal(),
        TtaTransform::Vflip => img.flip_vertical(),
        TtaTransform::Hvflip => img.flip_horizontal().flip_vertical(),
        _ => img.clone(),
    }
}

/// Tile origins along one axis: stride `tile - overlap`, last tile flush with
/// the border.
fn tile_origins(extent: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if extent <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut v: Vec<usize> = (0..)
        .map(|i| i * stride)
        .take_while(|o| o + tile < extent)
        .collect();
    v.push(extent - tile);
    v.dedup();
    v
}

/// Linear ramps over `overlap` pixels on sides that have a neighbour.
fn axis_ramp(len: usize, prev: bool, next: bool, overlap: usize) -> Vec<f64> {
    (0..len)
        .map(|i| {
            let mut w: f64 = 1.0;
            if prev {
                w = w.min((i + 1) as f64 / (overlap + 1) as f64);
            }
            if next {
                w = w.min((len - i) as f64 / (overlap + 1) as f64);
            }
            w
        })
        .collect()
}

struct TileGrid {
    rows: Vec<usize>,
    cols: Vec<usize>,
    th: usize,
    tw: usize,
    overlap: usize,
}

impl TileGrid {
    fn new(h: usize, w: usize, tile: usize, overlap: usize) -> Self {
        Self {
            rows: tile_origins(h, tile, overlap),
            cols: tile_origins(w, tile, overlap),
            th: tile.min(h),
            tw: tile.min(w),
            overlap,
        }
    }

    fn tiles(&self) -> impl Iterator<Item = (usize, usize, Vec<f64>, Vec<f64>)> + '_ {
        let nr = self.rows.len();
        let nc = self.cols.len();
        self.rows.iter().enumerate().flat_map(move |(i, &top)| {
            let ry = axis_ramp(self.th, i > 0, i + 1 < nr, self.overlap);
            self.cols.iter().enumerate().map(move |(j, &left)| {
                let rx = axis_ramp(self.tw, j > 0, j + 1 < nc, self.overlap);
                (top, left, ry.clone(), rx)
            })
        })
    }

    fn weight_sum(&self, h: usize, w: usize) -> Vec<f64> {
        let mut sum = vec![0f64; h * w];
        for (top, left, ry, rx) in self.tiles() {
            for (y, wy) in ry.iter().enumerate() {
                for (x, wx) in rx.iter().enumerate() {
                    sum[(top + y) * w + left + x] += wy * wx;
                }
            }
        }
        sum
    }
}

fn check_tiles(tile: usize, overlap: usize, divisor: usize) -> Result<()> {
    if tile == 0 || tile <= 2 * overlap || !tile.is_multiple_of(divisor) {
        return Err(Error::TileGeometry { tile, overlap });
    }
    Ok(())
}

/// Per-pixel sum of normalised feather weights over all tiles (1 everywhere
/// for a valid grid).
pub fn feather_coverage(h: usize, w: usize, tile: usize, overlap: usize) -> Result<Vec<f64>> {
    check_tiles(tile, overlap, 1)?;
    let grid = TileGrid::new(h, w, tile, overlap);
    let sum = grid.weight_sum(h, w);
    let mut cover = vec![0f64; h * w];
    for (top, left, ry, rx) in grid.tiles() {
        for (y, wy) in ry.iter().enumerate() {
            for (x, wx) in rx.iter().enumerate() {
                let i = (top + y) * w + left + x;
                cover[i] += wy * wx / sum[i];
            }
        }
    }
    Ok(cover)
}

/// Runs a model over whole images and keeps audit counters: forward passes,
/// values clamped into `[0,1]`, and non-finite outputs.
pub struct Restorer<'a> {
    model: &'a dyn ImageModel,
    tiling: Option<(usize, usize)>,
    max_pixels: Option<usize>,
    passes: AtomicUsize,
    clamped: AtomicUsize,
    nonfinite: AtomicUsize,
}

impl<'a> Restorer<'a> {
    pub fn new(model: &'a dyn ImageModel) -> Self {
        Self {
            model,
            tiling: None,
            max_pixels: None,
            passes: AtomicUsize::new(0),
            clamped: AtomicUsize::new(0),
            nonfinite: AtomicUsize::new(0),
        }
    }

    /// Routes [`restore_auto`](Self::restore_auto) and TTA through tiles.
    pub fn with_tiling(mut self, tile: usize, overlap: usize) -> Result<Self> {
        check_tiles(tile, overlap, self.model.divisor())?;
        self.tiling = Some((tile, overlap));
        Ok(self)
    }

    /// Refuses untiled inputs above this many pixels instead of risking an
    /// allocation failure.
    pub fn with_max_pixels(mut self, n: usize) -> Self {
        self.max_pixels = Some(n);
        self
    }

    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn clamped(&self) -> usize {
        self.clamped.load(Ordering::Relaxed)
    }

    pub fn nonfinite(&self) -> usize {
        self.nonfinite.load(Ordering::Relaxed)
    }

    /// Reflect-pads to the model's divisor, runs one forward pass and crops
    /// back. No clamping.
    fn forward_padded(&self, img: &Image) -> Result<Image> {
        let (h, w) = img.dims();
        let d = self.model.divisor();
        let (ph, pw) = ((d - h % d) % d, (d - w % d) % d);
        let (top, left) = (ph / 2, pw / 2);
        let padded = if ph == 0 && pw == 0 {
            img.clone()
        } else {
            img.reflect_pad(top, ph - top, left, pw - left)
        };
        let x = padded.to_tensor(self.model.dtype(), &Device::Cpu)?;
        let y = self.model.forward(&x)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        let out = Image::from_tensor(&y.to_dtype(DType::F32)?)?;
        if ph == 0 && pw == 0 {
            Ok(out)
        } else {
            out.crop(top, left, h, w)
        }
    }

    fn finish(&self, mut img: Image) -> Image {
        let bad = img.data().iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            self.nonfinite.fetch_add(bad, Ordering::Relaxed);
            log::warn!("{bad} non-finite output values replaced during clamping");
        }
        let n = img.clamp_unit();
        self.clamped.fetch_add(n, Ordering::Relaxed);
        img
    }

    /// Same-size restoration clamped to `[0,1]`.
    pub fn restore(&self, img: &Image) -> Result<Image> {
        let (h, w) = img.dims();
        if let Some(max) = self.max_pixels {
            if h * w > max {
                return Err(Error::Invalid(format!(
                    "{w}x{h} exceeds the untiled limit of {max} pixels; use tiled restoration"
                )));
            }
        }
        Ok(self.finish(self.forward_padded(img)?))
    }

    /// Overlapping tiles blended with linear feathering.
    pub fn restore_tiled(&self, img: &Image, tile: usize, overlap: usize) -> Result<Image> {
        check_tiles(tile, overlap, self.model.divisor())?;
        let (h, w) = img.dims();
        let grid = TileGrid::new(h, w, tile, overlap);
        let sum = grid.weight_sum(h, w);
        let mut acc = vec![0f64; h * w * 3];
        for (top, left, ry, rx) in grid.tiles() {
            let out = self.forward_padded(&img.crop(top, left, grid.th, grid.tw)?)?;
            for (y, wy) in ry.iter().enumerate() {
                for (x, wx) in rx.iter().enumerate() {
                    let i = (top + y) * w + left + x;
                    for c in 0..3 {
                        acc[i * 3 + c] += wy * wx * out.get(y, x, c) as f64;
                    }
                }
            }
        }
        let data = acc
            .iter()
            .enumerate()
            .map(|(k, v)| (v / sum[k / 3]) as f32)
            .collect();
        Ok(self.finish(Image::from_vec(h, w, data)?))
    }

    /// Tiled when configured, whole-image otherwise.
    pub fn restore_auto(&self, img: &Image) -> Result<Image> {
        match self.tiling {
            Some((t, o)) => self.restore_tiled(img, t, o),
            None => self.restore(img),
        }
    }

    /// For each transform: apply, restore, invert; then merge.
    pub fn tta_restore(&self, img: &Image, spec: &TtaSpec) -> Result<Image> {
        spec.validate()?;
        let (h, w) = img.dims();
        let mut outs = Vec::with_capacity(spec.transforms.len());
        for &t in &spec.transforms {
            let out = match t {
                TtaTransform::ScaleDown10pct => {
                    let sh = ((h as f64 * TTA_SCALE).round() as usize).max(1);
                    let sw = ((w as f64 * TTA_SCALE).round() as usize).max(1);
                    let small = self.restore_auto(&img.resize_bilinear(sh, sw, true))?;
                    small.resize_bilinear(h, w, false)
                }
                t => flip(&self.restore_auto(&flip(img, t))?, t),
            };
            outs.push(out);
        }
        if outs.len() == 1 {
            return Ok(outs.pop().expect("one output"));
        }
        let n = outs.len();
        let len = img.data().len();
        let data: Vec<f32> = match spec.merge {
            TtaMerge::Mean => (0..len)
                .map(|i| (outs.iter().map(|o| o.data()[i] as f64).sum::<f64>() / n as f64) as f32)
                .collect(),
            TtaMerge::Median => (0..len)
                .map(|i| {
                    let mut v: Vec<f32> = outs.iter().map(|o| o.data()[i]).collect();
                    v.sort_by(f32::total_cmp);
                    if n % 2 == 1 {
                        v[n / 2]
                    } else {
                        0.5 * (v[n / 2 - 1] + v[n / 2])
                    }
                })
                .collect(),
        };
        Ok(self.finish(Image::from_vec(h, w, data)?))
    }
}

pub fn restore(model: &dyn ImageModel, image: &Image) -> Result<Image> {
    Restorer::new(model).restore(image)
}

pub fn restore_tiled(
    model: &dyn ImageModel,
    image: &Image,
    tile: usize,
    overlap: usize,
) -> Result<Image> {
    Restorer::new(model).restore_tiled(image, tile, overlap)
}

pub fn tta_restore(model: &dyn ImageModel, image: &Image, spec: &TtaSpec) -> Result<Image> {
    Restorer::new(model).tta_restore(image, spec)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub written: Vec<PathBuf>,
    pub forward_passes: usize,
    pub clamped_values: usize,
    pub nonfinite_values: usize,
}

/// Restores every indexed blur image (in parallel) and writes PNGs named by
/// pair id under `out_dir`.
pub fn restore_index(
    restorer: &Restorer<'_>,
    index: &DatasetIndex,
    out_dir: &Path,
    tta: &TtaSpec,
) -> Result<EvalSummary> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let written = index
        .entries()
        .par_iter()
        .map(|e| {
            let img = read_image(&e.blur)?;
            let out = restorer.tta_restore(&img, tta)?;
            Ok(write_result(&out, &e.pair_id, out_dir)?.path)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalSummary {
        written,
        forward_passes: restorer.passes(),
        clamped_values: restorer.clamped(),
        nonfinite_values: restorer.nonfinite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Tensor;

    /// `y = a·x + b`, divisor 16.
    struct Affine(f64, f64);

    impl ImageModel for Affine {
        fn forward(&self, x: &Tensor) -> Result<Tensor> {
            Ok(x.affine(self.0, self.1)?)
        }
    }

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |y, x, c| {
            ((y * 31 + x * 17 + c * 7) % 97) as f32 / 96.0
        })
    }

    #[test]
    fn identity_restores_exactly_at_any_size() {
        let img = ramp(37, 50);
        let r = Restorer::new(&Affine(1.0, 0.0));
        assert_eq!(r.restore(&img).unwrap(), img);
        assert_eq!(r.passes(), 1);
        assert_eq!(r.clamped(), 0);
        assert_eq!(r.restore_tiled(&img, 32, 8).unwrap(), img);
    }

    #[test]
    fn tiled_matches_untiled_for_pointwise_models() {
        let img = ramp(70, 45);
        let m = Affine(0.7, 0.1);
        let a = restore(&m, &img).unwrap();
        for (t, o) in [(32, 8), (48, 4), (16, 7)] {
            let b = restore_tiled(&m, &img, t, o).unwrap();
            let err = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q).abs())
                .fold(0f32, f32::max);
            assert!(err < 1e-6, "tile {t}/{o}: {err}");
        }
        assert!(matches!(
            restore_tiled(&m, &img, 16, 8),
            Err(Error::TileGeometry { .. })
        ));
        assert!(matches!(
            restore_tiled(&m, &img, 40, 4),
            Err(Error::TileGeometry { .. })
        ));
    }

    #[test]
    fn feather_weights_partition_unity() {
        for (h, w, t, o) in [(70, 45, 32, 8), (100, 100, 40, 12), (10, 10, 32, 4)] {
            let cover = feather_coverage(h, w, t, o).unwrap();
            assert!(cover.iter().all(|c| (c - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn clamping_is_counted() {
        let img = Image::filled(16, 16, 0.8);
        let r = Restorer::new(&Affine(2.0, 0.0));
        let out = r.restore(&img).unwrap();
        assert!(out.data().iter().all(|v| *v == 1.0));
        assert_eq!(r.clamped(), 16 * 16 * 3);
    }

    #[test]
    fn tta_pass_count_and_equivariance() {
        let img = ramp(32, 48);
        let m = Affine(1.0, 0.0);
        let r = Restorer::new(&m);
        assert_eq!(
            r.tta_restore(&img, &TtaSpec::identity()).unwrap(),
            r.restore(&img).unwrap()
        );
        let r = Restorer::new(&m);
        let out = r.tta_restore(&img, &TtaSpec::flips()).unwrap();
        assert_eq!(r.passes(), 3);
        assert_eq!(out, img);
        let r = Restorer::new(&m);
        let out = r.tta_restore(&img, &TtaSpec::flips_and_scale()).unwrap();
        assert_eq!(r.passes(), 4);
        assert_eq!(out.dims(), img.dims());
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            TtaSpec::parse("identity,hflip,vflip").unwrap(),
            TtaSpec::flips()
        );
        assert!(TtaSpec::parse("hflip").is_err());
        assert!(TtaSpec::parse("identity,identity").is_err());
        let s: TtaSpec =
            serde_json::from_str(r#"{"transforms":["identity","scale_down_10pct"]}"#).unwrap();
        assert_eq!(s.transforms[1], TtaTransform::ScaleDown10pct);
    }
}
