//! Planar-agnostic RGB image buffer used at the I/O and metric boundaries.
//!
//! Pixels are stored interleaved (`H × W × 3`, row-major) as `f32` in `[0, 1]`.
//! Conversion to and from `N×C×H×W` tensors happens in [`Image::to_tensor`] and
//! [`Image::from_tensor`].

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width * CHANNELS],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * CHANNELS {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot hold a {height}x{width}x3 image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                for c in 0..CHANNELS {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * CHANNELS + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.offset(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let o = self.offset(y, x, c);
        self.data[o] = v;
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |y, x, c| {
            self.get(top + y, left + x, c)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x, c| {
            self.get(self.height - 1 - y, x, c)
        })
    }

    /// Clamps every value into `[0, 1]` and returns how many values were changed.
    /// NaN is mapped to 0 and counted.
    pub fn clamp_unit(&mut self) -> usize {
        let mut clamped = 0;
        for v in self.data.iter_mut() {
            if v.is_nan() || *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            } else if *v > 1.0 {
                *v = 1.0;
                clamped += 1;
            }
        }
        clamped
    }

    /// ITU-R BT.601 luma plane, row-major.
    pub fn luminance(&self) -> Vec<f64> {
        self.data
            .chunks_exact(CHANNELS)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Extends the image by mirror reflection (edge pixel not repeated).
    /// Offsets larger than the image bounce back and forth.
    pub fn reflect_pad(&self, top: usize, bottom: usize, left: usize, right: usize) -> Self {
        let h = self.height;
        let w = self.width;
        Self::from_fn(h + top + bottom, w + left + right, |y, x, c| {
            let sy = reflect_index(y as isize - top as isize, h);
            let sx = reflect_index(x as isize - left as isize, w);
            self.get(sy, sx, c)
        })
    }

    /// Separable triangle-filter resampling. With `antialias` the filter support
    /// widens by the downscale factor, otherwise this is plain bilinear.
    pub fn resize_bilinear(&self, height: usize, width: usize, antialias: bool) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let rows = resample_weights(self.height, height, antialias);
        let cols = resample_weights(self.width, width, antialias);
        // horizontal pass
        let mut tmp = vec![0.0f32; self.height * width * CHANNELS];
        for y in 0..self.height {
            for (ox, (start, weights)) in cols.iter().enumerate() {
                for c in 0..CHANNELS {
                    let mut acc = 0.0f32;
                    for (k, wgt) in weights.iter().enumerate() {
                        acc += wgt * self.get(y, start + k, c);
                    }
                    tmp[(y * width + ox) * CHANNELS + c] = acc;
                }
            }
        }
        let mut out = Image::new(height, width);
        for (oy, (start, weights)) in rows.iter().enumerate() {
            for x in 0..width {
                for c in 0..CHANNELS {
                    let mut acc = 0.0f32;
                    for (k, wgt) in weights.iter().enumerate() {
                        acc += wgt * tmp[((start + k) * width + x) * CHANNELS + c];
                    }
                    out.set(oy, x, c, acc);
                }
            }
        }
        out
    }

    /// `1×3×H×W` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let hw = self.height * self.width;
        let mut planar = vec![0.0f32; hw * CHANNELS];
        for (i, px) in self.data.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                planar[c * hw + i] = px[c];
            }
        }
        let t = Tensor::from_vec(planar, (1, CHANNELS, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Accepts `1×3×H×W` or `3×H×W`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => {
                let (n, _, _, _) = t.dims4()?;
                if n != 1 {
                    return Err(Error::Shape(format!("expected batch of one, got {n}")));
                }
                t.squeeze(0)?
            }
            3 => t.clone(),
            r => {
                return Err(Error::Shape(format!(
                    "expected rank 3 or 4 image tensor, got {r}"
                )))
            }
        };
        let (c, h, w) = t.dims3()?;
        if c != CHANNELS {
            return Err(Error::Shape(format!("expected 3 channels, got {c}")));
        }
        let planar: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let hw = h * w;
        let mut data = vec![0.0f32; hw * CHANNELS];
        for i in 0..hw {
            for ch in 0..CHANNELS {
                data[i * CHANNELS + ch] = planar[ch * hw + i];
            }
        }
        Image::from_vec(h, w, data)
    }
}

pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn resample_weights(input: usize, output: usize, antialias: bool) -> Vec<(usize, Vec<f32>)> {
    let scale = input as f64 / output as f64;
    let support = if antialias && scale > 1.0 { scale } else { 1.0 };
    (0..output)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor() as isize).max(0) as usize;
            let hi = ((center + support).ceil() as usize).min(input);
            let mut weights: Vec<f64> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5) - center) / support;
                    (1.0 - d.abs()).max(0.0)
                })
                .collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                for w in weights.iter_mut() {
                    *w /= total;
                }
            }
            // trim zero tails so the window start is meaningful
            let first = weights.iter().position(|w| *w > 0.0).unwrap_or(0);
            let last = weights.iter().rposition(|w| *w > 0.0).unwrap_or(0);
            (
                lo + first,
                weights[first..=last].iter().map(|w| *w as f32).collect(),
            )
        })
        .collect()
}
