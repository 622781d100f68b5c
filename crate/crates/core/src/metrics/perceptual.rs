//! Learned perceptual distance over a pluggable feature extractor.
//!
//! Pretrained networks are not shipped. A backend exposes feature maps and
//! per-channel linear weights. [`StubBackend`] (identity features, unit
//! weights) serves tests, and [`ConvBackend`] loads a small convolutional
//! extractor from JSON so real weights can be plugged in.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

const NORM_EPS: f64 = 1e-10;

pub trait PerceptualBackend: Send + Sync {
    fn name(&self) -> String;
    /// Feature maps of an `N×3×H×W` batch in `[0,1]`.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
    /// One weight vector (length `C_l`) per feature layer.
    fn channel_weights(&self) -> Result<Vec<Tensor>>;
}

/// Single identity feature layer with unit weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct StubBackend;

impl PerceptualBackend for StubBackend {
    fn name(&self) -> String {
        "stub-identity".into()
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }

    fn channel_weights(&self) -> Result<Vec<Tensor>> {
        Ok(vec![Tensor::ones(3, DType::F64, &Device::Cpu)?])
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub relu: bool,
    /// Row-major `out×in×k×k`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    /// Channel weights of the distance head for this layer.
    pub lin: Vec<f64>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvBackendSpec {
    pub name: String,
    pub layers: Vec<ConvLayerSpec>,
}

/// Feed-forward conv stack; every layer's output is a feature map.
#[derive(Clone, Debug)]
pub struct ConvBackend {
    name: String,
    layers: Vec<(ConvLayerSpec, Tensor, Tensor, Tensor)>,
}

impl ConvBackend {
    pub fn from_spec(spec: ConvBackendSpec) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = 3;
        for (i, l) in spec.layers.into_iter().enumerate() {
            let err = |m: &str| Error::Config(format!("backend layer {i}: {m}"));
            if l.in_ch != prev {
                return Err(err(&format!(
                    "expects {} input channels, previous layer gives {prev}",
                    l.in_ch
                )));
            }
            if l.weight.len() != l.out_ch * l.in_ch * l.kernel * l.kernel {
                return Err(err("weight length does not match shape"));
            }
            if l.bias.len() != l.out_ch || l.lin.len() != l.out_ch {
                return Err(err("bias and lin need one entry per output channel"));
            }
            if l.lin.iter().any(|v| *v < 0.0) {
                return Err(err("channel weights must be nonnegative"));
            }
            let w = Tensor::from_vec(
                l.weight.clone(),
                (l.out_ch, l.in_ch, l.kernel, l.kernel),
                &Device::Cpu,
            )?;
            let b = Tensor::from_vec(l.bias.clone(), (1, l.out_ch, 1, 1), &Device::Cpu)?;
            let lin = Tensor::from_vec(l.lin.clone(), l.out_ch, &Device::Cpu)?;
            prev = l.out_ch;
            layers.push((l, w, b, lin));
        }
        if layers.is_empty() {
            return Err(Error::Config("backend needs at least one layer".into()));
        }
        Ok(Self {
            name: spec.name,
            layers,
        })
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ConvBackendSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_spec(spec)
    }
}

impl PerceptualBackend for ConvBackend {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for (spec, w, b, _) in &self.layers {
            let w = w.to_dtype(h.dtype())?;
            let b = b.to_dtype(h.dtype())?;
            let pad = if spec.stride == 1 { spec.kernel / 2 } else { 0 };
            h = h.conv2d(&w, pad, spec.stride, 1, 1)?.broadcast_add(&b)?;
            if spec.relu {
                h = h.relu()?;
            }
            out.push(h.clone());
        }
        Ok(out)
    }

    fn channel_weights(&self) -> Result<Vec<Tensor>> {
        Ok(self.layers.iter().map(|l| l.3.clone()).collect())
    }
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)?.sqrt()? + NORM_EPS)?;
    Ok(f.broadcast_div(&norm)?)
}

/// Differentiable distance on `N×3×H×W` tensors: per layer, unit-normalize
/// along channels, square the difference, weight channels, sum channels,
/// average spatially; sum over layers. Returns one value per batch item.
pub fn lpips_tensor(pred: &Tensor, gt: &Tensor, backend: &dyn PerceptualBackend) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let fa = backend.features(pred)?;
    let fb = backend.features(gt)?;
    let weights = backend.channel_weights()?;
    if fa.len() != weights.len() {
        return Err(Error::Config(
            "backend returned a different number of layers and weights".into(),
        ));
    }
    let mut total: Option<Tensor> = None;
    for ((a, b), w) in fa.iter().zip(&fb).zip(&weights) {
        let d = (unit_normalize(a)? - unit_normalize(b)?)?.sqr()?;
        let w = w.to_dtype(d.dtype())?.reshape((1, (), 1, 1))?;
        let per = d
            .broadcast_mul(&w)?
            .sum_keepdim(1)?
            .mean_keepdim(2)?
            .mean_keepdim(3)?
            .flatten_all()?;
        total = Some(match total {
            Some(t) => (t + per)?,
            None => per,
        });
    }
    total.ok_or_else(|| Error::Config("backend produced no feature layers".into()))
}

/// Perceptual distance between two images (0 for identical inputs).
pub fn lpips(pred: &Image, gt: &Image, backend: &dyn PerceptualBackend) -> Result<f64> {
    let a = pred.to_tensor(DType::F64, &Device::Cpu)?;
    let b = gt.to_tensor(DType::F64, &Device::Cpu)?;
    let v: Vec<f64> = lpips_tensor(&a, &b, backend)?.to_vec1()?;
    Ok(v[0].max(0.0))
}
