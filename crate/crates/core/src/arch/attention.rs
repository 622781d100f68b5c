use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{l2_normalize_last, Conv2d, ConvOpts};
use crate::efficiency::{FeatureShape, LayerKind, Profile, Profiler};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Init, ParamStore};

/// Where the channel statistics of simplified channel attention come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum ScaMode {
    /// Global average over the whole feature map.
    Global,
    /// Average over a `window × window` neighbourhood of every position.
    Local { window: usize },
}

/// Local statistics: mean over each `kh × kw` window inside the map
/// (`k = min(window, extent)`), edge-replicated back to full size. A window
/// covering the whole map degenerates to the global mean.
pub fn local_mean(x: &Tensor, window: usize) -> Result<Tensor> {
    if window == 0 {
        return Err(Error::Config("local window must be at least 1".into()));
    }
    let (_, _, h, w) = x.dims4()?;
    let kh = window.min(h);
    let kw = window.min(w);
    let pooled = ops::box_mean_valid(x, kh, kw)?;
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let top = (h - oh) / 2;
    let left = (w - ow) / 2;
    Ok(pooled
        .pad_with_same(2, top, h - oh - top)?
        .pad_with_same(3, left, w - ow - left)?)
}

/// Simplified channel attention: `x ⊙ conv1x1(pool(x))`.
#[derive(Clone, Debug)]
pub struct Sca {
    name: String,
    conv: Conv2d,
    mode: ScaMode,
}

impl Sca {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, mode: ScaMode) -> Result<Self> {
        if let ScaMode::Local { window: 0 } = mode {
            return Err(Error::Config(format!(
                "{name}: local window must be at least 1"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                channels,
                channels,
                (1, 1),
                ConvOpts::default(),
            )?,
            mode,
        })
    }

    pub fn mode(&self) -> ScaMode {
        self.mode
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn statistics(&self, x: &Tensor) -> Result<Tensor> {
        match self.mode {
            ScaMode::Global => Ok(x.mean_keepdim(2)?.mean_keepdim(3)?),
            ScaMode::Local { window } => local_mean(x, window),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let att = self.conv.forward(&self.statistics(x)?)?;
        Ok(x.broadcast_mul(&att)?)
    }
}

impl Profile for Sca {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        if p.policy().pooling {
            p.record(
                &format!("{}.pool", self.name),
                LayerKind::Pool,
                0,
                input.numel(),
            );
        }
        let stats = match self.mode {
            ScaMode::Global => FeatureShape {
                h: 1,
                w: 1,
                ..input
            },
            ScaMode::Local { .. } => input,
        };
        self.conv.profile(stats, p)?;
        let macs = if p.policy().attention_gating {
            input.numel()
        } else {
            0
        };
        p.record(&format!("{}.gate", self.name), LayerKind::Gate, 0, macs);
        Ok(input)
    }
}

/// Spatial attention map from channel mean and max, `k×k` conv, sigmoid.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    name: String,
    conv: Conv2d,
}

pub const SPATIAL_ATTENTION_KERNEL: usize = 7;

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, name: &str, kernel: usize) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{name}: kernel must be odd, got {kernel}"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                2,
                1,
                (kernel, kernel),
                ConvOpts::default(),
            )?,
        })
    }

    pub fn conv(&self) -> &Conv2d {
        &self.conv
    }

    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        let avg = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        let stacked = Tensor::cat(&[avg, max], 1)?;
        Ok(candle_nn::ops::sigmoid(&self.conv.forward(&stacked)?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.attention_map(x)?)?)
    }
}

impl Profile for SpatialAttention {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        self.conv.profile(FeatureShape { c: 2, ..input }, p)?;
        let macs = if p.policy().attention_gating {
            input.numel()
        } else {
            0
        };
        p.record(&format!("{}.gate", self.name), LayerKind::Gate, 0, macs);
        Ok(input)
    }
}

/// Multi-Dconv head transposed attention: attention across channels,
/// `C/heads × C/heads` per head, linear in `H·W`.
#[derive(Clone, Debug)]
pub struct Mdta {
    name: String,
    heads: usize,
    temperature: Tensor,
    qkv: Conv2d,
    qkv_dw: Conv2d,
    project_out: Conv2d,
}

impl Mdta {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{name}: {channels} channels not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            heads,
            temperature: store.param(&format!("{name}.temperature"), (heads, 1, 1), Init::Ones)?,
            qkv: Conv2d::new(
                store,
                &format!("{name}.qkv"),
                channels,
                3 * channels,
                (1, 1),
                ConvOpts::no_bias(),
            )?,
            qkv_dw: Conv2d::new(
                store,
                &format!("{name}.qkv_dwconv"),
                3 * channels,
                3 * channels,
                (3, 3),
                ConvOpts::depthwise(3 * channels, false),
            )?,
            project_out: Conv2d::new(
                store,
                &format!("{name}.project_out"),
                channels,
                channels,
                (1, 1),
                ConvOpts::no_bias(),
            )?,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn qkv(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (b, c, h, w) = x.dims4()?;
        let qkv = self.qkv_dw.forward(&self.qkv.forward(x)?)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(1, i * c, c)?
                .reshape((b, self.heads, c / self.heads, h * w))?)
        };
        Ok((split(0)?, split(1)?, split(2)?))
    }

    /// Softmax-normalized `B × heads × C/heads × C/heads` attention.
    pub fn attention_map(&self, x: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.qkv(x)?;
        self.attention_from(&q, &k)
    }

    fn attention_from(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let q = l2_normalize_last(q)?;
        let k = l2_normalize_last(k)?;
        let logits = q
            .matmul(&k.t()?)?
            .broadcast_mul(&self.temperature.unsqueeze(0)?)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (q, k, v) = self.qkv(x)?;
        let attn = self.attention_from(&q, &k)?;
        let out = attn.matmul(&v.contiguous()?)?.reshape((b, c, h, w))?;
        self.project_out.forward(&out)
    }
}

impl Profile for Mdta {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        let s = self.qkv.profile(input, p)?;
        self.qkv_dw.profile(s, p)?;
        let per_head = (input.c / self.heads) as u64;
        let macs = if p.policy().attention_products {
            2 * self.heads as u64 * per_head * per_head * (input.h * input.w) as u64
        } else {
            0
        };
        p.record(
            &format!("{}.attention", self.name),
            LayerKind::Attention,
            self.temperature.elem_count(),
            macs,
        );
        self.project_out.profile(input, p)
    }
}
