use candle_core::{Tensor, Var, D};

use crate::efficiency::{FeatureShape, LayerKind, Profile, Profiler};
use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Init, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOpts {
    pub stride: usize,
    pub groups: usize,
    pub bias: bool,
}

impl Default for ConvOpts {
    fn default() -> Self {
        Self {
            stride: 1,
            groups: 1,
            bias: true,
        }
    }
}

impl ConvOpts {
    pub fn no_bias() -> Self {
        Self {
            bias: false,
            ..Self::default()
        }
    }

    pub fn depthwise(channels: usize, bias: bool) -> Self {
        Self {
            stride: 1,
            groups: channels,
            bias,
        }
    }
}

/// 2-D convolution with "same" padding for stride 1 and no padding otherwise.
/// Weight layout `Cout × Cin/groups × kh × kw`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    name: String,
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: (usize, usize),
    groups: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: (usize, usize),
        opts: ConvOpts,
    ) -> Result<Self> {
        if opts.groups == 0
            || !in_ch.is_multiple_of(opts.groups)
            || !out_ch.is_multiple_of(opts.groups)
        {
            return Err(Error::Config(format!(
                "{name}: {in_ch}->{out_ch} channels not divisible into {} groups",
                opts.groups
            )));
        }
        let fan_in = in_ch / opts.groups * kernel.0 * kernel.1;
        let weight = store.param(
            &format!("{name}.weight"),
            (out_ch, in_ch / opts.groups, kernel.0, kernel.1),
            Init::FanIn(fan_in),
        )?;
        let bias = if opts.bias {
            Some(store.param(&format!("{name}.bias"), (out_ch,), Init::FanIn(fan_in))?)
        } else {
            None
        };
        let padding = if opts.stride == 1 {
            (kernel.0 / 2, kernel.1 / 2)
        } else {
            (0, 0)
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            stride: opts.stride,
            padding,
            groups: opts.groups,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        let d = self.weight.dims();
        (d[2], d[3])
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1] * self.groups
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1
            && self.groups == self.in_channels()
            && self.groups == self.out_channels()
            && self.stride == 1
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (ph, pw) = self.padding;
        let y = if self.is_depthwise() {
            ops::depthwise_conv2d(x, &self.weight, ph, pw)?
        } else if ph == pw {
            x.conv2d(&self.weight, ph, self.stride, 1, self.groups)?
        } else {
            x.pad_with_zeros(2, ph, ph)?
                .pad_with_zeros(3, pw, pw)?
                .conv2d(&self.weight, 0, self.stride, 1, self.groups)?
        };
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    pub fn output_shape(&self, input: FeatureShape) -> FeatureShape {
        let (kh, kw) = self.kernel_size();
        let (ph, pw) = self.padding;
        FeatureShape {
            c: self.out_channels(),
            h: (input.h + 2 * ph - kh) / self.stride + 1,
            w: (input.w + 2 * pw - kw) / self.stride + 1,
        }
    }
}

/// Analytic multiply-accumulate count of one convolution application.
pub fn conv_macs(
    in_ch: usize,
    out_ch: usize,
    groups: usize,
    kernel: (usize, usize),
    out_hw: (usize, usize),
    bias: bool,
    count_bias: bool,
) -> u64 {
    let spatial = (out_hw.0 * out_hw.1) as u64;
    let mut macs = (in_ch / groups) as u64 * out_ch as u64 * (kernel.0 * kernel.1) as u64 * spatial;
    if bias && count_bias {
        macs += out_ch as u64 * spatial;
    }
    macs
}

impl Profile for Conv2d {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        if input.c != self.in_channels() {
            return Err(Error::Shape(format!(
                "{} expects {} channels, got {}",
                self.name,
                self.in_channels(),
                input.c
            )));
        }
        let out = self.output_shape(input);
        let params = self.weight.elem_count() + self.bias.as_ref().map_or(0, |b| b.elem_count());
        let macs = conv_macs(
            self.in_channels(),
            self.out_channels(),
            self.groups,
            self.kernel_size(),
            (out.h, out.w),
            self.bias.is_some(),
            p.policy().conv_bias,
        );
        p.record(&self.name, LayerKind::Conv, params, macs);
        Ok(out)
    }
}

/// Per-position normalization across channels with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    name: String,
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            weight: store.param(&format!("{name}.weight"), (channels,), Init::Ones)?,
            bias: store.param(&format!("{name}.bias"), (channels,), Init::Zeros)?,
            eps: LAYER_NORM_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mu = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mu)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let w = self.weight.reshape((1, (), 1, 1))?;
        let b = self.bias.reshape((1, (), 1, 1))?;
        Ok(y.broadcast_mul(&w)?.broadcast_add(&b)?)
    }
}

impl Profile for LayerNorm2d {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        let macs = if p.policy().normalization {
            2 * input.numel()
        } else {
            0
        };
        p.record(&self.name, LayerKind::Norm, 2 * input.c, macs);
        Ok(input)
    }
}

/// Batch normalization with running statistics kept as buffers.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    name: String,
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    eps: f64,
    momentum: f64,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            weight: store.param(&format!("{name}.weight"), (channels,), Init::Ones)?,
            bias: store.param(&format!("{name}.bias"), (channels,), Init::Zeros)?,
            running_mean: store.buffer(
                &format!("{name}.running_mean"),
                (channels,),
                Init::Zeros,
            )?,
            running_var: store.buffer(&format!("{name}.running_var"), (channels,), Init::Ones)?,
            eps: BATCH_NORM_EPS,
            momentum: 0.1,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn running_mean(&self) -> &Var {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Var {
        &self.running_var
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// In training mode normalizes with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (mean, var) = if train {
            let (n, _, h, w) = x.dims4()?;
            let count = (n * h * w) as f64;
            let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let var = x
                .broadcast_sub(&mean)?
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let m = self.momentum;
            let batch_mean = mean.flatten_all()?.detach();
            let unbiased = (var.flatten_all()?.detach() * (count / (count - 1.0).max(1.0)))?;
            self.running_mean
                .set(&((self.running_mean.as_tensor() * (1.0 - m))? + (batch_mean * m)?)?)?;
            self.running_var
                .set(&((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?)?;
            (mean, var)
        } else {
            (
                self.running_mean
                    .as_detached_tensor()
                    .reshape((1, (), 1, 1))?,
                self.running_var
                    .as_detached_tensor()
                    .reshape((1, (), 1, 1))?,
            )
        };
        let y = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight.reshape((1, (), 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, (), 1, 1))?)?)
    }

    /// Per-channel `(scale, shift)` such that eval-mode BN is `x·scale + shift`.
    pub fn eval_affine(&self) -> Result<(Tensor, Tensor)> {
        let std = (self.running_var.as_detached_tensor() + self.eps)?.sqrt()?;
        let scale = self.weight.div(&std)?;
        let shift = (&self.bias - self.running_mean.as_detached_tensor().mul(&scale)?)?;
        Ok((scale, shift))
    }
}

impl Profile for BatchNorm2d {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        let macs = if p.policy().normalization {
            input.numel()
        } else {
            0
        };
        p.record(&self.name, LayerKind::Norm, 2 * input.c, macs);
        Ok(input)
    }
}

/// Per-channel learnable scale `1×C×1×1`, used for residual branch weights.
#[derive(Clone, Debug)]
pub struct ChannelScale {
    name: String,
    scale: Tensor,
}

impl ChannelScale {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, init: Init) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            scale: store.param(name, (1, channels, 1, 1), init)?,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.scale
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.scale)?)
    }
}

impl Profile for ChannelScale {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        let macs = if p.policy().residual_scales {
            input.numel()
        } else {
            0
        };
        p.record(&self.name, LayerKind::Scale, self.scale.elem_count(), macs);
        Ok(input)
    }
}

/// Splits channels in half and multiplies the halves.
pub fn simple_gate(x: &Tensor) -> Result<Tensor> {
    let c = x.dim(1)?;
    if c % 2 != 0 {
        return Err(Error::Shape(format!(
            "SimpleGate needs an even channel count, got {c}"
        )));
    }
    let a = x.narrow(1, 0, c / 2)?;
    let b = x.narrow(1, c / 2, c / 2)?;
    Ok((a * b)?)
}

pub(crate) fn profile_simple_gate(
    name: &str,
    input: FeatureShape,
    p: &mut Profiler,
) -> Result<FeatureShape> {
    if !input.c.is_multiple_of(2) {
        return Err(Error::Shape(format!(
            "SimpleGate needs an even channel count, got {}",
            input.c
        )));
    }
    let out = FeatureShape {
        c: input.c / 2,
        ..input
    };
    let macs = if p.policy().elementwise_gates {
        out.numel()
    } else {
        0
    };
    p.record(name, LayerKind::Gate, 0, macs);
    Ok(out)
}

/// L2-normalizes along the last dimension (`x / max(‖x‖, 1e-12)`).
pub(crate) fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}
