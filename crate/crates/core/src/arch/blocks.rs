use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::attention::{Mdta, Sca, ScaMode, SpatialAttention, SPATIAL_ATTENTION_KERNEL};
use super::layers::{
    profile_simple_gate, simple_gate, ChannelScale, Conv2d, ConvOpts, LayerNorm2d,
};
use crate::efficiency::{FeatureShape, LayerKind, Profile, Profiler};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub sca_mode: ScaMode,
    pub dw_expand: usize,
    pub ffn_expand: usize,
    pub spatial_attention: bool,
}

impl BlockConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            sca_mode: ScaMode::Global,
            dw_expand: 2,
            ffn_expand: 2,
            spatial_attention: false,
        }
    }

    pub fn with_sca(mut self, mode: ScaMode) -> Self {
        self.sca_mode = mode;
        self
    }

    pub fn with_spatial_attention(mut self, on: bool) -> Self {
        self.spatial_attention = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "block channels must be even, got {}",
                self.channels
            )));
        }
        if self.dw_expand == 0 || self.ffn_expand == 0 {
            return Err(Error::Config("expansion ratios must be positive".into()));
        }
        if let ScaMode::Local { window: 0 } = self.sca_mode {
            return Err(Error::Config("local window must be at least 1".into()));
        }
        Ok(())
    }
}

/// Activation-free residual block: a spatial-mixing branch and a channel
/// MLP branch, each gated by SimpleGate and added back with a learnable
/// per-channel scale that starts at zero.
#[derive(Clone, Debug)]
pub struct NafBlock {
    name: String,
    cfg: BlockConfig,
    norm1: LayerNorm2d,
    conv1: Conv2d,
    conv2: Conv2d,
    sca: Sca,
    sa: Option<SpatialAttention>,
    conv3: Conv2d,
    beta: ChannelScale,
    norm2: LayerNorm2d,
    conv4: Conv2d,
    conv5: Conv2d,
    gamma: ChannelScale,
}

impl NafBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: BlockConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let dw = c * cfg.dw_expand;
        let ffn = c * cfg.ffn_expand;
        if !dw.is_multiple_of(2) || !ffn.is_multiple_of(2) {
            return Err(Error::Config("expanded widths must be even".into()));
        }
        let p = |s: &str| format!("{name}.{s}");
        Ok(Self {
            name: name.to_string(),
            cfg,
            norm1: LayerNorm2d::new(store, &p("norm1"), c)?,
            conv1: Conv2d::new(store, &p("conv1"), c, dw, (1, 1), ConvOpts::default())?,
            conv2: Conv2d::new(
                store,
                &p("conv2"),
                dw,
                dw,
                (3, 3),
                ConvOpts::depthwise(dw, true),
            )?,
            sca: Sca::new(store, &p("sca"), dw / 2, cfg.sca_mode)?,
            sa: if cfg.spatial_attention {
                Some(SpatialAttention::new(
                    store,
                    &p("sa"),
                    SPATIAL_ATTENTION_KERNEL,
                )?)
            } else {
                None
            },
            conv3: Conv2d::new(store, &p("conv3"), dw / 2, c, (1, 1), ConvOpts::default())?,
            beta: ChannelScale::new(store, &p("beta"), c, Init::Zeros)?,
            norm2: LayerNorm2d::new(store, &p("norm2"), c)?,
            conv4: Conv2d::new(store, &p("conv4"), c, ffn, (1, 1), ConvOpts::default())?,
            conv5: Conv2d::new(store, &p("conv5"), ffn / 2, c, (1, 1), ConvOpts::default())?,
            gamma: ChannelScale::new(store, &p("gamma"), c, Init::Zeros)?,
        })
    }

    pub fn config(&self) -> &BlockConfig {
        &self.cfg
    }

    pub fn beta(&self) -> &ChannelScale {
        &self.beta
    }

    pub fn gamma(&self) -> &ChannelScale {
        &self.gamma
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.cfg.channels {
            return Err(Error::Shape(format!(
                "{} expects {} channels, got {c}",
                self.name, self.cfg.channels
            )));
        }
        let mut t = self.norm1.forward(x)?;
        t = self.conv2.forward(&self.conv1.forward(&t)?)?;
        t = simple_gate(&t)?;
        t = self.sca.forward(&t)?;
        if let Some(sa) = &self.sa {
            t = sa.forward(&t)?;
        }
        t = self.conv3.forward(&t)?;
        let y = (x + self.beta.forward(&t)?)?;

        let mut t = self.conv4.forward(&self.norm2.forward(&y)?)?;
        t = simple_gate(&t)?;
        t = self.conv5.forward(&t)?;
        Ok((y + self.gamma.forward(&t)?)?)
    }
}

impl Profile for NafBlock {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        if input.c != self.cfg.channels {
            return Err(Error::Shape(format!("{} channel mismatch", self.name)));
        }
        let s = self.norm1.profile(input, p)?;
        let s = self.conv1.profile(s, p)?;
        let s = self.conv2.profile(s, p)?;
        let s = profile_simple_gate(&format!("{}.sg1", self.name), s, p)?;
        let s = self.sca.profile(s, p)?;
        let s = match &self.sa {
            Some(sa) => sa.profile(s, p)?,
            None => s,
        };
        let s = self.conv3.profile(s, p)?;
        self.beta.profile(s, p)?;
        let s = self.norm2.profile(input, p)?;
        let s = self.conv4.profile(s, p)?;
        let s = profile_simple_gate(&format!("{}.sg2", self.name), s, p)?;
        let s = self.conv5.profile(s, p)?;
        self.gamma.profile(s, p)
    }
}

/// Hidden width of the gated feed-forward network, `floor(C·γ)`.
pub fn gdfn_hidden(channels: usize, gamma: f64) -> usize {
    (channels as f64 * gamma).floor() as usize
}

/// Gated feed-forward with a single depthwise conv on the gating branch:
/// `out = W_o( silu(dw(W_a x)) ⊙ W_b x )`.
#[derive(Clone, Debug)]
pub struct GdfnLite {
    name: String,
    hidden: usize,
    project_in: Conv2d,
    dwconv: Conv2d,
    project_out: Conv2d,
}

impl GdfnLite {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::Config(format!(
                "{name}: expansion factor must be positive"
            )));
        }
        let hidden = gdfn_hidden(channels, gamma);
        if hidden == 0 {
            return Err(Error::Config(format!(
                "{name}: hidden width rounds to zero"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            hidden,
            project_in: Conv2d::new(
                store,
                &format!("{name}.project_in"),
                channels,
                2 * hidden,
                (1, 1),
                ConvOpts::no_bias(),
            )?,
            dwconv: Conv2d::new(
                store,
                &format!("{name}.dwconv"),
                hidden,
                hidden,
                (3, 3),
                ConvOpts::depthwise(hidden, false),
            )?,
            project_out: Conv2d::new(
                store,
                &format!("{name}.project_out"),
                hidden,
                channels,
                (1, 1),
                ConvOpts::no_bias(),
            )?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let t = self.project_in.forward(x)?;
        let gate = t.narrow(1, 0, self.hidden)?;
        let value = t.narrow(1, self.hidden, self.hidden)?;
        let gate = self.dwconv.forward(&gate)?.silu()?;
        self.project_out.forward(&(gate * value)?)
    }
}

impl Profile for GdfnLite {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        let s = self.project_in.profile(input, p)?;
        self.dwconv.profile(
            FeatureShape {
                c: self.hidden,
                ..s
            },
            p,
        )?;
        let macs = if p.policy().elementwise_gates {
            (self.hidden * input.h * input.w) as u64
        } else {
            0
        };
        p.record(&format!("{}.gate", self.name), LayerKind::Gate, 0, macs);
        self.project_out.profile(
            FeatureShape {
                c: self.hidden,
                ..s
            },
            p,
        )
    }
}

/// Pre-norm transformer block: `x + MDTA(LN(x))`, then `x + GDFN(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: LayerNorm2d,
    attn: Mdta,
    norm2: LayerNorm2d,
    ffn: GdfnLite,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        gamma: f64,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm2d::new(store, &format!("{name}.norm1"), channels)?,
            attn: Mdta::new(store, &format!("{name}.attn"), channels, heads)?,
            norm2: LayerNorm2d::new(store, &format!("{name}.norm2"), channels)?,
            ffn: GdfnLite::new(store, &format!("{name}.ffn"), channels, gamma)?,
        })
    }

    pub fn attention(&self) -> &Mdta {
        &self.attn
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.ffn.forward(&self.norm2.forward(&x)?)?)?)
    }
}

impl Profile for TransformerBlock {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        let s = self.norm1.profile(input, p)?;
        let s = self.attn.profile(s, p)?;
        let s = self.norm2.profile(s, p)?;
        self.ffn.profile(s, p)
    }
}
