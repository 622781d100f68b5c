use candle_core::Tensor;

use super::config::ModelConfig;
use crate::arch::{pixel_shuffle, BlockConfig, Conv2d, ConvOpts, NafBlock, Sca, ScaMode};
use crate::efficiency::{FeatureShape, Profile, Profiler};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::reparam::{RepConv, RepConvSpec};

/// Stem convolution: plain, or multi-branch while reparameterized training runs.
#[derive(Clone, Debug)]
pub(crate) enum Stem {
    Plain(Conv2d),
    /// The flag selects batch statistics for BN branches in training.
    Rep(RepConv, bool),
}

impl Stem {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        if cfg.use_reparam {
            Ok(Stem::Rep(
                RepConv::new(
                    store,
                    name,
                    RepConvSpec {
                        in_ch: cin,
                        out_ch: cout,
                        main_kernel: k,
                        branches: cfg.reparam.branches.clone(),
                        bn_per_branch: cfg.reparam.bn_per_branch,
                    },
                )?,
                cfg.reparam.train_batch_stats,
            ))
        } else {
            Ok(Stem::Plain(Conv2d::new(
                store,
                name,
                cin,
                cout,
                (k, k),
                ConvOpts::default(),
            )?))
        }
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        match self {
            Stem::Plain(c) => c.forward(x),
            Stem::Rep(r, batch_stats) => r.forward_t(x, train && *batch_stats),
        }
    }

    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        match self {
            Stem::Plain(c) => c.profile(input, p),
            Stem::Rep(r, _) => r.profile(input, p),
        }
    }
}

/// U-shaped NAFBlock network shared by the NAFNet, NAFRepLocal and SA-NAFNet
/// families: strided 2×2 conv downsampling, 1×1 conv + pixel-shuffle
/// upsampling, additive skips and a global residual.
#[derive(Clone, Debug)]
pub(crate) struct NafNet {
    intro: Stem,
    encoders: Vec<Vec<NafBlock>>,
    downs: Vec<Conv2d>,
    middle: Vec<NafBlock>,
    middle_sca: Option<Sca>,
    ups: Vec<Conv2d>,
    decoders: Vec<Vec<NafBlock>>,
    ending: Stem,
    global_residual: bool,
}

impl NafNet {
    pub(crate) fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let levels = cfg.levels();
        let block = |c: usize, level: usize| {
            BlockConfig::new(c)
                .with_sca(cfg.sca_mode)
                .with_spatial_attention(level < cfg.spatial_attention_levels)
        };
        let intro = Stem::new(store, "intro", 3, cfg.width, cfg.first_conv_kernel, cfg)?;
        let mut encoders = Vec::with_capacity(levels);
        let mut downs = Vec::with_capacity(levels);
        let mut c = cfg.width;
        for (i, &n) in cfg.enc_blocks.iter().enumerate() {
            encoders.push(
                (0..n)
                    .map(|j| NafBlock::new(store, &format!("encoders.{i}.{j}"), block(c, i)))
                    .collect::<Result<Vec<_>>>()?,
            );
            downs.push(Conv2d::new(
                store,
                &format!("downs.{i}"),
                c,
                2 * c,
                (2, 2),
                ConvOpts {
                    stride: 2,
                    ..ConvOpts::default()
                },
            )?);
            c *= 2;
        }
        let middle = (0..cfg.middle_blocks)
            .map(|j| NafBlock::new(store, &format!("middle_blks.{j}"), block(c, levels)))
            .collect::<Result<Vec<_>>>()?;
        let middle_sca = if cfg.use_middle_scag {
            Some(Sca::new(store, "middle_sca", c, ScaMode::Global)?)
        } else {
            None
        };
        let mut ups = Vec::with_capacity(levels);
        let mut decoders = Vec::with_capacity(levels);
        for (i, &n) in cfg.dec_blocks.iter().enumerate() {
            ups.push(Conv2d::new(
                store,
                &format!("ups.{i}"),
                c,
                2 * c,
                (1, 1),
                ConvOpts::no_bias(),
            )?);
            c /= 2;
            let level = levels - 1 - i;
            decoders.push(
                (0..n)
                    .map(|j| NafBlock::new(store, &format!("decoders.{i}.{j}"), block(c, level)))
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        let ending = Stem::new(store, "ending", cfg.width, 3, 3, cfg)?;
        Ok(Self {
            intro,
            encoders,
            downs,
            middle,
            middle_sca,
            ups,
            decoders,
            ending,
            global_residual: cfg.global_residual,
        })
    }

    pub(crate) fn rep_convs(&self) -> Vec<&RepConv> {
        [&self.intro, &self.ending]
            .into_iter()
            .filter_map(|s| match s {
                Stem::Rep(r, _) => Some(r),
                Stem::Plain(_) => None,
            })
            .collect()
    }

    pub(crate) fn forward_t(&self, inp: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = self.intro.forward_t(inp, train)?;
        let mut skips = Vec::with_capacity(self.encoders.len());
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            for b in enc {
                x = b.forward(&x)?;
            }
            skips.push(x.clone());
            x = down.forward(&x)?;
        }
        for b in &self.middle {
            x = b.forward(&x)?;
        }
        if let Some(sca) = &self.middle_sca {
            x = sca.forward(&x)?;
        }
        for ((dec, up), skip) in self.decoders.iter().zip(&self.ups).zip(skips.iter().rev()) {
            x = (pixel_shuffle(&up.forward(&x)?, 2)? + skip)?;
            for b in dec {
                x = b.forward(&x)?;
            }
        }
        let x = self.ending.forward_t(&x, train)?;
        if self.global_residual {
            Ok((x + inp)?)
        } else {
            Ok(x)
        }
    }
}

impl Profile for NafNet {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        if input.c != 3 {
            return Err(Error::Shape(format!(
                "expected 3 input channels, got {}",
                input.c
            )));
        }
        let mut s = self.intro.profile(input, p)?;
        let mut skips = Vec::new();
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            for b in enc {
                s = b.profile(s, p)?;
            }
            skips.push(s);
            s = down.profile(s, p)?;
        }
        for b in &self.middle {
            s = b.profile(s, p)?;
        }
        if let Some(sca) = &self.middle_sca {
            s = sca.profile(s, p)?;
        }
        for (dec, up) in self.decoders.iter().zip(&self.ups) {
            let u = up.profile(s, p)?;
            s = FeatureShape::new(u.c / 4, u.h * 2, u.w * 2);
            for b in dec {
                s = b.profile(s, p)?;
            }
        }
        self.ending.profile(s, p)
    }
}
