use candle_core::Tensor;

use super::config::ModelConfig;
use crate::arch::{pixel_shuffle, pixel_unshuffle, Conv2d, ConvOpts, TransformerBlock};
use crate::efficiency::{FeatureShape, Profile, Profiler};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Transformer encoder-decoder: pixel-unshuffle down, pixel-shuffle up,
/// concatenated skips reduced by a 1×1 conv (except at full resolution, where
/// the decoder runs at twice the base width), residual prediction `Î = I + R`.
#[derive(Clone, Debug)]
pub(crate) struct RestormerNet {
    patch_embed: Conv2d,
    encoders: Vec<Vec<TransformerBlock>>,
    downs: Vec<Conv2d>,
    latent: Vec<TransformerBlock>,
    ups: Vec<Conv2d>,
    reduces: Vec<Option<Conv2d>>,
    decoders: Vec<Vec<TransformerBlock>>,
    refinement: Vec<TransformerBlock>,
    output: Conv2d,
}

fn stage(
    store: &mut ParamStore,
    prefix: &str,
    n: usize,
    channels: usize,
    heads: usize,
    gamma: f64,
) -> Result<Vec<TransformerBlock>> {
    (0..n)
        .map(|j| TransformerBlock::new(store, &format!("{prefix}.{j}"), channels, heads, gamma))
        .collect()
}

impl RestormerNet {
    pub(crate) fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let levels = cfg.levels();
        let dim = cfg.width;
        let g = cfg.gdfn_gamma;
        let conv3 = |store: &mut ParamStore, name: &str, cin: usize, cout: usize| {
            Conv2d::new(store, name, cin, cout, (3, 3), ConvOpts::no_bias())
        };
        let patch_embed = conv3(store, "patch_embed", 3, dim)?;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for l in 0..levels - 1 {
            let c = dim << l;
            encoders.push(stage(
                store,
                &format!("encoder_level{}", l + 1),
                cfg.enc_blocks[l],
                c,
                cfg.heads[l],
                g,
            )?);
            downs.push(conv3(store, &format!("down{}_{}", l + 1, l + 2), c, c / 2)?);
        }
        let deep = dim << (levels - 1);
        let latent = stage(
            store,
            "latent",
            cfg.enc_blocks[levels - 1],
            deep,
            cfg.heads[levels - 1],
            g,
        )?;
        let mut ups = Vec::new();
        let mut reduces = Vec::new();
        let mut decoders = Vec::new();
        for (i, &n) in cfg.dec_blocks.iter().enumerate() {
            let from = levels - i; // 1-based level being upsampled
            let c_in = dim << (from - 1);
            let c_out = c_in / 2;
            ups.push(conv3(
                store,
                &format!("up{}_{}", from, from - 1),
                c_in,
                2 * c_in,
            )?);
            let level = from - 1;
            if level > 1 {
                reduces.push(Some(Conv2d::new(
                    store,
                    &format!("reduce_chan_level{level}"),
                    2 * c_out,
                    c_out,
                    (1, 1),
                    ConvOpts::no_bias(),
                )?));
                decoders.push(stage(
                    store,
                    &format!("decoder_level{level}"),
                    n,
                    c_out,
                    cfg.heads[level - 1],
                    g,
                )?);
            } else {
                reduces.push(None);
                decoders.push(stage(
                    store,
                    &format!("decoder_level{level}"),
                    n,
                    2 * c_out,
                    cfg.heads[0],
                    g,
                )?);
            }
        }
        let refinement = stage(
            store,
            "refinement",
            cfg.refinement_blocks,
            2 * dim,
            cfg.heads[0],
            g,
        )?;
        let output = conv3(store, "output", 2 * dim, 3)?;
        Ok(Self {
            patch_embed,
            encoders,
            downs,
            latent,
            ups,
            reduces,
            decoders,
            refinement,
            output,
        })
    }

    pub(crate) fn output_conv(&self) -> &Conv2d {
        &self.output
    }

    pub(crate) fn forward(&self, inp: &Tensor) -> Result<Tensor> {
        let mut x = self.patch_embed.forward(inp)?;
        let mut skips = Vec::new();
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            for b in enc {
                x = b.forward(&x)?;
            }
            skips.push(x.clone());
            x = pixel_unshuffle(&down.forward(&x)?, 2)?;
        }
        for b in &self.latent {
            x = b.forward(&x)?;
        }
        for (((up, reduce), dec), skip) in self
            .ups
            .iter()
            .zip(&self.reduces)
            .zip(&self.decoders)
            .zip(skips.iter().rev())
        {
            x = pixel_shuffle(&up.forward(&x)?, 2)?;
            x = Tensor::cat(&[&x, skip], 1)?;
            if let Some(r) = reduce {
                x = r.forward(&x)?;
            }
            for b in dec {
                x = b.forward(&x)?;
            }
        }
        for b in &self.refinement {
            x = b.forward(&x)?;
        }
        Ok((self.output.forward(&x)? + inp)?)
    }
}

impl Profile for RestormerNet {
    fn profile(&self, input: FeatureShape, p: &mut Profiler) -> Result<FeatureShape> {
        if input.c != 3 {
            return Err(Error::Shape(format!(
                "expected 3 input channels, got {}",
                input.c
            )));
        }
        let mut s = self.patch_embed.profile(input, p)?;
        let mut skips = Vec::new();
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            for b in enc {
                s = b.profile(s, p)?;
            }
            skips.push(s);
            let d = down.profile(s, p)?;
            s = FeatureShape::new(d.c * 4, d.h / 2, d.w / 2);
        }
        for b in &self.latent {
            s = b.profile(s, p)?;
        }
        for (((up, reduce), dec), skip) in self
            .ups
            .iter()
            .zip(&self.reduces)
            .zip(&self.decoders)
            .zip(skips.iter().rev())
        {
            let u = up.profile(s, p)?;
            s = FeatureShape::new(u.c / 4 + skip.c, u.h * 2, u.w * 2);
            if let Some(r) = reduce {
                s = r.profile(s, p)?;
            }
            for b in dec {
                s = b.profile(s, p)?;
            }
        }
        for b in &self.refinement {
            s = b.profile(s, p)?;
        }
        self.output.profile(s, p)
    }
}
