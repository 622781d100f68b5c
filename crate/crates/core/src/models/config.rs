use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::arch::ScaMode;
use crate::error::{Error, Result};
use crate::reparam::{default_branches, BranchKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Nafnet,
    Nafreplocal,
    Restormerl,
    SaNafnet,
}

impl Family {
    pub fn is_naf(&self) -> bool {
        !matches!(self, Family::Restormerl)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Nafnet => "nafnet",
            Family::Nafreplocal => "nafreplocal",
            Family::Restormerl => "restormerl",
            Family::SaNafnet => "sa_nafnet",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "nafnet" => Ok(Family::Nafnet),
            "nafreplocal" => Ok(Family::Nafreplocal),
            "restormerl" => Ok(Family::Restormerl),
            "sa_nafnet" | "sanafnet" => Ok(Family::SaNafnet),
            other => Err(Error::Config(format!("unknown model family {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReparamOptions {
    pub branches: Vec<BranchKind>,
    pub bn_per_branch: bool,
    /// Normalize with batch statistics while training. Off by default:
    /// branches are grafted onto a trained stem, and batch statistics would
    /// rescale its output at the first step, so BN trains as a learnable
    /// affine over frozen running statistics.
    #[serde(default)]
    pub train_batch_stats: bool,
}

impl Default for ReparamOptions {
    fn default() -> Self {
        Self {
            branches: default_branches(),
            bn_per_branch: true,
            train_batch_stats: false,
        }
    }
}

pub const DEFAULT_GDFN_GAMMA: f64 = 2.2;

fn default_gamma() -> f64 {
    DEFAULT_GDFN_GAMMA
}

fn default_sca() -> ScaMode {
    ScaMode::Global
}

fn default_kernel() -> usize {
    3
}

fn default_true() -> bool {
    true
}

/// Declarative description of one architecture instance.
///
/// Block lists: `enc_blocks[i]` is encoder level `i` (full resolution first).
/// `dec_blocks` is in execution order, deepest decoder first. For the
/// transformer family the last encoder entry is the latent stage, so it has
/// one fewer decoder than encoder entries and `middle_blocks` must be 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub width: usize,
    pub enc_blocks: Vec<usize>,
    pub middle_blocks: usize,
    pub dec_blocks: Vec<usize>,
    #[serde(default)]
    pub heads: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gdfn_gamma: f64,
    #[serde(default = "default_sca")]
    pub sca_mode: ScaMode,
    #[serde(default = "default_kernel")]
    pub first_conv_kernel: usize,
    #[serde(default)]
    pub use_middle_scag: bool,
    #[serde(default)]
    pub use_reparam: bool,
    #[serde(default = "default_true")]
    pub global_residual: bool,
    #[serde(default)]
    pub reparam: ReparamOptions,
    /// Number of outermost levels whose blocks carry spatial attention.
    #[serde(default)]
    pub spatial_attention_levels: usize,
    /// Transformer blocks after the last decoder (transformer family only).
    #[serde(default)]
    pub refinement_blocks: usize,
}

/// Local SCA window used by the NAFRepLocal recipe: 3/4 of its 1024 px patch.
pub const NAFREPLOCAL_WINDOW: usize = 768;

impl ModelConfig {
    /// NAFNet grid point `C{width}-L{last}`: encoders `[1,1,1,L]`, one middle
    /// block, decoders `[1,1,1,1]`.
    pub fn nafnet(width: usize, last_enc_blocks: usize) -> Self {
        Self {
            family: Family::Nafnet,
            width,
            enc_blocks: vec![1, 1, 1, last_enc_blocks],
            middle_blocks: 1,
            dec_blocks: vec![1, 1, 1, 1],
            heads: Vec::new(),
            gdfn_gamma: DEFAULT_GDFN_GAMMA,
            sca_mode: ScaMode::Global,
            first_conv_kernel: 3,
            use_middle_scag: false,
            use_reparam: false,
            global_residual: true,
            reparam: ReparamOptions::default(),
            spatial_attention_levels: 0,
            refinement_blocks: 0,
        }
    }

    /// Deployment form of NAFRepLocal (calibrated against a 4.76M total).
    pub fn nafreplocal() -> Self {
        Self {
            family: Family::Nafreplocal,
            enc_blocks: vec![1, 1, 1, 1],
            sca_mode: ScaMode::Local {
                window: NAFREPLOCAL_WINDOW,
            },
            use_middle_scag: true,
            ..Self::nafnet(32, 1)
        }
    }

    /// RestormerL: four levels of 16/32/64/128 channels, blocks `[2,2,2,4]`.
    pub fn restormerl() -> Self {
        Self {
            family: Family::Restormerl,
            width: 16,
            enc_blocks: vec![2, 2, 2, 4],
            middle_blocks: 0,
            dec_blocks: vec![2, 2, 2],
            heads: vec![1, 2, 4, 8],
            ..Self::nafnet(16, 1)
        }
    }

    /// SA-NAFNet with block counts calibrated against 4.51M / 172.2G.
    pub fn sa_nafnet() -> Self {
        Self {
            family: Family::SaNafnet,
            width: 16,
            enc_blocks: vec![1, 3, 1, 29],
            middle_blocks: 1,
            dec_blocks: vec![1, 1, 3, 2],
            spatial_attention_levels: 2,
            ..Self::nafnet(16, 1)
        }
    }

    /// The shipped default for a family.
    pub fn default_for(family: Family) -> Self {
        match family {
            Family::Nafnet => Self::nafnet(16, 28),
            Family::Nafreplocal => Self::nafreplocal(),
            Family::Restormerl => Self::restormerl(),
            Family::SaNafnet => Self::sa_nafnet(),
        }
    }

    pub fn levels(&self) -> usize {
        self.enc_blocks.len()
    }

    /// Spatial divisibility the topology needs.
    pub fn divisor(&self) -> usize {
        match self.family {
            Family::Restormerl => 1 << self.levels().saturating_sub(1),
            _ => 1 << self.levels(),
        }
    }

    pub fn label(&self) -> String {
        match self.family {
            Family::Nafnet => format!(
                "NAFNet-C{}-L{}",
                self.width,
                self.enc_blocks.last().copied().unwrap_or(0)
            ),
            Family::Nafreplocal => "NAFRepLocal".into(),
            Family::Restormerl => "RestormerL".into(),
            Family::SaNafnet => "SA-NAFNet".into(),
        }
    }

    /// Collects every violated constraint instead of stopping at the first.
    pub fn validation_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(4..=64).contains(&self.width) {
            errs.push(format!("width {} outside 4..=64", self.width));
        }
        if !self.width.is_multiple_of(2) {
            errs.push(format!("width {} must be even", self.width));
        }
        if self.enc_blocks.is_empty() {
            errs.push("enc_blocks must not be empty".into());
        }
        if self.first_conv_kernel.is_multiple_of(2) || self.first_conv_kernel == 0 {
            errs.push(format!(
                "first_conv_kernel {} must be odd",
                self.first_conv_kernel
            ));
        }
        if let ScaMode::Local { window: 0 } = self.sca_mode {
            errs.push("local SCA window must be at least 1".into());
        }
        if self.use_reparam && self.reparam.branches.is_empty() {
            errs.push("reparam.branches must not be empty".into());
        }
        if self.use_reparam && self.reparam.branches.contains(&BranchKind::Identity) {
            errs.push(
                "identity branch needs equal in/out channels; the stem convs change channel count"
                    .into(),
            );
        }
        if self.family.is_naf() {
            if self.dec_blocks.len() != self.enc_blocks.len() {
                errs.push(format!(
                    "enc_blocks ({}) and dec_blocks ({}) must have the same length",
                    self.enc_blocks.len(),
                    self.dec_blocks.len()
                ));
            }
            if self.refinement_blocks != 0 {
                errs.push("refinement_blocks applies to restormerl only".into());
            }
            if self.spatial_attention_levels > self.levels() {
                errs.push(format!(
                    "spatial_attention_levels {} exceeds {} levels",
                    self.spatial_attention_levels,
                    self.levels()
                ));
            }
            if self.family == Family::SaNafnet && self.spatial_attention_levels == 0 {
                errs.push("sa_nafnet needs spatial_attention_levels >= 1".into());
            }
            if self.family != Family::SaNafnet && self.spatial_attention_levels != 0 {
                errs.push("spatial attention is specific to sa_nafnet".into());
            }
            if self.family == Family::Nafreplocal && !matches!(self.sca_mode, ScaMode::Local { .. })
            {
                errs.push("nafreplocal uses local SCA in every block".into());
            }
        } else {
            let levels = self.levels();
            if levels < 2 {
                errs.push("restormerl needs at least two levels".into());
            }
            if self.dec_blocks.len() + 1 != levels {
                errs.push(format!(
                    "restormerl needs {} decoder entries for {} levels, got {}",
                    levels.saturating_sub(1),
                    levels,
                    self.dec_blocks.len()
                ));
            }
            if self.middle_blocks != 0 {
                errs.push(
                    "restormerl has no middle blocks; the last encoder entry is the latent stage"
                        .into(),
                );
            }
            if self.heads.len() != levels {
                errs.push(format!(
                    "heads needs {levels} entries, got {}",
                    self.heads.len()
                ));
            }
            for (i, &h) in self.heads.iter().enumerate() {
                let c = self.width << i;
                if h == 0 || !c.is_multiple_of(h) {
                    errs.push(format!(
                        "level {i}: {c} channels not divisible by {h} heads"
                    ));
                }
                if i == 0 && h != 0 && !(2 * c).is_multiple_of(h) {
                    errs.push(format!(
                        "level 0 decoder: {} channels not divisible by {h} heads",
                        2 * c
                    ));
                }
            }
            if !(self.gdfn_gamma > 0.0) {
                errs.push("gdfn_gamma must be positive".into());
            }
            if self.use_middle_scag || self.use_reparam || self.spatial_attention_levels != 0 {
                errs.push(
                    "restormerl supports none of middle SCA, reparam or spatial attention".into(),
                );
            }
            if !self.global_residual {
                errs.push("restormerl always predicts a residual".into());
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.validation_errors();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_defaults_validate_and_round_trip() {
        for fam in [
            Family::Nafnet,
            Family::Nafreplocal,
            Family::Restormerl,
            Family::SaNafnet,
        ] {
            let cfg = ModelConfig::default_for(fam);
            cfg.validate().unwrap();
            let back = ModelConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn collects_multiple_errors() {
        let mut cfg = ModelConfig::nafnet(3, 1);
        cfg.dec_blocks.pop();
        assert!(cfg.validation_errors().len() >= 2);
    }

    #[test]
    fn family_parse() {
        assert_eq!("SA-NAFNet".parse::<Family>().unwrap(), Family::SaNafnet);
        assert!("unet".parse::<Family>().is_err());
    }

    #[test]
    fn minimal_toml_gets_defaults() {
        let cfg = ModelConfig::from_toml(
            "family = \"nafnet\"\nwidth = 16\nenc_blocks = [1,1,1,28]\nmiddle_blocks = 1\ndec_blocks = [1,1,1,1]\n",
        )
        .unwrap();
        assert_eq!(cfg, ModelConfig::nafnet(16, 28));
    }
}
