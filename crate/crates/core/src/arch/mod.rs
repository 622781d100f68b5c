//! Building blocks shared by every model family.

mod attention;
mod blocks;
mod layers;
mod shuffle;

pub use attention::{local_mean, Mdta, Sca, ScaMode, SpatialAttention, SPATIAL_ATTENTION_KERNEL};
pub use blocks::{gdfn_hidden, BlockConfig, GdfnLite, NafBlock, TransformerBlock};
pub use layers::{
    conv_macs, simple_gate, BatchNorm2d, ChannelScale, Conv2d, ConvOpts, LayerNorm2d,
    BATCH_NORM_EPS, LAYER_NORM_EPS,
};
pub use shuffle::{pixel_shuffle, pixel_unshuffle};
