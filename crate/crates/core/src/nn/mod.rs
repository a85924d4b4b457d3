//! Parameters and reusable network blocks.

pub mod blocks;
pub mod params;

pub use blocks::{
    default_groups, Conv2d, DownsampleBlock, GroupNorm, NonLocalBlock, ResidualBlock, UpsampleBlock,
};
pub use params::{init_uniform, Bound, ParamEntry, ParamId, ParamStore};
