//! Minimal layer toolkit on top of candle tensors.

pub mod adam;
pub mod conv;
pub mod fused;
pub mod layers;
pub mod params;

pub use adam::{Adam, AdamConfig};
pub use conv::conv2d;
pub use fused::{channel_add, gelu, relu, silu};
pub use layers::{avg_pool, group_count, softmax_rows, upsample_nearest, Conv2d, GroupNorm, Linear};
pub use params::{Init, ParamPath, VarStore};
