//! Layers and the SMA transformer block.

pub mod attention;
pub mod block;
pub mod layers;

pub use attention::{ChannelAttention, MultiHeadAttention, PixelAttention, SpatialAttention};
pub use block::{BlockConfig, Emlp, GeluPlacement, Sma, SmaBlock, SmaTrace};
pub use layers::{Conv2d, ConvTranspose2d, DepthwiseConv2d, LayerNorm, Linear, LN_EPS};
