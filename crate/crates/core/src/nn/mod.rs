//! Layers with hand-written backward passes.
//!
//! Token matrices are row-major `n × d`; feature maps are channel-major
//! `c × (h·w)`. Every `backward` takes an optional gradient accumulator of the
//! layer's own type; passing `None` freezes the layer's parameters while still
//! propagating the input gradient.

mod activation;
mod attention;
mod conv;
mod layernorm;
mod linear;
mod lora;
mod params;
mod resize;

pub use activation::{gelu, gelu_backward, gelu_grad, sigmoid};
pub use attention::{AttnCache, Attention};
pub use conv::{Conv1x1, Conv3x3, TConv2x2};
pub use layernorm::{LayerNorm, LnCache};
pub use linear::Linear;
pub use lora::{LoraCache, LoraPair};
pub use params::{join, Params};
pub use resize::Bilinear;
