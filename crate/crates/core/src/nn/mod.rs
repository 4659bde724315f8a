//! Small neural-network toolkit on top of candle tensors: seeded parameter
//! storage, dense layers, the optimizer and the binary parameter-block format.

pub mod blocks;
pub mod layers;
pub mod optim;
pub mod params;

pub use layers::{LayerNorm, Linear, Mlp};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{Init, ParamStore};
