//! Parameters, layers and checkpoint storage.

pub mod blob;
mod checkpoint;
mod layers;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use layers::{CrossInput, LayerNorm, LayerOutput, Linear, Mlp, MultiHeadAttention, TransformerLayer};
pub use params::{Initializer, ParamSet};
