//! Minimal dense autodiff used by the encoder and slot heads.

pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use layers::{AttentionPool, BiLstm, ColumnAttention, Linear, Lstm};
pub use params::{Gradients, ParamBuilder, ParamId, ParamStore};
pub use tensor::Tensor;
