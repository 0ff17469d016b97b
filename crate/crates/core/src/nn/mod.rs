//! Dense 64-bit tensors with reverse-mode differentiation and the layer
//! primitives the network is built from.

pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Mat, Var};
pub use layers::{
    softmax_xent, Allocation, AttentionScore, DensityAttention, DensityConnected, DensityMlp,
    Layout, Linear, Mlp,
};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamBuilder, ParamId, ParamStore};
