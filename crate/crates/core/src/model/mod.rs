//! The density-assigned segmentation network.

pub mod config;
pub mod input;
pub mod lfa;
pub mod net;

pub use config::{FeatureAllocation, HdvConfig};
pub use input::{build_input, LevelInput, NetInput, Scene};
pub use lfa::{Aggregator, Elfa, Lfa};
pub use net::{
    is_final_param, parameter_count, shape_trace, BlockShape, DbBlock, FinalClassifier, Forward, HdvNet,
    Outputs, TrainHead, UpBlock, HEADS,
};
