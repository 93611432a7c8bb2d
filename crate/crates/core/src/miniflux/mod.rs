//! Miniature rectified-flow dual-stream transformer.
//!
//! Reproduces, at desk scale, the structural mechanism studied by the rest of
//! the crate: text and pixel token streams project into a shared attention
//! over the concatenated sequence, a timestep pathway modulates both streams,
//! and the pixel stream's output head predicts the flow-matching velocity.

mod config;
mod forward;
mod params;
mod sampler;

pub use config::MiniFluxConfig;
pub use forward::{
    attention_weights, forward_velocity, build_forward_graph, AttentionRecord, ColumnMask,
    ForwardGraph, HeadNodes, Prompt, TrainableSet, PARAM_RMS_EPS,
};
pub use params::{MiniFluxParams, ProjName, StreamParams, BlockParams};
pub use sampler::{
    euler_sample, make_flow_state, FlowState, GuidedField, ModelField, Trajectory, VelocityField,
    PAPER_SAMPLER_STEPS,
};
