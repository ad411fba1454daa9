//! The fusion adapter: per-expert cross-attention extraction, dynamic
//! gating, transformer mixing, token reduction and projection.

pub mod config;
pub mod layers;
pub mod model;
pub mod params;
pub mod text;

pub use config::{AdapterConfig, GatingMode};
pub use layers::{
    extract_expert_knowledge, fuse, gate_weights, transformer_block, GateWeights, GatingInput,
};
pub use model::{adapter_forward, adapter_forward_detailed, AdapterOutput, ExpertFeatures};
pub use params::{init_params, load_params, save_params, AdapterParams, ParamTree};
pub use text::{encode_text, HashTextEncoder, TextEncoder, TextToken};
