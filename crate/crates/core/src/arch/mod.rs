//! Declarative architectures, the named variants, and static analysis.

mod analysis;
mod network;
mod spec;

pub use analysis::{
    count_layers, count_params, factored_vs_joint_weights, layer_params, receptive_extent, receptive_field, LayerCount,
    ParamReport,
};
pub use network::{argmax_channels, Network};
pub use spec::{
    build_frontend, build_variant, ArchSpec, Channels, LayerKind, LayerSpec, Variant, STAGE_BLOCKS, VARIANTS,
};
