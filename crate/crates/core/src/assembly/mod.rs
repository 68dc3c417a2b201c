//! Model configuration, presets and construction of runnable backbones.

mod config;
mod model;
mod presets;

pub use config::{
    parse_resolution, Framework, ModelConfig, PatchEmbedKind, Scale, Structure, MULTI_STAGE_PATCH,
    NUM_STAGES, SINGLE_STAGE_PATCH,
};
pub use model::{Downsample, Head, Model, PatchEmbed, Stage, DEEP_EMBED_WIDTH};
pub use presets::{
    desk_preset, hybridize, preset, preset_by_name, DEFAULT_RESOLUTION, HYBRID_MS_S, HYBRID_MS_XS,
    IMAGENET_CLASSES, PRESET_NAMES,
};
