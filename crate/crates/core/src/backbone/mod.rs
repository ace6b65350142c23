//! Desk-scale video diffusion transformer: patch embedding, adaLN-modulated
//! blocks with 3D rotary self-attention and text cross-attention, and hook
//! points for the identity and reference adapters.

mod model;
mod patch;
mod timestep;

pub use model::{
    Backbone, BackboneInit, BlockCtx, BlockHooks, BlockIds, Layout, ModelConfig, NoHooks, ReferenceScale, SegmentCond,
};
pub use patch::{
    assemble_patches, extract_patches, patchify, unpatchify, Grid, LatentVideo, LinearMap, PatchSpec, TokenSeq,
};
pub use timestep::{timestep_embed, TIMESTEP_FREQ_SPAN};
