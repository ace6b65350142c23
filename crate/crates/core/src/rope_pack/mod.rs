//! Spatio-temporal frame packing.
//!
//! Heterogeneous images and videos are concatenated into one long token
//! sequence. A block-diagonal mask keeps every sample's attention inside its
//! own segment and 3D rotary positions restart at the origin per segment, so
//! a packed forward is equivalent to running each sample on its own.

mod mask;
mod pack;
mod rope;

pub use mask::{build_mask, build_padded_mask, AttentionMask};
pub use pack::{pack, pack_report, unpack, PackReport, PackSummary, PackedBatch};
pub use rope::{apply_rope, rope_3d, RopeBands, RopeTable, ROPE_BASE};
