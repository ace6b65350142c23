//! Identity-preserving video generation at desk scale.
//!
//! A small diffusion transformer over latent video patches, an identity
//! adapter fed by face embeddings, a reference adapter fed by a frozen copy of
//! the backbone, spatio-temporal packing of mixed image and video batches,
//! rectified-flow training and sampling, a manifest-driven data pipeline and
//! an evaluation harness.

pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod codec;
pub mod data_pipeline;
pub mod error;
pub mod eval_harness;
pub mod face;
pub mod gradcheck;
pub mod flow_match;
pub mod id_adapter;
pub mod layers;
pub mod media;
pub mod model;
pub mod params;
pub mod ref_adapter;
pub mod rope_pack;
pub mod tensor;
pub mod text;

pub use backbone::{Grid, LatentVideo, ModelConfig, PatchSpec, TokenSeq};
pub use error::{LynxError, Result};
pub use id_adapter::{FaceEmbedding, IdentityTokens};
pub use model::{Adapters, LynxConfig, LynxModel, SampleCond};
pub use ref_adapter::RefActivationSet;
pub use params::{ParamId, ParamStore};
pub use rope_pack::PackedBatch;
pub use tensor::Matrix;
