#![allow(dead_code)]

use std::sync::Arc;

use lynx_core::backbone::{extract_patches, BackboneInit};
use lynx_core::codec::LatentCodec;
use lynx_core::data_pipeline::Portrait;
use lynx_core::face::{FaceEmbedder, StubFaceEmbedder};
use lynx_core::flow_match::TrainExample;
use lynx_core::id_adapter::IdAdapterConfig;
use lynx_core::{FaceEmbedding, LatentVideo, LynxConfig, LynxModel, Matrix, ModelConfig, PackedBatch, ParamId, ParamStore, SampleCond};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Width-32 model for gradient checks and fast property tests.
pub fn small_config() -> LynxConfig {
    LynxConfig {
        model: ModelConfig {
            hidden_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            text_dim: 16,
            time_freq_dim: 32,
            ..ModelConfig::default()
        },
        id_adapter: IdAdapterConfig {
            face_dim: 32,
            n_id: 4,
            n_reg: 4,
            depth: 2,
            heads: 4,
            face_tokens: 2,
        },
        backbone_init: BackboneInit::Random { modulation_gain: 1.0 },
        text_tokens: 8,
        init_seed: 5,
    }
}

pub fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_latent(rng: &mut impl Rng, t: usize, h: usize, w: usize, c: usize) -> LatentVideo {
    LatentVideo::new(t, h, w, c, randn(rng, t * h * w * c)).unwrap()
}

pub fn random_face(rng: &mut impl Rng, dim: usize) -> FaceEmbedding {
    FaceEmbedding::normalized(randn(rng, dim)).unwrap()
}

/// Overwrites the listed parameters with N(0, std²) draws.
pub fn randomize(store: &mut ParamStore, ids: &[ParamId], std: f64, rng: &mut impl Rng) {
    for &id in ids {
        let (r, c) = store.value(id).shape();
        store.set(id, Matrix::randn(r, c, std, rng)).unwrap();
    }
}

pub fn adapter_gate_ids(model: &LynxModel) -> Vec<ParamId> {
    let mut v: Vec<ParamId> = model.id_adapter.blocks.iter().map(|b| b.gate).collect();
    v.extend(model.ref_adapter.blocks.iter().map(|b| b.gate));
    v
}

/// One-segment pack of a latent's patches.
pub fn single_pack(model: &LynxModel, x: &LatentVideo) -> PackedBatch {
    let (p, g) = extract_patches(x, model.config.model.patch).unwrap();
    let n = p.rows();
    PackedBatch::new(p, vec![0, n], vec![g], n).unwrap()
}

pub fn full_cond(model: &LynxModel, t: f64, caption: &str, face: FaceEmbedding, reference: &LatentVideo) -> SampleCond {
    SampleCond {
        t,
        text: model.embed_text(caption),
        face: Some(face),
        reference: Some(Arc::new(model.encode_reference(reference).unwrap())),
    }
}

pub fn max_rel_diff(a: &Matrix, reference: &Matrix) -> f64 {
    a.max_abs_diff(reference) / reference.max_abs().max(1e-12)
}

/// Rendered portrait clips through the toy codec, each with its stub face
/// embedding and first-frame reference latent.
pub fn portrait_examples(model: &LynxModel, subjects: usize, frames: usize, latent_side: usize) -> Vec<TrainExample> {
    let codec = LatentCodec::desk();
    let embedder = StubFaceEmbedder::desk(model.config.id_adapter.face_dim);
    (0..subjects)
        .map(|s| {
            let clip = Portrait::from_seed(s as u64).clip(latent_side * codec.pool, latent_side * codec.pool, frames);
            let latent = codec.encode(&clip).unwrap();
            TrainExample {
                reference: Some(latent.frame(0)),
                face: Some(embedder.embed(&clip[0]).unwrap().expect("portrait has a face")),
                text: model.embed_text("a person talking"),
                latent,
            }
        })
        .collect()
}
