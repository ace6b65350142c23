mod common;

use std::sync::Arc;

use common::*;
use lynx_core::autograd::AttnPattern;
use lynx_core::backbone::{extract_patches, Layout, NoHooks, SegmentCond};
use lynx_core::gradcheck::check_param_grads;
use lynx_core::{LynxModel, Matrix, PackedBatch};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
const TOL: f64 = 1e-4;

fn model(seed: u64) -> LynxModel {
    let mut m = LynxModel::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = adapter_gate_ids(&m);
    ids.extend(m.id_adapter.resampler.ids());
    randomize(&mut m.store, &ids, 0.3, &mut rng);
    m
}

#[test]
fn dit_block_parameters() {
    let m = model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let xs = [random_latent(&mut rng, 2, 2, 4, 4), random_latent(&mut rng, 1, 4, 2, 4)];
    let parts: Vec<_> = xs.iter().map(|x| extract_patches(x, m.config.model.patch).unwrap()).collect();
    let packed = PackedBatch::new(
        Matrix::concat_rows(&[&parts[0].0, &parts[1].0]).unwrap(),
        vec![0, 4, 6],
        vec![parts[0].1, parts[1].1],
        8,
    )
    .unwrap()
    .pad_to_budget();
    let layout = Layout::for_pack(&packed, &m.config.model).unwrap();
    let conds = [
        SegmentCond { t: 0.3, text: m.embed_text("a person smiling") },
        SegmentCond { t: 0.8, text: m.embed_text("") },
    ];
    let h = Matrix::randn(8, 32, 1.0, &mut rng);
    let ids = m.backbone.blocks[0].ids();
    let report = check_param_grads(&m.store, &ids, EPS, FLOOR, |tape| {
        let ctx = m.backbone.context(tape, &layout, &conds)?;
        let x = tape.constant(h.clone());
        m.backbone.block_forward(tape, 0, x, &ctx, &mut NoHooks)
    })
    .unwrap();
    assert!(report.entries > 10_000);
    assert!(report.max_rel_err <= TOL, "{report:?}");
}

#[test]
fn resampler_parameters() {
    let m = model(2);
    let face = random_face(&mut ChaCha8Rng::seed_from_u64(2), 32);
    let ids = m.id_adapter.resampler.ids();
    let report = check_param_grads(&m.store, &ids, EPS, FLOOR, |tape| {
        let f = tape.constant(Matrix::row_vector(face.as_slice().to_vec()));
        m.id_adapter.resampler.forward(tape, f)
    })
    .unwrap();
    assert!(report.max_rel_err <= TOL, "{report:?}");
}

#[test]
fn identity_and_reference_cross_attention_parameters() {
    let m = model(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let visual = Matrix::randn(6, 32, 1.0, &mut rng);
    let kv = Matrix::randn(8, 32, 1.0, &mut rng);
    let pattern = Arc::new(AttnPattern::full(6, 8));
    for block in [&m.id_adapter.blocks[0], &m.ref_adapter.blocks[1]] {
        let report = check_param_grads(&m.store, &block.ids(), EPS, FLOOR, |tape| {
            let x = tape.constant(visual.clone());
            let k = tape.constant(kv.clone());
            block.forward(tape, x, k, Arc::clone(&pattern))
        })
        .unwrap();
        assert!(report.max_rel_err <= TOL, "{report:?}");
    }
}
