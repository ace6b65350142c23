mod common;

use std::sync::Arc;

use common::*;
use lynx_core::id_adapter::{id_inject, resample};
use lynx_core::ref_adapter::{ref_inject, RefCache};
use lynx_core::{Adapters, LynxConfig, LynxModel, Matrix, SampleCond};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn trained_looking(seed: u64) -> LynxModel {
    let mut model = LynxModel::new(small_config()).unwrap();
    let gates = adapter_gate_ids(&model);
    randomize(&mut model.store, &gates, 0.5, &mut ChaCha8Rng::seed_from_u64(seed));
    model
}

#[test]
fn zero_gates_leave_backbone_output_bitwise() {
    let model = LynxModel::new(LynxConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = model.config.model.latent_channels;
    let x = random_latent(&mut rng, 2, 4, 6, c);
    let packed = single_pack(&model, &x);
    let cond = full_cond(&model, 0.4, "a person", random_face(&mut rng, 64), &random_latent(&mut rng, 1, 4, 4, c));
    let on = model.predict(&packed, std::slice::from_ref(&cond), Adapters::On).unwrap();
    let off = model.predict(&packed, &[cond], Adapters::Off).unwrap();
    assert_eq!(on, off);
}

#[test]
fn identity_tokens_have_registers_appended() {
    let model = trained_looking(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = model.id_adapter.identity_tokens(&model.store, &random_face(&mut rng, 32)).unwrap();
    let b = model.id_adapter.identity_tokens(&model.store, &random_face(&mut rng, 32)).unwrap();
    assert_eq!(a.id_tokens.shape(), (4, 32));
    assert_eq!(a.len(), 8);
    assert_eq!(a.registers, b.registers);
    assert_ne!(a.id_tokens, b.id_tokens);
    let f = random_face(&mut rng, 32);
    let r1 = resample(&model.store, &model.id_adapter.resampler, &f).unwrap();
    let r2 = resample(&model.store, &model.id_adapter.resampler, &f).unwrap();
    assert_eq!(r1, r2);
    let wrong = random_face(&mut rng, 16);
    assert!(model.id_adapter.identity_tokens(&model.store, &wrong).is_err());
}

#[test]
fn empty_reference_is_a_no_op() {
    let model = trained_looking(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let visual = Matrix::randn(5, 32, 1.0, &mut rng);
    let out = ref_inject(&model.store, &model.ref_adapter, 0, &visual, &Matrix::zeros(0, 32)).unwrap();
    assert_eq!(out, visual);
    let tokens = Matrix::randn(8, 32, 1.0, &mut rng);
    let moved = id_inject(&model.store, &model.id_adapter.blocks[0], &visual, &tokens).unwrap();
    assert!(moved.max_abs_diff(&visual) > 1e-3);
}

#[test]
fn each_block_uses_its_own_adapter_weights() {
    let model = trained_looking(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let visual = Matrix::randn(6, 32, 1.0, &mut rng);
    let r = Matrix::randn(4, 32, 1.0, &mut rng);
    let mut swapped = model.store.clone();
    for (a, b) in model.ref_adapter.blocks[0].ids().into_iter().zip(model.ref_adapter.blocks[1].ids()) {
        swapped.set(a, model.store.value(b).clone()).unwrap();
        swapped.set(b, model.store.value(a).clone()).unwrap();
    }
    let want = ref_inject(&model.store, &model.ref_adapter, 1, &visual, &r).unwrap();
    let got = ref_inject(&swapped, &model.ref_adapter, 0, &visual, &r).unwrap();
    assert_eq!(got, want);
    assert_ne!(ref_inject(&model.store, &model.ref_adapter, 0, &visual, &r).unwrap(), want);
}

#[test]
fn reference_activations_cover_every_block() {
    let model = LynxModel::new(small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let r = random_latent(&mut rng, 1, 4, 6, 4);
    let set = model.encode_reference(&r).unwrap();
    assert_eq!(set.len(), 2);
    assert_eq!(set.ref_len(), 6);
    assert_ne!(set.per_block[0], set.per_block[1]);
    assert!(model.encode_reference(&random_latent(&mut rng, 2, 4, 6, 4)).is_err());
}

#[test]
fn frozen_copy_ignores_live_updates() {
    let mut model = LynxModel::new(small_config()).unwrap();
    let before = model.frozen.hash().to_string();
    assert_eq!(model.backbone_hash(), before);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let r = random_latent(&mut rng, 1, 4, 4, 4);
    let enc_before = model.encode_reference(&r).unwrap();
    model.set_backbone_trainable(true);
    let id = model.store.id("blocks.0.mlp.fc1.weight").unwrap();
    let (rr, cc) = model.store.value(id).shape();
    model.store.set(id, Matrix::randn(rr, cc, 1.0, &mut rng)).unwrap();
    assert_ne!(model.backbone_hash(), before);
    assert_eq!(model.frozen.current_hash(), before);
    model.frozen.verify().unwrap();
    assert_eq!(model.encode_reference(&r).unwrap(), enc_before);
    model.refreeze();
    assert_ne!(model.frozen.hash(), before);
}

#[test]
fn reference_cache_hits_and_persists() {
    let model = LynxModel::new(small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = random_latent(&mut rng, 1, 4, 4, 4);
    let mut cache = RefCache::on_disk(dir.path()).unwrap();
    let a = cache.get_or_encode(&r, &model.frozen, &model.text).unwrap();
    let b = cache.get_or_encode(&r, &model.frozen, &model.text).unwrap();
    assert!(Arc::ptr_eq(&a, &b));
    assert_eq!((cache.hits, cache.misses), (1, 1));
    let mut fresh = RefCache::on_disk(dir.path()).unwrap();
    let c = fresh.get_or_encode(&r, &model.frozen, &model.text).unwrap();
    assert_eq!(*c, *a);
    assert_eq!(fresh.hits, 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // Cross-attention over reference or identity tokens is a set operation.
    #[test]
    fn kv_order_does_not_matter(seed in any::<u64>(), n_kv in 1usize..9) {
        let model = trained_looking(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let visual = Matrix::randn(5, 32, 1.0, &mut rng);
        let kv = Matrix::randn(n_kv, 32, 1.0, &mut rng);
        let mut order: Vec<usize> = (0..n_kv).collect();
        order.shuffle(&mut rng);
        let rows: Vec<Matrix> = order.iter().map(|&i| kv.slice_rows(i, i + 1)).collect();
        let shuffled = Matrix::concat_rows(&rows.iter().collect::<Vec<_>>()).unwrap();
        let a = ref_inject(&model.store, &model.ref_adapter, 1, &visual, &kv).unwrap();
        let b = ref_inject(&model.store, &model.ref_adapter, 1, &visual, &shuffled).unwrap();
        prop_assert!(a.max_abs_diff(&b) <= 1e-12);
        let c = id_inject(&model.store, &model.id_adapter.blocks[0], &visual, &kv).unwrap();
        let d = id_inject(&model.store, &model.id_adapter.blocks[0], &visual, &shuffled).unwrap();
        prop_assert!(c.max_abs_diff(&d) <= 1e-12);
    }

    // Adapters with zero gates are transparent for any conditioning mix.
    #[test]
    fn zero_gates_transparent_for_mixed_packs(seed in any::<u64>()) {
        let model = LynxModel::new(small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = [random_latent(&mut rng, 1, 4, 4, 4), random_latent(&mut rng, 2, 2, 4, 4)];
        let seqs: Vec<_> = xs.iter().map(|x| single_pack(&model, x)).collect();
        let tokens = Matrix::concat_rows(&[seqs[0].tokens(), seqs[1].tokens()]).unwrap();
        let packed = lynx_core::PackedBatch::new(tokens, vec![0, 4, 8], vec![seqs[0].grids()[0], seqs[1].grids()[0]], 8).unwrap();
        let with = full_cond(&model, 0.7, "x", random_face(&mut rng, 32), &random_latent(&mut rng, 1, 2, 2, 4));
        let without = SampleCond { t: 0.2, text: model.embed_text(""), face: None, reference: None };
        let conds = [with, without];
        prop_assert_eq!(
            model.predict(&packed, &conds, Adapters::On).unwrap(),
            model.predict(&packed, &conds, Adapters::Off).unwrap()
        );
    }
}
