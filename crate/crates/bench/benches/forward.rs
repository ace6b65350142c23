use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lynx_core::autograd::{GradMode, Tape};
use lynx_core::backbone::extract_patches;
use lynx_core::params::ParamStore;
use lynx_core::rope_pack::{build_mask, pack};
use lynx_core::{Adapters, Grid, LatentVideo, LynxConfig, LynxModel, Matrix, SampleCond, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn latent(rng: &mut ChaCha8Rng, t: usize, side: usize) -> LatentVideo {
    let data = (0..t * side * side * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    LatentVideo::new(t, side, side, 4, data).unwrap()
}

fn bench_pack(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let seqs: Vec<TokenSeq> = (0..64)
        .map(|_| {
            let n = rng.random_range(4..=64);
            TokenSeq::new(Matrix::randn(n, 16, 1.0, &mut rng), Grid::new(1, 1, n)).unwrap()
        })
        .collect();
    c.bench_function("pack/64_samples_budget_256", |b| b.iter(|| pack(black_box(&seqs), 256).unwrap()));
}

fn bench_attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let store = ParamStore::new();
    let mut group = c.benchmark_group("attention");
    for n in [64usize, 256] {
        let q = Matrix::randn(n, 64, 1.0, &mut rng);
        let k = Matrix::randn(n, 64, 1.0, &mut rng);
        let v = Matrix::randn(n, 64, 1.0, &mut rng);
        let full = Arc::new(build_mask(&[0, n]).unwrap().to_pattern());
        let quarters = Arc::new(build_mask(&[0, n / 4, n / 2, 3 * n / 4, n]).unwrap().to_pattern());
        for (name, pattern) in [("full", &full), ("four_segments", &quarters)] {
            group.bench_with_input(BenchmarkId::new(name, n), &n, |b, _| {
                b.iter(|| {
                    let mut tape = Tape::new(&store, GradMode::None);
                    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
                    tape.attention(qv, kv, vv, 4, Arc::clone(pattern)).unwrap()
                })
            });
        }
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let model = LynxModel::new(LynxConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let seqs: Vec<TokenSeq> = [(1, 8), (4, 8), (4, 8), (1, 8)]
        .iter()
        .map(|&(t, s)| {
            let (p, g) = extract_patches(&latent(&mut rng, t, s), model.config.model.patch).unwrap();
            TokenSeq::new(p, g).unwrap()
        })
        .collect();
    let packed = pack(&seqs, 256).unwrap().remove(0);
    let reference = Arc::new(model.encode_reference(&latent(&mut rng, 1, 8)).unwrap());
    let conds: Vec<SampleCond> = (0..seqs.len())
        .map(|i| SampleCond {
            t: 0.5,
            text: model.embed_text("a person talking"),
            face: None,
            reference: (i % 2 == 0).then(|| Arc::clone(&reference)),
        })
        .collect();
    let mut group = c.benchmark_group("model_forward");
    group.sample_size(20);
    for (name, adapters) in [("adapters_off", Adapters::Off), ("adapters_on", Adapters::On)] {
        group.bench_function(name, |b| b.iter(|| model.predict(black_box(&packed), &conds, adapters).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_pack, bench_attention, bench_forward);
criterion_main!(benches);
