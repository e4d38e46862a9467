use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcvae_core::episodic::{knn_classify_all, run_episode, EvalConfig, FeatureBank, Label, Split};
use dcvae_core::model::{self, DcvaeParams, HyperParams, ModelDims};
use dcvae_core::training::{step_full, FullBatch, GroupedAdam};
use dcvae_core::Matrix;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn toy_bank(classes: usize, per_class: usize, d: usize, s: usize) -> FeatureBank {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut feats = Vec::new();
    let mut sems = Vec::new();
    for c in 0..classes {
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..per_class {
            feats.push((format!("c{c}"), mean.iter().map(|m| m + 0.3 * rng.random_range(-1.0..1.0)).collect()));
        }
        sems.push((format!("c{c}"), (0..s).map(|_| rng.random_range(-1.0..1.0)).collect()));
    }
    FeatureBank::from_named(Split::Test, feats, sems).unwrap()
}

// full widths: D=512, S=1024, batch 64
fn full_width(c: &mut Criterion) {
    let dims = ModelDims::new(512, 1024);
    let params = DcvaeParams::init_seeded(dims, 0).unwrap();
    let hp = HyperParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = FullBatch {
        x: random(&mut rng, 64, 512),
        s: random(&mut rng, 64, 1024),
        v: random(&mut rng, 64, 512),
    };
    let noise = random(&mut rng, 64, dims.latent_dim);

    c.bench_function("loss_total/b64", |b| {
        b.iter(|| model::loss_total(&params, &batch.x, &batch.s, &batch.v, &noise, &hp).unwrap())
    });

    let mut g = c.benchmark_group("step_full");
    g.sample_size(10);
    g.bench_function("b64", |b| {
        b.iter_batched(
            || (params.clone(), GroupedAdam::for_hyper(&params, &hp)),
            |(mut p, mut opt)| step_full(&mut p, &mut opt, &batch, &hp, &mut ChaCha8Rng::seed_from_u64(2)).unwrap(),
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn knn(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // 5-way 1-shot with n=100 per class for two kinds, 75 queries
    let support = random(&mut rng, 1005, 512);
    let labels: Vec<Label> = (0..1005).map(|i| Label((i % 5) as u32)).collect();
    let queries = random(&mut rng, 75, 512);
    c.bench_function("knn/1005x75", |b| b.iter(|| knn_classify_all(&support, &labels, &queries, 5).unwrap()));
}

fn episode(c: &mut Criterion) {
    let bank = toy_bank(10, 30, 64, 16);
    let params = DcvaeParams::init_seeded(ModelDims::compact(64, 16, 16, 64), 0).unwrap();
    let hp = HyperParams::default();
    let cfg = EvalConfig::from_hyper(&hp, 5, 1);
    let mut g = c.benchmark_group("episode");
    g.sample_size(10);
    g.bench_function("5way1shot/compact", |b| b.iter(|| run_episode(&bank, &params, &hp, &cfg, 0).unwrap()));
    g.finish();
}

criterion_group!(benches, full_width, knn, episode);
criterion_main!(benches);
