use criterion::{criterion_group, criterion_main, Criterion};
use volcore::attention::{abmil_backward, rollout, AbmilModel, AttentionStack, EncoderConfig, VolumeEncoder};
use volcore::metrics::{quadratic_kappa, roc_auc};
use volcore::volume::{extract_patches, PatchParams};
use volcore::VolumetricPatch;
use volcore_bench::{core, random_matrix};

fn encoder(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let enc = VolumeEncoder::random(cfg, 1).unwrap();
    let patch = VolumetricPatch {
        origin: [0, 0],
        side: cfg.side,
        depth: cfg.depth,
        tissue_fraction: 1.0,
        voxels: (0..cfg.depth * cfg.side * cfg.side * 3).map(|i| (i * 37 % 251) as u8).collect(),
    };
    let out = enc.encode(&patch).unwrap();
    c.bench_function("encoder forward", |b| b.iter(|| enc.encode(&patch).unwrap()));
    let stack: AttentionStack = out.stack;
    c.bench_function("rollout", |b| b.iter(|| rollout(&stack).unwrap()));
}

fn abmil(c: &mut Criterion) {
    let model = AbmilModel::random(384, 128, 4, 2);
    let bag = random_matrix(200, 384, 3);
    c.bench_function("abmil backward, 200 x 384", |b| b.iter(|| abmil_backward(&bag, 2, &model).unwrap()));
}

fn patches(c: &mut Criterion) {
    let core = core(8, 1024, 4);
    let params = PatchParams {
        min_tissue: 0.2,
        ..PatchParams::default()
    };
    c.bench_function("patch extraction 1024, depth 8", |b| b.iter(|| extract_patches(&core, &params)));
}

fn metrics(c: &mut Criterion) {
    let scores: Vec<f64> = random_matrix(10_000, 1, 5).column(0).to_vec();
    let labels: Vec<bool> = scores.iter().map(|s| s + 0.3 * (s * 97.0).sin() > 0.0).collect();
    c.bench_function("roc auc, 10k", |b| b.iter(|| roc_auc(&scores, &labels).unwrap()));
    let a: Vec<usize> = (0..10_000).map(|i| i % 6).collect();
    let r: Vec<usize> = (0..10_000).map(|i| (i * 7 / 3) % 6).collect();
    c.bench_function("quadratic kappa, 10k", |b| b.iter(|| quadratic_kappa(&a, &r, 6).unwrap()));
}

criterion_group!(benches, encoder, abmil, patches, metrics);
criterion_main!(benches);
