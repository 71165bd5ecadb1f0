use criterion::{criterion_group, criterion_main, Criterion};
use volcore_bench::core;
use volcore_service::dzi::{build_pyramid, PyramidPaths};
use volcore_service::TileParams;

fn pyramid(c: &mut Criterion) {
    let core = core(1, 1024, 6);
    let dir = tempfile::tempdir().unwrap();
    let paths = PyramidPaths::new(dir.path(), "image");
    let mut g = c.benchmark_group("tiles");
    g.sample_size(10);
    g.bench_function("pyramid of one 1024 section", |b| b.iter(|| build_pyramid(&core.sections[0], &paths, &TileParams::default()).unwrap()));
    g.finish();
}

criterion_group!(benches, pyramid);
criterion_main!(benches);
