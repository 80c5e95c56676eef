//! Compares the data-parallel hot paths against single-threaded execution.
//! With the default `parallel` feature the single-thread numbers come from a
//! 1-worker rayon pool; building with `--no-default-features` removes rayon
//! entirely and benches the sequential fallback directly.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slidemap_core::convnet::{forward, init_params, ArchConfig, Mode};
use slidemap_core::features::percentile_features;
use slidemap_core::forest::{forest_fit, synthetic_blobs, ForestConfig};
use slidemap_core::raster::{GeoTransform, Raster};
use slidemap_core::tensor::Tensor;
use slidemap_core::terrain::build_terrain_stack;

fn random_dem(side: usize, seed: u64) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = GeoTransform::new(0.0, side as f64 * 10.0, 10.0, 10.0).unwrap();
    let data: Vec<f64> = (0..side * side).map(|_| rng.gen_range(0.0..300.0)).collect();
    Raster::new(side, side, geo, -9999.0, data).unwrap()
}

fn random_batch(n: usize, c: usize, s: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * c * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_data(n, c, s, s, data).unwrap()
}

#[cfg(feature = "parallel")]
fn with_threads<T>(n: usize, f: impl FnOnce() -> T + Send, _label: &str) -> T
where
    T: Send,
{
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool")
        .install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T>(_n: usize, f: impl FnOnce() -> T, _label: &str) -> T {
    f()
}

fn thread_counts() -> Vec<usize> {
    if cfg!(feature = "parallel") {
        vec![1, std::thread::available_parallelism().map_or(4, |n| n.get())]
    } else {
        vec![1]
    }
}

fn bench_terrain(c: &mut Criterion) {
    let dem = random_dem(512, 7);
    let mut group = c.benchmark_group("terrain_stack_512");
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| with_threads(t, || build_terrain_stack(&dem).unwrap(), "terrain"));
        });
    }
    group.finish();
}

fn bench_forward(c: &mut Criterion) {
    let params = init_params(3, Mode::Fused, 3, ArchConfig::default()).unwrap();
    let batch = random_batch(8, 16, 64, 11);
    let mut group = c.benchmark_group("conv_forward_8x16x64");
    group.sample_size(20);
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| with_threads(t, || forward(&params, &batch).unwrap(), "forward"));
        });
    }
    group.finish();
}

fn bench_forest(c: &mut Criterion) {
    let (features, classes) = synthetic_blobs(600, 5);
    let config = ForestConfig {
        n_trees: 100,
        ..ForestConfig::default()
    };
    let mut group = c.benchmark_group("forest_fit_600x100");
    group.sample_size(20);
    for threads in thread_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |b, &t| {
            b.iter(|| with_threads(t, || forest_fit(&features, &classes, config).unwrap(), "forest"));
        });
    }
    group.finish();
}

fn bench_percentiles(c: &mut Criterion) {
    let emb = random_batch(1, 1, 128, 13);
    c.bench_function("percentile_features_128", |b| {
        b.iter(|| percentile_features(&emb).unwrap());
    });
}

criterion_group!(benches, bench_terrain, bench_forward, bench_forest, bench_percentiles);
criterion_main!(benches);
