use criterion::{criterion_group, criterion_main, Criterion};

use canopy_core::infer::{predict_tiled, TileGrid};
use canopy_core::model::{ModelConfig, ModelParams};
use canopy_core::par::Exec;
use canopy_core::tensor::Tensor;

fn tiled_prediction(c: &mut Criterion) {
    let params = ModelParams::<f32>::build(&ModelConfig::desk(13)).unwrap();
    let x = Tensor::from_fn(&[1, 13, 96, 96], |i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0);
    let grid = TileGrid::new(96, 96, 48, 8).unwrap();
    let mut g = c.benchmark_group("predict_tiled_96x96");
    g.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        g.bench_function(name, |b| b.iter(|| predict_tiled(&params, &x, &grid, exec).unwrap()));
    }
    g.finish();
}

fn training_forward(c: &mut Criterion) {
    let params = ModelParams::<f32>::build(&ModelConfig::desk(13)).unwrap();
    let x = Tensor::from_fn(&[36, 13, 15, 15], |i| ((i * 104_729) % 1000) as f32 / 500.0 - 1.0);
    let mut g = c.benchmark_group("forward_batch36");
    g.sample_size(10);
    // per-plane kernels go through rayon; a one-thread pool is the sequential baseline
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    g.bench_function("sequential", |b| b.iter(|| one.install(|| params.predict(&x).unwrap())));
    g.bench_function("parallel", |b| b.iter(|| params.predict(&x).unwrap()));
    g.finish();
}

criterion_group!(benches, tiled_prediction, training_forward);
criterion_main!(benches);
