use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use moss::stss::{stss_backward, stss_flops, stss_forward, stss_oracle, FeatureMap, SimilarityPolicy, WindowSpec};
use moss::{Exec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn features(shape: &[usize]) -> FeatureMap<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    FeatureMap::new(Tensor::uniform(shape, -1.0, 1.0, &mut rng)).unwrap()
}

fn forward(c: &mut Criterion) {
    let policy = SimilarityPolicy::default();
    let mut group = c.benchmark_group("stss_forward");
    group.sample_size(10);
    for (shape, w) in [([8, 14, 14, 64], (5, 9, 9)), ([8, 8, 8, 16], (3, 5, 5))] {
        let window = WindowSpec::new(w.0, w.1, w.2).unwrap();
        let f = features(&shape);
        let id = format!("{}x{}x{}x{}_{}x{}x{}", shape[0], shape[1], shape[2], shape[3], w.0, w.1, w.2);
        group.throughput(Throughput::Elements(stss_flops(&shape, window)));
        group.bench_with_input(BenchmarkId::new("naive", &id), &f, |b, f| b.iter(|| stss_oracle(f, window, policy).unwrap()));
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            group.bench_with_input(BenchmarkId::new(name, &id), &f, |b, f| {
                b.iter(|| stss_forward(f, window, policy, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn backward(c: &mut Criterion) {
    let policy = SimilarityPolicy::default();
    let window = WindowSpec::new(5, 9, 9).unwrap();
    let f = features(&[8, 14, 14, 64]);
    let ds = stss_forward(&f, window, policy, Exec::Sequential).unwrap().into_tensor();
    let mut group = c.benchmark_group("stss_backward");
    group.sample_size(10);
    for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
        group.bench_function(name, |b| b.iter(|| stss_backward(&f, window, policy, &ds, exec).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
