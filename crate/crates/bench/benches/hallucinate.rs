use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use hallucinator_bench::gaussian_set;
use hallucinator_core::hallucinator::{HallucinatorConfig, HallucinatorModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sampling(c: &mut Criterion) {
    let mut group = c.benchmark_group("hallucinate");
    group.sample_size(10);
    for (label, config) in [
        ("desk_d32", HallucinatorConfig::desk(32)),
        ("paper_d1024", HallucinatorConfig::paper(1024)),
    ] {
        let d = config.feature_dim;
        let model = HallucinatorModel::<f32>::new(config, 1).unwrap();
        let target = gaussian_set(100, d, 2);
        let count = 3000;
        group.throughput(Throughput::Elements(count as u64));
        group.bench_function(BenchmarkId::new(label, count), |b| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                model.hallucinate(&target, count, &mut rng).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, sampling);
criterion_main!(benches);
