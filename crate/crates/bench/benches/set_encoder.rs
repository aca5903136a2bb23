use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hallucinator_bench::gaussian_set;
use hallucinator_core::feature_store::MaskedSet;
use hallucinator_core::nn::{Graph, ParamStore};
use hallucinator_core::set_transformer::{slot_tensor, SetEncoder, SetEncoderConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// ISAB cost should grow linearly in the set size.
fn isab_scaling(c: &mut Criterion) {
    let dim = 32;
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = SetEncoder::new(&mut store, "enc", SetEncoderConfig::new(dim + 1), &mut rng).unwrap();
    let mut group = c.benchmark_group("isab_forward");
    for n in [100, 200, 400, 800, 1600] {
        let set = gaussian_set(n, dim, n as u64);
        let masked = MaskedSet::new(dim, set.data().to_vec(), vec![true; n]).unwrap();
        let slots = slot_tensor::<f32>(&masked);
        group.bench_with_input(BenchmarkId::from_parameter(n), &slots, |b, slots| {
            b.iter(|| {
                let mut g = Graph::new(&store);
                encoder.encode_pooled(&mut g, slots).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, isab_scaling);
criterion_main!(benches);
