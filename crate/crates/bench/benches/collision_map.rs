use criterion::{black_box, criterion_group, criterion_main, Criterion};
use lorentz_core::statistics::sample_mu0;
use lorentz_core::{billiard_map, substream, ForceModel, Stream, System, TableConfig, TwistModel};

fn collision_map(c: &mut Criterion) {
    let mut g = c.benchmark_group("billiard_map");
    for (name, force) in [
        ("unforced", ForceModel::None),
        ("eps_0.05", ForceModel::constant(0.05, 0.0)),
    ] {
        let sys = System::new(TableConfig::default(), force, TwistModel::Identity).unwrap();
        let mut rng = substream(1, Stream::Orbit, 0);
        let points: Vec<_> = (0..256)
            .map(|_| sample_mu0(sys.table(), &mut rng))
            .collect();
        let mut k = 0;
        g.bench_function(name, |b| {
            b.iter(|| {
                k = (k + 1) % points.len();
                black_box(billiard_map(&sys, black_box(&points[k])).ok())
            })
        });
    }
    g.finish();
}

criterion_group!(benches, collision_map);
criterion_main!(benches);
