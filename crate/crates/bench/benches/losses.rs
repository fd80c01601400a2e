use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cromo_bench::randn;
use cromo_core::autodiff::Tape;
use cromo_core::losses::{
    barlow_twins, byol_mse, corinfomax, info_nce, CorInfoMaxParams, CovState, SslKind, SslLossSpec,
};
use cromo_core::objective::cromo_loss;

fn bench_losses(c: &mut Criterion) {
    let mut group = c.benchmark_group("ssl_losses");
    for &(b, d) in &[(64usize, 32usize), (256, 128)] {
        let (z1, z2) = (randn(b, d, 1), randn(b, d, 2));
        let id = format!("{b}x{d}");
        group.bench_with_input(BenchmarkId::new("info_nce", &id), &(), |bch, _| {
            bch.iter(|| info_nce(black_box(z1.view()), black_box(z2.view()), 0.5, None).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("barlow_twins", &id), &(), |bch, _| {
            bch.iter(|| barlow_twins(black_box(z1.view()), black_box(z2.view()), 0.0051).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("byol_mse", &id), &(), |bch, _| {
            bch.iter(|| byol_mse(black_box(z1.view()), black_box(z2.view())).unwrap())
        });
        let p = CorInfoMaxParams::default();
        let state = CovState::new(d, p.eps);
        group.bench_with_input(BenchmarkId::new("corinfomax", &id), &(), |bch, _| {
            bch.iter(|| corinfomax(black_box(z1.view()), black_box(z2.view()), &p, &state).unwrap())
        });
    }
    group.finish();
}

fn bench_cromo_loss(c: &mut Criterion) {
    let mut group = c.benchmark_group("cromo_loss");
    let (zm, zt, zo) = (randn(128, 64, 3), randn(128, 64, 4), randn(128, 64, 5));
    let lambda: Vec<f64> = (0..128).map(|i| (i as f64 + 0.5) / 128.0).collect();
    for kind in SslKind::ALL {
        let spec = SslLossSpec::new(kind);
        group.bench_function(kind.name(), |bch| {
            bch.iter(|| {
                let mut tape = Tape::new();
                let n: Vec<_> = [&zm, &zt, &zo]
                    .iter()
                    .map(|m| tape.constant((*m).clone()))
                    .collect();
                let root = cromo_loss(&mut tape, &spec, None, n[0], n[1], n[2], &lambda).unwrap();
                black_box(tape.scalar(root))
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_losses, bench_cromo_loss);
criterion_main!(benches);
