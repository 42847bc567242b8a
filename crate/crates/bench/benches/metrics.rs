use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mtsunet::metrics::{delong_ci, dice, hausdorff, roc_auc};
use mtsunet_bench::{mask, scores};

fn overlap(c: &mut Criterion) {
    let (a, b) = (mask(0), mask(1));
    c.bench_function("dice 32^3", |bch| bch.iter(|| dice(&a, &b, 1).unwrap()));
    c.bench_function("hausdorff 32^3", |bch| bch.iter(|| hausdorff(&a, &b, [1.0; 3]).unwrap()));
}

fn roc(c: &mut Criterion) {
    let mut group = c.benchmark_group("roc");
    for n in [100usize, 1000, 10000] {
        let (s, l) = scores(n);
        group.bench_with_input(BenchmarkId::new("auc", n), &n, |bch, _| bch.iter(|| roc_auc(&s, &l).unwrap()));
        group.bench_with_input(BenchmarkId::new("delong", n), &n, |bch, _| {
            bch.iter(|| delong_ci(&s, &l, 0.95).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, overlap, roc);
criterion_main!(benches);
