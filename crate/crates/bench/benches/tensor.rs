use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use kmask_bench::{mlm_batch, model, rng};
use kmask_core::tensor::kernels::gemm_nn;
use kmask_core::tensor::Graph;
use kmask_core::train::batch_losses;
use rand::Rng as _;
use std::hint::black_box;

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm_nn");
    let mut r = rng(3);
    for n in [64usize, 128, 256] {
        let a: Vec<f32> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut out = vec![0.0f32; n * n];
        g.throughput(Throughput::Elements((2 * n * n * n) as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, &n| {
            bench.iter(|| {
                out.fill(0.0);
                gemm_nn(&a, &b, &mut out, n, n, n);
                black_box(&out);
            })
        });
    }
    g.finish();
}

fn encoder(c: &mut Criterion) {
    let vocab = 8000;
    let max_len = 64;
    let enc = model(2, 128, max_len, vocab);
    let batch = mlm_batch(&mut rng(4), 16, max_len, vocab);
    let mut g = c.benchmark_group("encoder_2x128_b16_l64");
    g.sample_size(20);
    g.bench_function("forward", |b| {
        b.iter(|| {
            let mut graph = Graph::new();
            let (total, _, _) = batch_losses(&enc, &mut graph, &batch, None).unwrap();
            black_box(graph.value(total)[0]);
        })
    });
    g.bench_function("forward+backward", |b| {
        b.iter(|| {
            let mut graph = Graph::new();
            let (total, _, _) = batch_losses(&enc, &mut graph, &batch, None).unwrap();
            black_box(graph.backward(total).unwrap());
        })
    });
    g.finish();
}

criterion_group!(benches, gemm, encoder);
criterion_main!(benches);
