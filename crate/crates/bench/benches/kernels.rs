use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use multidistill_core::data::{generate_synthetic, SyntheticSpec};
use multidistill_core::metrics::{average_precision, dice_hd95, MaskPair};
use multidistill_core::stats::{wilcoxon_with, WilcoxonMethod};
use multidistill_core::trainer::{DistillSetup, DistillTrainer};
use multidistill_core::{Graph, Tensor, TrainConfig};

/// Deterministic values in [0, 1) without pulling in an RNG.
fn pseudo(n: usize, salt: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 7919 + salt * 104_729) % 1000) as f64 / 1000.0).collect()
}

fn matmul(c: &mut Criterion) {
    let a = Tensor::matrix(64, 64, pseudo(64 * 64, 1)).unwrap();
    let b = Tensor::matrix(64, 64, pseudo(64 * 64, 2)).unwrap();
    c.bench_function("matmul_64_fwd_bwd", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(a.clone(), true);
            let y = g.leaf(b.clone(), true);
            let z = g.matmul(x, y).unwrap();
            let s = g.sum(z);
            black_box(g.backward(s).unwrap());
        })
    });
}

fn train_step(c: &mut Criterion) {
    let images = generate_synthetic(&SyntheticSpec::desk(0, 4), 8).unwrap().images;
    let train = TrainConfig::new(1_000_000, 8, 1e-4, 0);
    c.bench_function("distill_step_desk_batch8", |bench| {
        bench.iter_batched(
            || DistillTrainer::new(DistillSetup::desk(), train.clone(), images.clone()).unwrap(),
            |mut t| black_box(t.train_step().unwrap()),
            BatchSize::LargeInput,
        )
    });
}

fn metrics(c: &mut Criterion) {
    let scores = pseudo(10_000, 3);
    let labels: Vec<bool> = pseudo(10_000, 4).iter().map(|v| *v < 0.3).collect();
    c.bench_function("average_precision_10k", |bench| bench.iter(|| black_box(average_precision(&scores, &labels))));

    let (h, w) = (64, 64);
    let disk = |cy: f64, cx: f64, r: f64| -> Vec<usize> {
        (0..h * w).map(|i| usize::from(((i / w) as f64 - cy).hypot((i % w) as f64 - cx) < r)).collect()
    };
    let pair = MaskPair::new(h, w, 2, disk(30.0, 32.0, 18.0), disk(34.0, 29.0, 20.0)).unwrap();
    c.bench_function("dice_hd95_64x64", |bench| bench.iter(|| black_box(dice_hd95(&pair).unwrap())));
}

fn wilcoxon(c: &mut Criterion) {
    let a = pseudo(20, 5);
    let b = pseudo(20, 6);
    c.bench_function("wilcoxon_exact_m20", |bench| {
        bench.iter(|| black_box(wilcoxon_with(&a, &b, WilcoxonMethod::Exact).unwrap()))
    });
}

criterion_group!(benches, matmul, train_step, metrics, wilcoxon);
criterion_main!(benches);
