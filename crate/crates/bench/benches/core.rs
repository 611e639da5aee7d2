use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fewshot_bench::parity_sets;
use fewshot_core::costs::{render_table, table1_report};
use fewshot_core::evaluator::score_batch;
use fewshot_core::{
    batch_loss, build_model, init_adapter, merge, Adafactor, CandidateSet, Losses, ModelSpec, Tape, Tensor,
};

fn tensor_ops(c: &mut Criterion) {
    let a = Tensor::<f64>::from_fn(&[64, 64], |i| (i as f64 * 0.01).sin()).unwrap();
    let b = Tensor::<f64>::from_fn(&[64, 64], |i| (i as f64 * 0.02).cos()).unwrap();
    c.bench_function("matmul 64x64", |bench| {
        bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let spec = ModelSpec::toy();
    let model = build_model::<f64>(&spec, 0).unwrap();
    let adapter = init_adapter::<f64>(&spec).unwrap();
    let sets = parity_sets(8);
    let refs: Vec<&CandidateSet> = sets.iter().collect();
    c.bench_function("adapter loss+backward, batch 8", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let bound = model.bind(&tape, false);
            let ba = adapter.bind(&tape, true).unwrap();
            let slots = vec![Some(&ba); refs.len()];
            let loss = batch_loss(&bound, &slots, &refs, Losses::ALL).unwrap();
            black_box(tape.backward(loss.total).unwrap());
        })
    });

    let mut opt = Adafactor::default();
    let mut vectors = adapter.vectors().clone();
    let grads: Vec<Tensor<f64>> = vectors.values().map(|v| v.map(|_| 1e-3)).collect();
    c.bench_function("adafactor step, adapter vectors", |bench| {
        bench.iter(|| {
            opt.step(
                1e-3,
                vectors.iter_mut().zip(&grads).map(|((n, p), g)| (n.as_str(), p, g)),
            )
            .unwrap()
        })
    });
}

fn inference(c: &mut Criterion) {
    let spec = ModelSpec::toy();
    let model = build_model::<f64>(&spec, 0).unwrap();
    let adapter = init_adapter::<f64>(&spec).unwrap();
    let sets = parity_sets(64);
    c.bench_function("rank-classify scoring, 64 examples", |bench| {
        bench.iter(|| black_box(score_batch(&model, Some(&adapter), &sets).unwrap()))
    });
    c.bench_function("merge adapter into weights", |bench| {
        bench.iter(|| black_box(merge(&model, &adapter).unwrap()))
    });
}

fn costs(c: &mut Criterion) {
    c.bench_function("cost table", |bench| {
        bench.iter(|| black_box(render_table(&table1_report())))
    });
}

criterion_group!(benches, tensor_ops, train_step, inference, costs);
criterion_main!(benches);
