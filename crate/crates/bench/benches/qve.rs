use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qve_core::filters::select_top_k;
use qve_core::learners::toy::{toy_backend_build, ToyConfig};
use qve_core::qve::{HeadDims, HeadTrace, Optimizer};
use qve_core::reinforce::{qve_gradient, sample_selection};
use qve_core::sandbox::{generate_sandbox, SandboxConfig};
use qve_core::{Qve, ValueHead};

const H: usize = 64;

fn random_inputs(n: usize, rng: &mut ChaCha8Rng) -> Vec<(Vec<f64>, f64, f64)> {
    (0..n)
        .map(|_| ((0..H).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random(), rng.random()))
        .collect()
}

fn head(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let head = ValueHead::random(HeadDims::for_input(H), 1);
    let (h, p_s, p_e) = random_inputs(1, &mut rng).remove(0);
    c.bench_function("head_forward", |b| b.iter(|| head.forward(black_box(&h), p_s, p_e).unwrap()));
    let trace = head.trace(&h, p_s, p_e).unwrap();
    let mut grad = vec![0.0; head.params().len()];
    c.bench_function("head_backward", |b| b.iter(|| head.backward(black_box(&trace), 0.5, &mut grad)));
}

fn policy_gradient(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let qve = Qve::new(ValueHead::random(HeadDims::for_input(H), 3), Optimizer::Adam);
    // One outer batch at the default size.
    let traces: Vec<HeadTrace> = random_inputs(80, &mut rng).iter().map(|(h, s, e)| qve.head.trace(h, *s, *e).unwrap()).collect();
    let values: Vec<f64> = traces.iter().map(|t| t.value.prob).collect();
    c.bench_function("qve_gradient_b80", |b| {
        b.iter_batched(
            || sample_selection(&values, &mut rng),
            |sel| qve_gradient(&qve, black_box(&traces), &sel, 0.3),
            BatchSize::SmallInput,
        )
    });
}

fn reader_predict(c: &mut Criterion) {
    let sandbox = generate_sandbox(&SandboxConfig::default()).unwrap();
    let (reader, _) = toy_backend_build(&ToyConfig::default(), 0);
    let views: Vec<_> = sandbox.target_synthetic.views().take(100).collect();
    c.bench_function("toy_reader_predict_100", |b| {
        b.iter(|| {
            for v in &views {
                black_box(reader.predict(v.context, &v.example.question));
            }
        })
    });
}

fn top_k(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let scores: Vec<(String, f64)> = (0..74_160).map(|i| (format!("q{i}"), rng.random())).collect();
    c.bench_function("select_top_k_74160", |b| b.iter(|| select_top_k(black_box(&scores), 60.0).unwrap()));
}

criterion_group!(benches, head, policy_gradient, reader_predict, top_k);
criterion_main!(benches);
