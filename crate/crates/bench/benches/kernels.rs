use std::hint::black_box;

use cgru_core::critic::{Critic, CriticSpec};
use cgru_core::diffusion::{sample_trajectories, Context, DiffusionPolicy, EpsNet, EpsNetSpec, NoisePredictor, NoiseSchedule};
use cgru_core::metrics::symmetric_eigen;
use cgru_core::policy_grad::{compute_advantages, cgru_gradient, EstimatorConfig};
use cgru_core::{rng, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const STEPS: usize = 50;

fn eps_net() -> EpsNet {
    let spec = EpsNetSpec { data_dim: 2, classes: 8, embed_dim: 32, hidden: 128, steps: STEPS };
    EpsNet::new(spec, &mut rng::stream(1, 0)).unwrap()
}

fn batch(n: usize) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let xs = (0..2 * n).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    let ts = (0..n).map(|i| 1 + i % STEPS).collect();
    let cs = (0..n).map(|i| i % 8).collect();
    (xs, ts, cs)
}

fn bench_eps_net(c: &mut Criterion) {
    let net = eps_net();
    let mut group = c.benchmark_group("eps_net");
    for n in [16, 256] {
        let (xs, ts, cs) = batch(n);
        group.bench_with_input(BenchmarkId::new("forward", n), &n, |b, _| {
            b.iter(|| net.predict(black_box(&xs), &ts, &cs).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", n), &n, |b, _| {
            let out_grad = vec![1.0; 2 * n];
            let mut grads = vec![0.0; net.net.param_count()];
            b.iter(|| {
                let (_, tape) = net.predict_tape(black_box(&xs), &ts, &cs).unwrap();
                net.net.backward_tape(&tape, &out_grad, &mut grads).unwrap()
            })
        });
    }
    group.finish();
}

fn bench_sampling(c: &mut Criterion) {
    let net = eps_net();
    let sched = NoiseSchedule::linear(STEPS, 1e-4, 0.2).unwrap();
    let policy = DiffusionPolicy::new(&net, &sched).unwrap();
    let ctxs: Vec<Context> = (0..16).map(|i| Context::new(i % 8, 8).unwrap()).collect();
    c.bench_function("sample_16_trajectories", |b| {
        b.iter(|| sample_trajectories(&policy, black_box(&ctxs), 3, 0).unwrap())
    });

    let mut trajs = sample_trajectories(&policy, &ctxs, 3, 0).unwrap();
    for (i, t) in trajs.iter_mut().enumerate() {
        t.reward = Some(i as f64 % 10.0);
    }
    let critic = Critic::new(
        CriticSpec { data_dim: 2, classes: 8, hidden: 64, embed_dim: 32, steps: STEPS },
        true,
        &mut rng::stream(2, 0),
    )
    .unwrap();
    compute_advantages(&mut trajs, &critic).unwrap();
    let order: Vec<usize> = (1..=STEPS).rev().collect();
    let cfg = EstimatorConfig::default();
    c.bench_function("cgru_gradient_16_trajectories", |b| {
        b.iter(|| cgru_gradient(&policy, black_box(&trajs), &cfg, &order).unwrap())
    });
    let (xs, ts, cs) = batch(256);
    c.bench_function("critic_values_256", |b| {
        b.iter(|| critic.values(black_box(&xs), &ts, &cs).unwrap())
    });
}

fn bench_eigen(c: &mut Criterion) {
    let n = 32;
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = ((i * j) as f64 * 0.1).cos() + if i == j { n as f64 } else { 0.0 };
        }
    }
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (data[i * n + j] + data[j * n + i]);
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    let m = Tensor::matrix(n, n, data).unwrap();
    c.bench_function("symmetric_eigen_32", |b| b.iter(|| symmetric_eigen(black_box(&m)).unwrap()));
}

criterion_group!(benches, bench_eps_net, bench_sampling, bench_eigen);
criterion_main!(benches);
