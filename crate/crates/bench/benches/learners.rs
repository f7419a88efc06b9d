use criterion::{criterion_group, criterion_main, Criterion};
use mevrl_core::deep::{AdamState, EnsembleNet, Matrix, Mlp, ReplayBuffer, TargetKind, TrainScratch};
use mevrl_core::env::{encode_features, CliffWalking, Environment, State};
use mevrl_core::estimators::{Kernel, KernelSpec};
use mevrl_core::rng::stream_rng;
use mevrl_core::tabular::{Algorithm, TabularConfig, TabularLearner};
use rand::Rng;
use std::hint::black_box;

fn tabular(c: &mut Criterion) {
    let env = CliffWalking::default();
    for alg in [Algorithm::Q, Algorithm::TeQ { alpha: 0.1 }, Algorithm::WeQ] {
        let cfg = TabularConfig { algorithm: alg, ..Default::default() };
        c.bench_function(&format!("tabular/cliff_100_episodes/{alg}"), |b| {
            b.iter(|| {
                let mut rng = stream_rng(1, &[]);
                let mut l = TabularLearner::new(&env, cfg).unwrap();
                for _ in 0..100 {
                    black_box(l.run_episode(&mut rng).unwrap());
                }
            })
        });
    }
}

fn filled_buffer(env: &CliffWalking, heads: usize) -> ReplayBuffer {
    let mut rng = stream_rng(3, &[]);
    let mut buf = ReplayBuffer::new(10_000, 100, env.state_count(), heads).unwrap();
    let mut s = env.reset(&mut rng);
    for _ in 0..5_000 {
        let a = rng.random_range(0..env.max_action_count());
        let step = env.step(s, a, &mut rng).unwrap();
        let next = if step.done { vec![0.0; env.state_count()] } else { encode_features(env, step.next_state).unwrap() };
        let obs = encode_features(env, s).unwrap();
        buf.push(&obs, s, a, step.reward, &next, step.done, &vec![true; heads]).unwrap();
        s = if step.done { env.reset(&mut rng) } else { step.next_state };
    }
    buf
}

fn deep(c: &mut Criterion) {
    let env = CliffWalking::default();
    let mut rng = stream_rng(4, &[]);
    let net = Mlp::new(&[50, 64, 40], &mut rng).unwrap();
    let batch = Matrix::from_rows(
        &(0..32).map(|i| encode_features(&env, State(i % 40 + 10)).unwrap()).collect::<Vec<_>>(),
    )
    .unwrap();
    c.bench_function("deep/mlp_forward_backward_b32", |b| {
        let grad = Matrix::zeros(32, 40);
        b.iter(|| {
            let cache = net.forward(black_box(&batch)).unwrap();
            black_box(net.backprop(&cache, &grad).unwrap())
        })
    });

    let buf = filled_buffer(&env, 10);
    let kinds = [
        ("double", TargetKind::Double),
        (
            "te",
            TargetKind::Kernel {
                kernel: Kernel::new(KernelSpec::IndicatorAlpha { alpha: 0.1 }).unwrap(),
                variance_of_mean: false,
            },
        ),
    ];
    for (name, kind) in kinds {
        let mut e = EnsembleNet::new(50, &[64], 4, 10, &mut rng).unwrap();
        let mut opt = AdamState::new(e.main().param_count(), 1e-3);
        let mut scratch = TrainScratch::default();
        let mut r = stream_rng(5, &[]);
        c.bench_function(&format!("deep/train_step_k10_{name}"), |b| {
            b.iter(|| e.train_step(&buf, 32, &kind, 0.99, &mut opt, &mut r, &mut scratch).unwrap())
        });
    }
}

criterion_group!(benches, tabular, deep);
criterion_main!(benches);
