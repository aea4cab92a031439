use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use frappe_bench::random_conditions;
use frappe_core::diffusion::{
    action_loss, predict_clean, sample_actions, DiffusionSchedule, PolicyConfig, PolicyModel,
};
use frappe_core::env::{generate_datasets, DataCounts, DataOptions};
use frappe_core::mipa::{ExpertOptions, ExpertSet};
use frappe_core::nn::ParamStore;
use frappe_core::pipeline::{train_stage, Policy, StageKind, TrainConfig};
use frappe_core::{Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("matmul");
    for n in [16usize, 64, 128] {
        let a = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[n, n], 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (
                    tape.leaf(&a.detach().with_requires_grad(true)),
                    tape.constant(&b),
                );
                let z = tape.matmul(x, y).unwrap();
                let s = tape.sum(z);
                tape.backward(s).unwrap()
            })
        });
    }
    g.finish();
}

fn forward_backward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let model = PolicyModel::new(&mut store, PolicyConfig::default(), &mut rng).unwrap();
    let cfg = model.cfg.clone();
    let b = 16;
    let cond = random_conditions(&cfg, b, &mut rng);
    let x = Tensor::<f32>::randn(&[b * cfg.chunk, cfg.action_dim], 1.0, &mut rng);
    let target = Tensor::<f32>::uniform(&[b * cfg.chunk, cfg.action_dim], -1.0, 1.0, &mut rng);
    let ks: Vec<usize> = (1..=b).collect();
    let mut g = c.benchmark_group("policy");
    g.sample_size(10);
    g.bench_function("forward_backward_b16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::with_params(&store);
            let cd = model.condition(&mut tape, &cond).unwrap();
            let pred = predict_clean(&mut tape, &model, &cd, None, &x, &ks).unwrap();
            let t = tape.constant(&target);
            let l = action_loss(&mut tape, pred, t).unwrap();
            tape.backward(l).unwrap()
        })
    });
    g.finish();
}

fn inference(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let model = PolicyModel::new(&mut store, PolicyConfig::default(), &mut rng).unwrap();
    let set = ExpertSet::new(
        &mut store,
        &model,
        &ExpertOptions::default(),
        None,
        &mut rng,
    )
    .unwrap();
    let cond = random_conditions(&model.cfg, 1, &mut rng);
    let schedule = DiffusionSchedule::cosine(50, 5).unwrap();
    let mut g = c.benchmark_group("sample_chunk");
    g.sample_size(20);
    for steps in [3usize, 5] {
        g.bench_with_input(BenchmarkId::new("backbone", steps), &steps, |bench, &s| {
            bench.iter(|| sample_actions(&model, &store, &cond, None, &schedule, s, 0).unwrap())
        });
        g.bench_with_input(
            BenchmarkId::new("three_experts", steps),
            &steps,
            |bench, &s| {
                bench.iter(|| {
                    sample_actions(&model, &store, &cond, Some(&set), &schedule, s, 0).unwrap()
                })
            },
        );
    }
    g.finish();
}

fn train_steps(c: &mut Criterion) {
    let data = generate_datasets(
        DataCounts {
            robot: 4,
            ego_task: 0,
            ego_web: 0,
        },
        &DataOptions::default(),
        0,
    )
    .unwrap();
    let cfg = TrainConfig::default();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("plain_10_steps", |bench| {
        bench.iter(|| {
            let mut policy = Policy::new(cfg.policy_config(), 0).unwrap();
            train_stage(&mut policy, StageKind::Plain, &[], &data, &cfg, 10, None).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, matmul, forward_backward, inference, train_steps);
criterion_main!(benches);
