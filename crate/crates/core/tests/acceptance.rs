//! End-to-end acceptance suite. Prints one line per criterion.
//!
//! Criteria 1-4 and 8 are exact and fail the test. Criteria 5-7 are
//! directional toy-scale comparisons; their outcome is reported but does
//! not panic. `FRAPPE_ACCEPT_SEEDS` overrides the seed count (default 5).

mod common;

use std::io::Write;
use std::time::Instant;

use common::{cond_batch, noisy, pyramid};
use frappe_core::alignment::{align_loss_single, DistilledTeacher, TeacherEncoder};
use frappe_core::autograd::{registered_ops, OP_TOLERANCE};
use frappe_core::diffusion::{
    DiffusionSchedule, PolicyConfig, PolicyModel, StreamAdapter, HEAD_PREFIX,
};
use frappe_core::env::{generate_datasets, DataCounts, DataOptions, Difficulty, Source, TaskSpec};
use frappe_core::mipa::{
    aggregate, is_expert_param, load_balance_value, smooth_weight_values, ExpertOptions, ExpertSet,
    LoraPair,
};
use frappe_core::nn::{Linear, ParamStore};
use frappe_core::pipeline::*;
use frappe_core::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EVAL_EPISODES: usize = 50;
const SAMPLER_STEPS: usize = 5;
const WINDOW: usize = 50;

fn say(line: &str) {
    // straight to the process stdout so the lines survive output capture
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

struct Outcome {
    id: usize,
    pass: bool,
    exact: bool,
    detail: String,
}

fn report(id: usize, exact: bool, pass: bool, detail: String) -> Outcome {
    say(&format!(
        "criterion {id} {}: {detail}",
        if pass { "PASS" } else { "FAIL" }
    ));
    Outcome {
        id,
        pass,
        exact,
        detail,
    }
}

fn scale_config(seed: u64) -> TrainConfig {
    TrainConfig {
        mid_steps: 600,
        post_steps: 200,
        lr: 5e-4,
        seed,
        ..TrainConfig::default()
    }
}

fn easy() -> TaskSpec {
    TaskSpec::new(0, Difficulty::Easy).unwrap()
}

fn success_rate(policy: &Policy, experts: bool, seed: u64) -> f64 {
    evaluate_policy(policy, experts, &easy(), EVAL_EPISODES, SAMPLER_STEPS, seed)
        .unwrap()
        .rate()
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = (0.0f64, "");
    for op in registered_ops() {
        let e = op.run(17, 10).unwrap();
        if e > worst.0 {
            worst = (e, op.name);
        }
    }
    let checks = pipeline_gradcheck(3).unwrap();
    let pipe = checks.iter().map(|c| c.max_rel_err()).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let pass = worst.0 < OP_TOLERANCE && checks.iter().all(|c| c.passed()) && secs < 120.0;
    report(
        1,
        true,
        pass,
        format!(
            "op max rel err {:.2e} ({}), total_loss max rel err {:.2e}, {:.1}s",
            worst.0, worst.1, pipe, secs
        ),
    )
}

fn align_value(a: &[f64], b: &[f64]) -> f64 {
    let mut store = ParamStore::new();
    let proj = Linear::zeros(&mut store, "id", 2, 2).unwrap();
    store
        .set_value(
            proj.weight,
            &Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
    let s64: ParamStore<f64> = store.cast();
    let mut tape = Tape::with_params(&s64);
    let p = tape.constant(&Tensor::new(&[1, 2], a.to_vec()).unwrap());
    let e = tape.constant(&Tensor::new(&[1, 2], b.to_vec()).unwrap());
    let l = align_loss_single(&mut tape, p, &proj, e).unwrap();
    tape.scalar(l)
}

fn criterion_2() -> Outcome {
    let ln3 = 3f64.ln();
    let zero = load_balance_value(&[vec![0.0; 3]]).unwrap();
    let uniform = load_balance_value(&[vec![-ln3; 3]]).unwrap();
    let smooth = smooth_weight_values(&[1.0, 0.0, 0.0], 0.1).unwrap();
    let want = [14.0 / 15.0, 1.0 / 30.0, 1.0 / 30.0];
    let smooth_err = smooth
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let same = align_value(&[1.0, 2.0], &[1.0, 2.0]);
    let orth = align_value(&[1.0, 0.0], &[0.0, 3.0]);
    let anti = align_value(&[1.0, -2.0], &[-2.0, 4.0]);
    let pass = (zero - ln3 * ln3).abs() < 1e-5
        && uniform.abs() < 1e-7
        && smooth_err < 1e-7
        && same.abs() < 1e-5
        && (orth - 1.0).abs() < 1e-5
        && (anti - 2.0).abs() < 1e-5;
    report(
        2,
        true,
        pass,
        format!(
            "balance(0)={zero:.6} balance(-ln3)={uniform:.1e} smooth err {smooth_err:.1e} align {same:.1e}/{orth:.6}/{anti:.6}"
        ),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
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
    let cond = cond_batch(&model.cfg, 2, &mut rng);
    let x = noisy(&model.cfg, 2, &mut rng);
    let latents = |adapter: StreamAdapter<'_>| {
        let mut tape = Tape::with_params(&store);
        let c = model.condition(&mut tape, &cond).unwrap();
        let out = model.stream(&mut tape, &c, &x, &[3, 30], adapter).unwrap();
        tape.tensor(out.action_latents)
    };
    let base = latents(StreamAdapter::default());
    let zero_lora = set.experts.iter().all(|e| {
        latents(StreamAdapter {
            prefix: None,
            lora: e.lora.as_ref(),
        }) == base
    });

    let mut ls = ParamStore::new();
    let layer = Linear::new(&mut ls, "l", 24, 16, true, 1.0, &mut rng).unwrap();
    let pair = LoraPair::new(&mut ls, "l.lora", 24, 16, 4, 8.0, &mut rng).unwrap();
    let up = Tensor::randn(&[16, 4], 0.5, &mut rng);
    ls.set_value(pair.up, &up).unwrap();
    let merged = pair.merged_weight(&ls, ls.get(layer.weight)).unwrap();
    let input = Tensor::randn(&[5, 24], 1.0, &mut rng);
    let mut tape = Tape::with_params(&ls);
    let xi = tape.constant(&input);
    let adapted = layer.forward_adapted(&mut tape, xi, Some(&pair)).unwrap();
    let w = tape.constant(&merged);
    let direct = tape.matmul_t(xi, w, false, true).unwrap();
    let b = tape.param(layer.bias.unwrap());
    let direct = tape.add(direct, b).unwrap();
    let merge_err = tape
        .value(adapted)
        .iter()
        .zip(tape.value(direct))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);

    let z: Vec<Tensor> = (0..3)
        .map(|_| Tensor::randn(&[2 * 8, 64], 1.0, &mut rng))
        .collect();
    let one_hot = (0..3).all(|pick| {
        let mut tape = Tape::with_params(&store);
        let vars: Vec<_> = z.iter().map(|t| tape.constant(t)).collect();
        let w = tape.constant(&Tensor::from_fn(&[2, 3], |i| {
            if i % 3 == pick {
                1.0
            } else {
                0.0
            }
        }));
        let mixed = aggregate(&mut tape, &vars, w, &model.head).unwrap();
        let single = model.head.forward(&mut tape, vars[pick]).unwrap();
        tape.value(mixed) == tape.value(single)
    });

    let mut simplex = true;
    for _ in 0..1000 {
        let m = rng.random_range(1..6);
        let eps: f64 = rng.random_range(0.0..0.99);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let s: f64 = raw.iter().sum::<f64>().max(1e-12);
        let w: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let out = smooth_weight_values(&w, eps).unwrap();
        simplex &= (out.iter().sum::<f64>() - 1.0).abs() < 1e-9
            && out.iter().all(|&v| v >= eps / m as f64 - 1e-12);
    }
    let pass = zero_lora && merge_err < 1e-5 && one_hot && simplex;
    report(
        4,
        true,
        pass,
        format!("zero LoRA exact {zero_lora}, merge err {merge_err:.1e}, one-hot exact {one_hot}, simplex+floor {simplex}"),
    )
}

fn tiny_run(seed: u64, dir: &std::path::Path) -> (String, String, f64) {
    let cfg = TrainConfig {
        d_model: 16,
        heads: 2,
        layers: 2,
        mlp_hidden: 16,
        mid_steps: 20,
        post_steps: 10,
        distill_steps: 20,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let data = pyramid(3, 2, 0, seed);
    let teachers = TeacherEncoder::all();
    let distilled = distill_on_data(&teachers, &data, &cfg).unwrap().student;
    let cfg = TrainConfig {
        ratio_ego_task: 1.0,
        ..cfg
    };
    let (policy, _) = mid_train(&distilled, &data, &cfg, Some(dir)).unwrap();
    let mid = policy.hash();
    let (policy, _) = post_train(policy, &teachers, &data, &cfg, true, Some(dir)).unwrap();
    let rate = evaluate_policy(&policy, true, &easy(), 5, 3, seed)
        .unwrap()
        .rate();
    (mid, policy.hash(), rate)
}

fn criterion_8() -> Outcome {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = tiny_run(5, d1.path());
    let b = tiny_run(5, d2.path());
    let same_run = a == b;
    let files_equal = [MID_CHECKPOINT, POST_CHECKPOINT].iter().all(|f| {
        std::fs::read(d1.path().join(f)).unwrap() == std::fs::read(d2.path().join(f)).unwrap()
    });
    let post = d1.path().join(POST_CHECKPOINT);
    let loaded = Policy::load(&post).unwrap();
    let again = d1.path().join("again.frap");
    loaded.save(&again).unwrap();
    let round_trip =
        loaded.hash() == a.1 && std::fs::read(&post).unwrap() == std::fs::read(&again).unwrap();
    let counts = DataCounts {
        robot: 4,
        ego_task: 3,
        ego_web: 3,
    };
    let g1 = generate_datasets(counts, &DataOptions::default(), 8).unwrap();
    let g2 = generate_datasets(counts, &DataOptions::default(), 8).unwrap();
    let regen = Source::ALL
        .iter()
        .all(|&s| g1.get(s).to_bytes() == g2.get(s).to_bytes());
    let pass = same_run && files_equal && round_trip && regen;
    report(
        8,
        true,
        pass,
        format!("same hashes+success {same_run}, checkpoint bytes equal {files_equal}, round trip {round_trip}, dataset regen {regen}"),
    )
}

struct SeedRun {
    success: [f64; 3],
    cotrain: [f64; 2],
    mid_action: (f64, f64),
    mid_align: (f64, f64),
    post_align: Vec<(f64, f64)>,
    frozen: Vec<(&'static str, bool)>,
    head_grad_zero: bool,
    pipeline_secs: f64,
}

fn head_gradient_is_zero(
    policy: &Policy,
    data: &frappe_core::env::DataPyramid,
    teacher: &DistilledTeacher,
) -> bool {
    let set =
        TrainingSet::new(data, &[teacher as &dyn frappe_core::alignment::Encoder], 8).unwrap();
    let samples: Vec<SampleRef> = (0..4)
        .map(|i| SampleRef {
            source: Source::EgoTask,
            episode: i,
            t: 2 * i,
            has_actions: false,
        })
        .collect();
    let schedule = DiffusionSchedule::cosine(policy.diffusion_steps, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch = set
        .batch(&policy.model.cfg, &samples, &schedule, &mut rng)
        .unwrap();
    let mut tape = Tape::with_params(&policy.store);
    let mid = policy.mid.as_ref().unwrap();
    let terms = total_loss(
        &mut tape,
        &policy.model,
        Streams::Single(mid),
        &batch,
        0.05,
        0.01,
    )
    .unwrap();
    let grads = tape.backward(terms.total).unwrap();
    terms.action.is_none()
        && policy
            .store
            .iter()
            .filter(|(_, n, _)| n.starts_with(HEAD_PREFIX))
            .all(|(id, _, _)| grads.param(id).is_none_or(|g| g.iter().all(|&v| v == 0.0)))
}

fn seed_run(seed: u64) -> SeedRun {
    let t0 = Instant::now();
    let cfg = scale_config(seed);
    let eval_seed = 10_000 + seed;
    let data = pyramid(50, 0, 0, seed);
    let teachers = TeacherEncoder::all();
    let teacher_hashes: Vec<String> = teachers.iter().map(|t| t.hash()).collect();
    let distilled = distill_on_data(&teachers, &data, &cfg).unwrap().student;
    let distilled_hash = distilled.hash();

    let p0 = run_paradigm(
        Paradigm::PlainFinetune,
        &data,
        &teachers,
        &distilled,
        &cfg,
        None,
    )
    .unwrap();
    let p3 = run_paradigm(
        Paradigm::PostPrefix,
        &data,
        &teachers,
        &distilled,
        &cfg,
        None,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t6 = Instant::now();
    let p6 = run_paradigm(
        Paradigm::MidThenPostPrefixLora,
        &data,
        &teachers,
        &distilled,
        &cfg,
        Some(dir.path()),
    )
    .unwrap();
    let pipeline_secs = t6.elapsed().as_secs_f64();
    let mid_ckpt = Policy::load(&dir.path().join("mid").join(MID_CHECKPOINT)).unwrap();
    let frozen_of = |p: &Policy| p.store.hash_where(|n| !is_expert_param(n));
    let p3_base = Policy::new(cfg.policy_config(), seed).unwrap();
    let success = [
        success_rate(&p0.policy, false, eval_seed),
        success_rate(&p3.policy, true, eval_seed),
        success_rate(&p6.policy, true, eval_seed),
    ];
    let (mid, post) = (&p6.stages[0], &p6.stages[1]);
    let mid_action = smoothed_ends(&mid.action_series(), WINDOW).unwrap();
    let mid_align = smoothed_ends(&mid.align_series(), WINDOW).unwrap();
    let post_align = (0..cfg.experts)
        .map(|i| smoothed_ends(&post.expert_align_series(i), WINDOW).unwrap())
        .collect();

    let co_data = pyramid(5, 50, 0, seed);
    let co_distilled = distill_on_data(&teachers, &co_data, &cfg).unwrap().student;
    let robot_only = run_paradigm(
        Paradigm::MidFull,
        &co_data,
        &teachers,
        &co_distilled,
        &cfg,
        None,
    )
    .unwrap();
    let mixed_cfg = TrainConfig {
        ratio_robot: 0.5,
        ratio_ego_task: 0.5,
        ..cfg.clone()
    };
    let mixed = run_paradigm(
        Paradigm::MidFull,
        &co_data,
        &teachers,
        &co_distilled,
        &mixed_cfg,
        None,
    )
    .unwrap();
    let cotrain = [
        success_rate(&robot_only.policy, false, eval_seed),
        success_rate(&mixed.policy, false, eval_seed),
    ];
    let head_grad_zero = head_gradient_is_zero(&mixed.policy, &co_data, &co_distilled);

    let frozen = vec![
        (
            "teachers",
            teachers.iter().map(|t| t.hash()).collect::<Vec<_>>() == teacher_hashes,
        ),
        ("distilled teacher", distilled.hash() == distilled_hash),
        (
            "post backbone",
            frozen_of(&p6.policy) == frozen_of(&mid_ckpt),
        ),
        (
            "post-only backbone",
            p3.policy.store.hash_where(|n| n.starts_with("policy."))
                == p3_base.store.hash_where(|n| n.starts_with("policy.")),
        ),
    ];
    say(&format!(
        "seed {seed}: success p0 {:.2} p3 {:.2} p6 {:.2} | cotrain robot-only {:.2} mixed {:.2} | {:.0}s",
        success[0],
        success[1],
        success[2],
        cotrain[0],
        cotrain[1],
        t0.elapsed().as_secs_f64()
    ));
    SeedRun {
        success,
        cotrain,
        mid_action,
        mid_align,
        post_align,
        frozen,
        head_grad_zero,
        pipeline_secs,
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn acceptance() {
    let seeds: u64 = std::env::var("FRAPPE_ACCEPT_SEEDS")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    let mut out = vec![criterion_1(), criterion_2(), criterion_4(), criterion_8()];

    let runs: Vec<SeedRun> = (0..seeds).map(seed_run).collect();

    let frozen_ok = runs.iter().all(|r| r.frozen.iter().all(|(_, ok)| *ok));
    let broken: Vec<&str> = runs
        .iter()
        .flat_map(|r| r.frozen.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n))
        .collect();
    out.push(report(
        3,
        true,
        frozen_ok,
        format!("registry hashes unchanged over {seeds} seeds; broken: {broken:?}"),
    ));

    let halved = |(a, b): (f64, f64)| b <= 0.5 * a;
    let mid_ok = runs
        .iter()
        .all(|r| halved(r.mid_action) && halved(r.mid_align));
    let post_ok = runs.iter().all(|r| r.post_align.iter().all(|(a, b)| b < a));
    let slowest = runs.iter().map(|r| r.pipeline_secs).fold(0.0, f64::max);
    let fmt_pairs = |f: &dyn Fn(&SeedRun) -> (f64, f64)| {
        runs.iter()
            .map(|r| {
                let (a, b) = f(r);
                format!("{a:.3}->{b:.3}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    out.push(report(
        5,
        false,
        mid_ok && post_ok && slowest < 900.0,
        format!(
            "mid action {} | mid align {} | post experts all decreasing {post_ok} | slowest two-stage run {slowest:.0}s",
            fmt_pairs(&|r| r.mid_action),
            fmt_pairs(&|r| r.mid_align)
        ),
    ));

    let m = |i: usize| mean(runs.iter().map(|r| r.success[i]));
    let (m0, m3, m6) = (m(0), m(1), m(2));
    out.push(report(
        6,
        false,
        m6 >= m0 && m6 >= m3,
        format!("mean success p6 {m6:.3} vs p0 {m0:.3} and p3 {m3:.3}"),
    ));

    let robot_only = mean(runs.iter().map(|r| r.cotrain[0]));
    let mixed = mean(runs.iter().map(|r| r.cotrain[1]));
    let head_zero = runs.iter().all(|r| r.head_grad_zero);
    out.push(report(
        7,
        false,
        mixed >= robot_only && head_zero,
        format!("mean success with ego data {mixed:.3} vs robot only {robot_only:.3}; action-free head gradient exactly zero {head_zero}"),
    ));

    out.sort_by_key(|o| o.id);
    say("acceptance summary:");
    for o in &out {
        say(&format!(
            "  {} criterion {} ({})",
            if o.pass { "PASS" } else { "FAIL" },
            o.id,
            if o.exact { "exact" } else { "directional" }
        ));
    }
    assert!(head_zero, "action-free batches moved the action head");
    let failed: Vec<String> = out
        .iter()
        .filter(|o| o.exact && !o.pass)
        .map(|o| format!("{}: {}", o.id, o.detail))
        .collect();
    assert!(failed.is_empty(), "exact criteria failed: {failed:?}");
}
