mod common;

use common::{cond_batch, noisy};
use frappe_core::diffusion::{PolicyConfig, PolicyModel, StreamAdapter};
use frappe_core::mipa::{
    aggregate, is_expert_param, mix_latents, smooth_weights, Expert, ExpertOptions, ExpertSet,
};
use frappe_core::nn::ParamStore;
use frappe_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const B: usize = 2;
const TA: usize = 8;

fn model(seed: u64) -> (ParamStore, PolicyModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = PolicyModel::new(&mut store, PolicyConfig::tiny(), &mut rng).unwrap();
    (store, m)
}

fn latents(d: usize, m: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| Tensor::randn(&[B * TA, d], 1.0, &mut rng))
        .collect()
}

fn head_only(store: &ParamStore, model: &PolicyModel, z: &Tensor) -> Vec<f32> {
    let mut tape = Tape::with_params(store);
    let v = tape.constant(z);
    let out = model.head.forward(&mut tape, v).unwrap();
    tape.value(out).to_vec()
}

fn mixed(store: &ParamStore, model: &PolicyModel, z: &[Tensor], w: &Tensor, eps: f64) -> Vec<f32> {
    let mut tape = Tape::with_params(store);
    let vars: Vec<_> = z.iter().map(|t| tape.constant(t)).collect();
    let w = tape.constant(w);
    let w = smooth_weights(&mut tape, w, eps).unwrap();
    let out = aggregate(&mut tape, &vars, w, &model.head).unwrap();
    tape.value(out).to_vec()
}

#[test]
fn one_hot_weights_select_one_expert_exactly() {
    let (store, model) = model(1);
    let z = latents(model.cfg.d_model, 3, 2);
    for pick in 0..3 {
        let w = Tensor::from_fn(&[B, 3], |i| if i % 3 == pick { 1.0 } else { 0.0 });
        assert_eq!(
            mixed(&store, &model, &z, &w, 0.0),
            head_only(&store, &model, &z[pick])
        );
    }
}

#[test]
fn identical_latents_decode_like_one_stream() {
    let (store, model) = model(3);
    let z = latents(model.cfg.d_model, 1, 4);
    let copies = vec![z[0].clone(); 3];
    let w = Tensor::new(&[B, 3], vec![0.2, 0.5, 0.3, 0.9, 0.05, 0.05]).unwrap();
    let got = mixed(&store, &model, &copies, &w, 0.1);
    let want = head_only(&store, &model, &z[0]);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn aggregate_matches_manual_mixture() {
    let (store, model) = model(5);
    let d = model.cfg.d_model;
    let z = latents(d, 3, 6);
    let w = Tensor::new(&[B, 3], vec![0.6, 0.3, 0.1, 0.0, 0.25, 0.75]).unwrap();
    let eps = 0.1;
    let mut manual = vec![0f32; B * TA * d];
    for s in 0..B {
        for (i, zi) in z.iter().enumerate() {
            let wi = ((1.0 - eps) * w.data()[s * 3 + i] as f64 + eps / 3.0) as f32;
            for r in s * TA..(s + 1) * TA {
                for c in 0..d {
                    manual[r * d + c] += wi * zi.data()[r * d + c];
                }
            }
        }
    }
    let want = head_only(&store, &model, &Tensor::new(&[B * TA, d], manual).unwrap());
    let got = mixed(&store, &model, &z, &w, eps);
    for (a, b) in got.iter().zip(&want) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn mismatched_expert_count_rejected() {
    let (store, model) = model(7);
    let z = latents(model.cfg.d_model, 2, 8);
    let mut tape = Tape::with_params(&store);
    let vars: Vec<_> = z.iter().map(|t| tape.constant(t)).collect();
    let w = tape.constant(&Tensor::full(&[B, 3], 1.0 / 3.0));
    assert!(mix_latents(&mut tape, &vars, w).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mixture_is_permutation_equivariant(
        seed in 0u64..1000,
        raw in prop::collection::vec(0.01f32..1.0, B * 3),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        eps in 0.0f64..0.5,
    ) {
        let (store, model) = model(9);
        let z = latents(model.cfg.d_model, 3, seed);
        let mut w = raw.clone();
        for row in w.chunks_mut(3) {
            let s: f32 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let pz: Vec<Tensor> = perm.iter().map(|&i| z[i].clone()).collect();
        let pw: Vec<f32> = (0..B).flat_map(|r| perm.iter().map(move |&i| (r, i))).map(|(r, i)| w[r * 3 + i]).collect();
        let a = mixed(&store, &model, &z, &Tensor::new(&[B, 3], w).unwrap(), eps);
        let b = mixed(&store, &model, &pz, &Tensor::new(&[B, 3], pw).unwrap(), eps);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }
}

#[test]
fn lora_adapters_start_neutral_and_then_matter() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
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
    let run = |store: &ParamStore, adapter: StreamAdapter<'_>| {
        let mut tape = Tape::with_params(store);
        let c = model.condition(&mut tape, &cond).unwrap();
        let out = model.stream(&mut tape, &c, &x, &[4, 44], adapter).unwrap();
        tape.tensor(out.action_latents)
    };
    let plain = run(&store, StreamAdapter::default());
    fn lora_only(e: &Expert) -> StreamAdapter<'_> {
        StreamAdapter {
            prefix: None,
            lora: e.lora.as_ref(),
        }
    }
    for e in &set.experts {
        assert_eq!(run(&store, lora_only(e)), plain);
    }
    let up = set.experts[1].lora.as_ref().unwrap().pairs[0].up;
    let shape = store.get(up).shape().to_vec();
    store
        .set_value(up, &Tensor::randn(&shape, 0.5, &mut rng))
        .unwrap();
    assert_eq!(run(&store, lora_only(&set.experts[0])), plain);
    assert_ne!(run(&store, lora_only(&set.experts[1])), plain);
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    assert!(names
        .iter()
        .filter(|n| is_expert_param(n))
        .all(|n| n.starts_with("expert.") || n.starts_with("router.")));
    assert!(names.iter().any(|n| n == "expert.2.lora.0.U"));
}
