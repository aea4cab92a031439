use crate::autograd::{Real, Tape, Var};
use crate::error::{config_err, Result};
use crate::nn::Linear;

/// `1 − mean_rows cos(proj(p), sg(e))`. `p` is `[rows, d]`, `e` is
/// `[rows, d_Φ]`; the result lies in [0, 2].
pub fn align_loss_single<T: Real>(
    tape: &mut Tape<'_, T>,
    p: Var,
    proj: &Linear,
    e: Var,
) -> Result<Var> {
    let z = proj.forward(tape, p)?;
    let target = tape.stop_gradient(e);
    let cos = tape.cosine_similarity(z, target)?;
    let m = tape.mean(cos);
    let neg = tape.scale(m, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Sum of [`align_loss_single`] over paired streams, projections and
/// targets. Also returns each stream's term.
pub fn align_loss_multi<T: Real>(
    tape: &mut Tape<'_, T>,
    prefix_outputs: &[Var],
    projs: &[&Linear],
    targets: &[Var],
) -> Result<(Var, Vec<Var>)> {
    let m = prefix_outputs.len();
    if m == 0 || projs.len() != m || targets.len() != m {
        return Err(config_err!(
            "alignment needs matching non-empty lists: {} prefixes, {} projections, {} targets",
            m,
            projs.len(),
            targets.len()
        ));
    }
    let mut terms = Vec::with_capacity(m);
    for i in 0..m {
        terms.push(align_loss_single(
            tape,
            prefix_outputs[i],
            projs[i],
            targets[i],
        )?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tensor;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_proj(store: &mut ParamStore, d: usize) -> Linear {
        let l = Linear::zeros(store, "proj", d, d).unwrap();
        let eye = Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        store.set_value(l.weight, &eye).unwrap();
        l
    }

    #[test]
    fn aligned_orthogonal_antiparallel() {
        let mut store = ParamStore::new();
        let proj = identity_proj(&mut store, 2);
        let cases = [
            ([1.0, 2.0], [2.0, 4.0], 0.0),
            ([1.0, 0.0], [0.0, 3.0], 1.0),
            ([1.0, -1.0], [-2.0, 2.0], 2.0),
        ];
        for (p, e, want) in cases {
            let mut tape = Tape::with_params(&store);
            let pv = tape.constant(&Tensor::new(&[1, 2], p.to_vec()).unwrap());
            let ev = tape.constant(&Tensor::new(&[1, 2], e.to_vec()).unwrap());
            let l = align_loss_single(&mut tape, pv, &proj, ev).unwrap();
            assert!((tape.scalar(l) - want).abs() < 1e-6, "{p:?} {e:?}");
        }
    }

    #[test]
    fn target_gets_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "proj", 4, 3, true, 1.0, &mut rng).unwrap();
        let mut tape = Tape::with_params(&store);
        let p = tape.leaf(&Tensor::randn(&[2, 4], 1.0, &mut rng).with_requires_grad(true));
        let e = tape.leaf(&Tensor::randn(&[2, 3], 1.0, &mut rng).with_requires_grad(true));
        let l = align_loss_single(&mut tape, p, &proj, e).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.wrt(e).is_none_or(|v| v.iter().all(|&x| x == 0.0)));
        assert!(g.wrt(p).unwrap().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn multi_matches_per_stream_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let projs: Vec<Linear> = (0..3)
            .map(|i| Linear::new(&mut store, &format!("p{i}"), 5, 3, true, 1.0, &mut rng).unwrap())
            .collect();
        let ps: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[4, 5], 1.0, &mut rng))
            .collect();
        let es: Vec<Tensor> = (0..3)
            .map(|_| Tensor::randn(&[4, 3], 1.0, &mut rng))
            .collect();
        let mut tape = Tape::with_params(&store);
        let pv: Vec<Var> = ps.iter().map(|t| tape.constant(t)).collect();
        let ev: Vec<Var> = es.iter().map(|t| tape.constant(t)).collect();
        let refs: Vec<&Linear> = projs.iter().collect();
        let (total, _) = align_loss_multi(&mut tape, &pv, &refs, &ev).unwrap();
        let mut sum = 0.0;
        for i in 0..3 {
            let mut t = Tape::with_params(&store);
            let (p, e) = (t.constant(&ps[i]), t.constant(&es[i]));
            let l = align_loss_single(&mut t, p, &projs[i], e).unwrap();
            sum += t.scalar(l);
        }
        assert!((tape.scalar(total) - sum).abs() < 1e-6);
        let (one, _) = align_loss_multi(&mut tape, &pv[..1], &refs[..1], &ev[..1]).unwrap();
        let single = align_loss_single(&mut tape, pv[0], &projs[0], ev[0]).unwrap();
        assert_eq!(tape.scalar(one), tape.scalar(single));
        assert!(align_loss_multi(&mut tape, &pv, &refs[..2], &ev).is_err());
    }

    #[test]
    fn positive_rescaling_of_target_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, "proj", 4, 3, true, 1.0, &mut rng).unwrap();
        let p = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let e = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let eval = |scale: f32| {
            let mut tape = Tape::with_params(&store);
            let pv = tape.constant(&p);
            let ev = tape.constant(
                &Tensor::new(&[3, 3], e.data().iter().map(|v| v * scale).collect()).unwrap(),
            );
            let l = align_loss_single(&mut tape, pv, &proj, ev).unwrap();
            tape.scalar(l)
        };
        let base = eval(1.0);
        for c in [0.01, 3.0, 250.0] {
            assert!((eval(c) - base).abs() < 1e-5);
        }
    }
}
