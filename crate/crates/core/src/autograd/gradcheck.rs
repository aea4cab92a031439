//! Central-difference gradient checking on the 64-bit tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{FrappeError, Result};

/// Threshold every registered op must meet.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Threshold for end-to-end loss checks.
pub const PIPELINE_TOLERANCE: f64 = 1e-3;
/// Finite-difference step.
pub const FD_STEP: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(FrappeError::Shape(format!(
            "gradcheck function must return a scalar, got {:?}",
            tape.shape(out)
        )));
    }
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(FrappeError::Numeric(format!(
            "non-finite function value {v}"
        )));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate over every input.
///
/// Returns `max |analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(FrappeError::Config(format!(
            "gradcheck step must be positive, got {eps}"
        )));
    }
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(&t.detach().with_requires_grad(true)))
        .collect();
    let out = f(&mut tape, &vars)?;
    if !tape.scalar(out).is_finite() {
        return Err(FrappeError::Numeric("non-finite function value".into()));
    }
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let up = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let down = eval_scalar(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !analytic[j].is_finite() {
                return Err(FrappeError::Numeric(format!(
                    "non-finite gradient at input {i}[{j}]"
                )));
            }
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// A gradient check for one registered op over random instances.
pub struct OpCheck {
    pub name: &'static str,
    run: fn(&mut ChaCha8Rng) -> Result<f64>,
}

impl OpCheck {
    /// Runs `instances` random checks and returns the worst relative error.
    pub fn run(&self, seed: u64, instances: usize) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..instances {
            worst = worst.max((self.run)(&mut rng)?);
        }
        Ok(worst)
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Standard normal values nudged at least 0.05 away from zero, clear of kinks.
fn off_kink(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = randn(shape, rng);
    for v in t.data_mut() {
        *v += 0.05f64.copysign(*v);
    }
    t
}

fn positive(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 0.5, 2.0, rng)
}

/// Projects an op output onto random weights so the check covers the full
/// Jacobian, not just its column sums.
fn probe(tape: &mut Tape<'_, f64>, y: Var, w: Var) -> Result<Var> {
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

macro_rules! unary_case {
    ($name:literal, $gen:ident, |$t:ident, $x:ident| $body:expr) => {
        OpCheck {
            name: $name,
            run: |rng| {
                let shape = [rng.random_range(1..4), rng.random_range(2..6)];
                let x = $gen(&shape, rng);
                let w = randn(&shape, rng);
                gradcheck(
                    |$t, v| {
                        let $x = v[0];
                        let y: Var = $body;
                        probe($t, y, v[1])
                    },
                    &[x, w.detach()],
                    FD_STEP,
                )
            },
        }
    };
}

/// Every differentiable op on the tape, each with a random-instance check.
pub fn registered_ops() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "matmul",
            run: |rng| {
                let (m, k, n) = (
                    rng.random_range(1..5),
                    rng.random_range(1..5),
                    rng.random_range(1..5),
                );
                let a = randn(&[m, k], rng);
                let b = randn(&[k, n], rng);
                let w = randn(&[m, n], rng);
                gradcheck(
                    |t, v| {
                        let y = t.matmul(v[0], v[1])?;
                        probe(t, y, v[2])
                    },
                    &[a, b, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "matmul_transposed",
            run: |rng| {
                let (m, k, n) = (
                    rng.random_range(1..5),
                    rng.random_range(1..5),
                    rng.random_range(1..5),
                );
                let a = randn(&[k, m], rng);
                let b = randn(&[n, k], rng);
                let w = randn(&[m, n], rng);
                gradcheck(
                    |t, v| {
                        let y = t.matmul_t(v[0], v[1], true, true)?;
                        probe(t, y, v[2])
                    },
                    &[a, b, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "add_broadcast",
            run: |rng| {
                let a = randn(&[3, 4], rng);
                let b = randn(&[4], rng);
                let w = randn(&[3, 4], rng);
                gradcheck(
                    |t, v| {
                        let y = t.add(v[0], v[1])?;
                        probe(t, y, v[2])
                    },
                    &[a, b, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "sub_broadcast",
            run: |rng| {
                let a = randn(&[2, 3], rng);
                let b = randn(&[3], rng);
                let w = randn(&[2, 3], rng);
                gradcheck(
                    |t, v| {
                        let y = t.sub(v[0], v[1])?;
                        probe(t, y, v[2])
                    },
                    &[a, b, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "mul_broadcast",
            run: |rng| {
                let a = randn(&[3, 2], rng);
                let b = randn(&[2], rng);
                let w = randn(&[3, 2], rng);
                gradcheck(
                    |t, v| {
                        let y = t.mul(v[0], v[1])?;
                        probe(t, y, v[2])
                    },
                    &[a, b, w],
                    FD_STEP,
                )
            },
        },
        unary_case!("scale", randn, |t, x| t.scale(x, -1.7)),
        unary_case!("add_scalar", randn, |t, x| t.add_scalar(x, 0.3)),
        unary_case!("relu", off_kink, |t, x| t.relu(x)),
        unary_case!("gelu", randn, |t, x| t.gelu(x)),
        unary_case!("exp", randn, |t, x| t.exp(x)),
        unary_case!("log", positive, |t, x| t.log(x)?),
        unary_case!("square", randn, |t, x| t.square(x)),
        unary_case!("sqrt", positive, |t, x| t.sqrt(x)?),
        unary_case!("softmax_lastdim", randn, |t, x| t.softmax_lastdim(x)),
        unary_case!("layernorm_lastdim", randn, |t, x| t.layernorm_lastdim(x)),
        unary_case!("reshape", randn, |t, x| {
            let n = t.value(x).len();
            let r = t.reshape(x, &[n])?;
            t.reshape(r, &t.shape(x).to_vec())?
        }),
        OpCheck {
            name: "sum",
            run: |rng| {
                let x = randn(&[3, 3], rng);
                gradcheck(|t, v| Ok(t.sum(v[0])), &[x], FD_STEP)
            },
        },
        OpCheck {
            name: "mean",
            run: |rng| {
                let x = randn(&[2, 5], rng);
                gradcheck(
                    |t, v| {
                        let s = t.square(v[0]);
                        Ok(t.mean(s))
                    },
                    &[x],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "logsumexp_lastdim",
            run: |rng| {
                let x = randn(&[3, 4], rng);
                let w = randn(&[3], rng);
                gradcheck(
                    |t, v| {
                        let y = t.logsumexp_lastdim(v[0]);
                        probe(t, y, v[1])
                    },
                    &[x, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "cosine_similarity",
            run: |rng| {
                let a = randn(&[3, 4], rng);
                let b = randn(&[3, 4], rng);
                let w = randn(&[3], rng);
                gradcheck(
                    |t, v| {
                        let y = t.cosine_similarity(v[0], v[1])?;
                        probe(t, y, v[2])
                    },
                    &[a, b, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "group_concat",
            run: |rng| {
                let a = randn(&[4, 3], rng);
                let b = randn(&[2, 3], rng);
                let w = randn(&[6, 3], rng);
                gradcheck(
                    |t, v| {
                        let y = t.group_concat(&[v[0], v[1]], 2)?;
                        probe(t, y, v[2])
                    },
                    &[a, b, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "group_slice",
            run: |rng| {
                let a = randn(&[6, 2], rng);
                let w = randn(&[4, 2], rng);
                gradcheck(
                    |t, v| {
                        let y = t.group_slice(v[0], 2, 1, 2)?;
                        probe(t, y, v[1])
                    },
                    &[a, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "tile",
            run: |rng| {
                let a = randn(&[2, 3], rng);
                let w = randn(&[6, 3], rng);
                gradcheck(
                    |t, v| {
                        let y = t.tile(v[0], 3);
                        probe(t, y, v[1])
                    },
                    &[a, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "concat_cols",
            run: |rng| {
                let a = randn(&[3, 2], rng);
                let b = randn(&[3, 4], rng);
                let w = randn(&[3, 6], rng);
                gradcheck(
                    |t, v| {
                        let y = t.concat_cols(v[0], v[1])?;
                        probe(t, y, v[2])
                    },
                    &[a, b, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "group_mean",
            run: |rng| {
                let a = randn(&[6, 3], rng);
                let w = randn(&[2, 3], rng);
                gradcheck(
                    |t, v| {
                        let y = t.group_mean(v[0], 2)?;
                        probe(t, y, v[1])
                    },
                    &[a, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "embedding",
            run: |rng| {
                let table = randn(&[4, 3], rng);
                let ids: Vec<usize> = (0..5).map(|_| rng.random_range(0..4)).collect();
                let w = randn(&[5, 3], rng);
                gradcheck(
                    move |t, v| {
                        let y = t.embedding(v[0], &ids)?;
                        probe(t, y, v[1])
                    },
                    &[table, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "select_col",
            run: |rng| {
                let a = randn(&[3, 4], rng);
                let w = randn(&[3], rng);
                gradcheck(
                    |t, v| {
                        let y = t.select_col(v[0], 2)?;
                        probe(t, y, v[1])
                    },
                    &[a, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "scale_groups",
            run: |rng| {
                let x = randn(&[6, 2], rng);
                let s = randn(&[3], rng);
                let w = randn(&[6, 2], rng);
                gradcheck(
                    |t, v| {
                        let y = t.scale_groups(v[0], v[1])?;
                        probe(t, y, v[2])
                    },
                    &[x, s, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "attention",
            run: |rng| {
                let groups = 2;
                let (sq, sk, d) = (3, 4, 4);
                let q = randn(&[groups * sq, d], rng);
                let k = randn(&[groups * sk, d], rng);
                let v = randn(&[groups * sk, d], rng);
                let w = randn(&[groups * sq, d], rng);
                gradcheck(
                    |t, x| {
                        let y = t.attention(x[0], x[1], x[2], 2, 2)?;
                        probe(t, y, x[3])
                    },
                    &[q, k, v, w],
                    FD_STEP,
                )
            },
        },
        OpCheck {
            name: "attention_masked",
            run: |rng| {
                let (sq, d) = (5, 4);
                let q = randn(&[2 * sq, d], rng);
                let k = randn(&[2 * sq, d], rng);
                let v = randn(&[2 * sq, d], rng);
                let w = randn(&[2 * sq, d], rng);
                gradcheck(
                    |t, x| {
                        let y = t.attention_masked(x[0], x[1], x[2], 2, 2, Some(3))?;
                        probe(t, y, x[3])
                    },
                    &[q, k, v, w],
                    FD_STEP,
                )
            },
        },
    ]
}

/// A check whose backward is deliberately wrong (a stop-gradient hides half
/// of the dependency). Used to exercise failure reporting.
pub fn faulty_op_check() -> OpCheck {
    OpCheck {
        name: "faulty_square",
        run: |rng| {
            let x = randn(&[2, 3], rng);
            gradcheck(
                |t, v| {
                    let s = t.stop_gradient(v[0]);
                    let y = t.mul(v[0], s)?;
                    Ok(t.sum(y))
                },
                &[x],
                FD_STEP,
            )
        },
    }
}
