use std::collections::HashMap;

use super::{Real, Tensor};
use crate::error::{shape_err, FrappeError, Result};
use crate::nn::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYERNORM_EPS: f64 = 1e-5;
const COSINE_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    StopGrad,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxLast(Var),
    LayerNormLast(Var),
    LogSumExpLast(Var),
    Cosine(Var, Var),
    Reshape(Var),
    GroupConcat {
        parts: Vec<Var>,
        groups: usize,
    },
    GroupSlice {
        a: Var,
        groups: usize,
        start: usize,
    },
    Tile {
        a: Var,
        times: usize,
    },
    ConcatCols(Var, Var),
    GroupMean {
        a: Var,
        groups: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectCol {
        a: Var,
        col: usize,
    },
    ScaleGroups {
        x: Var,
        s: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    vars: HashMap<Var, Vec<T>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a leaf; `None` if the leaf did
    /// not require grad or the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.vars.get(&v).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> + '_ {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}

/// Records operations in order and differentiates them in exact reverse order.
///
/// A tape is single-use: `backward` consumes the recording and a second call
/// is an error.
pub struct Tape<'p, T: Real = f32> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
    visit_order: Vec<usize>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            consumed: false,
            visit_order: Vec::new(),
        }
    }

    /// A tape that can pull leaves out of a parameter registry.
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Node indices visited by the last backward pass, in visit order.
    pub fn backward_order(&self) -> &[usize] {
        &self.visit_order
    }

    fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].shape.last().copied().unwrap_or(1)
    }

    fn rows(&self, v: Var) -> usize {
        let c = self.cols(v).max(1);
        self.nodes[v.0].value.len() / c
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ------------------------------------------------------------------
    // leaves

    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.constant(&t))
    }

    /// Leaf bound to a registry parameter. Repeated calls return the same var.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.params.expect("tape has no parameter store attached");
        let t = store.get(id);
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            op: Op::Param(id),
            requires_grad: t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let n = &self.nodes[x.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.nodes.push(Node {
            shape,
            value,
            op: Op::StopGrad,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    // ------------------------------------------------------------------
    // linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!(
                "matmul needs matrices, got {:?} and {:?}",
                sa,
                sb
            ));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(shape_err!(
                "matmul inner dimensions differ: {:?}{} x {:?}{}",
                sa,
                if ta { "ᵀ" } else { "" },
                sb,
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            ka,
            n,
            T::one(),
            self.value(a),
            ta,
            self.value(b),
            tb,
            T::zero(),
            &mut out,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    // ------------------------------------------------------------------
    // elementwise with leading-dimension broadcasting of the right operand

    fn check_broadcast(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        let scalar = self.value(b).len() == 1;
        if suffix || scalar {
            Ok(())
        } else {
            Err(shape_err!(
                "{what}: cannot broadcast {:?} onto {:?}",
                sb,
                sa
            ))
        }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<usize>, Vec<T>)> {
        self.check_broadcast(a, b, what)?;
        let av = self.value(a);
        let bv = self.value(b);
        let nb = bv.len();
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % nb]))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        let v = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::of_f64(c);
        let v = self.value(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a), &[a])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.shape(a).to_vec(), v, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| gelu_fwd(x))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| !(x > T::zero())) {
            return Err(FrappeError::Domain(format!(
                "log of non-positive value {x:?}"
            )));
        }
        Ok(self.unary(a, Op::Log(a), |x| x.ln()))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x < T::zero()) {
            return Err(FrappeError::Domain(format!("sqrt of negative value {x:?}")));
        }
        Ok(self.unary(a, Op::Sqrt(a), |x| x.sqrt()))
    }

    // ------------------------------------------------------------------
    // reductions and row-wise ops

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let vals = self.value(a);
        let s: T = vals.iter().copied().sum::<T>() / T::of_f64(vals.len() as f64);
        self.push(vec![1], vec![s], Op::Mean(a), &[a])
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let c = self.cols(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(self.shape(a).to_vec(), out, Op::SoftmaxLast(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance (no affine).
    pub fn layernorm_lastdim(&mut self, a: Var) -> Var {
        let c = self.cols(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let (mean, inv) = row_stats(row);
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
        }
        self.push(self.shape(a).to_vec(), out, Op::LayerNormLast(a), &[a])
    }

    /// Row-wise `log Σ exp`; output has one entry per row.
    pub fn logsumexp_lastdim(&mut self, a: Var) -> Var {
        let c = self.cols(a);
        let out: Vec<T> = self.value(a).chunks(c).map(logsumexp).collect();
        let rows = out.len();
        self.push(vec![rows], out, Op::LogSumExpLast(a), &[a])
    }

    /// Row-wise cosine similarity with an epsilon-guarded denominator.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "cosine_similarity shapes differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let c = self.cols(a);
        let eps = T::of_f64(COSINE_EPS);
        let out: Vec<T> = self
            .value(a)
            .chunks(c)
            .zip(self.value(b).chunks(c))
            .map(|(x, y)| {
                let (dot, nx, ny) = dot_norms(x, y);
                dot / (nx * ny + eps)
            })
            .collect();
        let rows = out.len();
        Ok(self.push(vec![rows], out, Op::Cosine(a, b), &[a, b]))
    }

    // ------------------------------------------------------------------
    // structural ops

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(shape_err!(
                "cannot reshape {:?} into {:?}",
                self.shape(a),
                shape
            ));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a), &[a]))
    }

    /// Concatenates row blocks per group: each part is `[groups*r_j, c]`, the
    /// output is `[groups*Σr_j, c]` with group `g` holding its rows from every
    /// part in order.
    pub fn group_concat(&mut self, parts: &[Var], groups: usize) -> Result<Var> {
        let c = self.cols(parts[0]);
        let mut per_group = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.cols(p) != c || self.shape(p).len() != 2 || self.rows(p) % groups != 0 {
                return Err(shape_err!(
                    "group_concat part {:?} incompatible with {} groups of width {}",
                    self.shape(p),
                    groups,
                    c
                ));
            }
            per_group.push(self.rows(p) / groups);
        }
        let total: usize = per_group.iter().sum();
        let mut out = Vec::with_capacity(groups * total * c);
        for g in 0..groups {
            for (&p, &r) in parts.iter().zip(&per_group) {
                out.extend_from_slice(&self.value(p)[g * r * c..(g + 1) * r * c]);
            }
        }
        Ok(self.push(
            vec![groups * total, c],
            out,
            Op::GroupConcat {
                parts: parts.to_vec(),
                groups,
            },
            parts,
        ))
    }

    /// Takes rows `start..start+len` of every group.
    pub fn group_slice(&mut self, a: Var, groups: usize, start: usize, len: usize) -> Result<Var> {
        let c = self.cols(a);
        let rows = self.rows(a);
        if rows % groups != 0 || start + len > rows / groups {
            return Err(shape_err!(
                "group_slice {}..{} out of range for {:?} in {} groups",
                start,
                start + len,
                self.shape(a),
                groups
            ));
        }
        let r = rows / groups;
        let mut out = Vec::with_capacity(groups * len * c);
        for g in 0..groups {
            let base = (g * r + start) * c;
            out.extend_from_slice(&self.value(a)[base..base + len * c]);
        }
        Ok(self.push(
            vec![groups * len, c],
            out,
            Op::GroupSlice { a, groups, start },
            &[a],
        ))
    }

    /// Repeats a `[r, c]` block `times` times along rows.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let c = self.cols(a);
        let r = self.rows(a);
        let mut out = Vec::with_capacity(times * r * c);
        for _ in 0..times {
            out.extend_from_slice(self.value(a));
        }
        self.push(vec![times * r, c], out, Op::Tile { a, times }, &[a])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, rb) = (self.rows(a), self.rows(b));
        if ra != rb {
            return Err(shape_err!(
                "concat_cols row counts differ: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let (ca, cb) = (self.cols(a), self.cols(b));
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            out.extend_from_slice(&self.value(a)[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&self.value(b)[i * cb..(i + 1) * cb]);
        }
        Ok(self.push(vec![ra, ca + cb], out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Mean of the rows of every group: `[groups*r, c] -> [groups, c]`.
    pub fn group_mean(&mut self, a: Var, groups: usize) -> Result<Var> {
        let c = self.cols(a);
        let rows = self.rows(a);
        if groups == 0 || rows % groups != 0 {
            return Err(shape_err!(
                "group_mean: {:?} not divisible into {} groups",
                self.shape(a),
                groups
            ));
        }
        let r = rows / groups;
        let inv = T::one() / T::of_f64(r as f64);
        let mut out = vec![T::zero(); groups * c];
        for g in 0..groups {
            for i in 0..r {
                let row = &self.value(a)[(g * r + i) * c..(g * r + i + 1) * c];
                for (o, &x) in out[g * c..(g + 1) * c].iter_mut().zip(row) {
                    *o += x * inv;
                }
            }
        }
        Ok(self.push(vec![groups, c], out, Op::GroupMean { a, groups }, &[a]))
    }

    /// Row gather from an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let c = self.cols(table);
        let vocab = self.rows(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vocab {
                return Err(FrappeError::Index(format!(
                    "embedding id {id} >= vocabulary {vocab}"
                )));
            }
            out.extend_from_slice(&self.value(table)[id * c..(id + 1) * c]);
        }
        Ok(self.push(
            vec![ids.len(), c],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Column `col` of a matrix as a vector.
    pub fn select_col(&mut self, a: Var, col: usize) -> Result<Var> {
        let c = self.cols(a);
        if col >= c {
            return Err(FrappeError::Index(format!(
                "column {col} of {:?}",
                self.shape(a)
            )));
        }
        let out: Vec<T> = self.value(a).chunks(c).map(|r| r[col]).collect();
        let n = out.len();
        Ok(self.push(vec![n], out, Op::SelectCol { a, col }, &[a]))
    }

    /// Scales every row of group `g` of `x` by `s[g]`.
    pub fn scale_groups(&mut self, x: Var, s: Var) -> Result<Var> {
        let groups = self.value(s).len();
        let rows = self.rows(x);
        if groups == 0 || rows % groups != 0 {
            return Err(shape_err!(
                "scale_groups: {:?} not divisible into {} groups",
                self.shape(x),
                groups
            ));
        }
        let per = self.value(x).len() / groups;
        let sv = self.value(s);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / per])
            .collect();
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::ScaleGroups { x, s },
            &[x, s],
        ))
    }

    /// Multi-head scaled dot-product attention computed independently per
    /// group. `q` is `[groups*sq, d]`, `k` and `v` are `[groups*sk, d]`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
    ) -> Result<Var> {
        self.attention_masked(q, k, v, groups, heads, None)
    }

    /// Attention where, with `hidden_from = Some(s)`, query positions `< s`
    /// cannot attend to key positions `>= s` (per group). Positions from `s`
    /// on see everything.
    pub fn attention_masked(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: usize,
        heads: usize,
        hidden_from: Option<usize>,
    ) -> Result<Var> {
        let d = self.cols(q);
        if self.cols(k) != d || self.cols(v) != d || self.rows(k) != self.rows(v) {
            return Err(shape_err!(
                "attention shapes incompatible: q {:?}, k {:?}, v {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            ));
        }
        if heads == 0 || d % heads != 0 || self.rows(q) % groups != 0 || self.rows(k) % groups != 0
        {
            return Err(shape_err!("attention: d={d} heads={heads} groups={groups}"));
        }
        let sq = self.rows(q) / groups;
        let sk = self.rows(k) / groups;
        let dh = d / heads;
        let scale = T::one() / T::of_f64(dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![T::zero(); groups * sq * d];
        let mut probs = vec![T::zero(); groups * heads * sq * sk];
        for g in 0..groups {
            for h in 0..heads {
                for i in 0..sq {
                    let qi = &qv[(g * sq + i) * d + h * dh..][..dh];
                    let p = &mut probs[((g * heads + h) * sq + i) * sk..][..sk];
                    let visible = match hidden_from {
                        Some(s) if i < s => s.min(sk),
                        _ => sk,
                    };
                    for (j, pj) in p.iter_mut().enumerate() {
                        if j >= visible {
                            *pj = T::neg_infinity();
                            continue;
                        }
                        let kj = &kv[(g * sk + j) * d + h * dh..][..dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(p);
                    let o = &mut out[(g * sq + i) * d + h * dh..][..dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv[(g * sk + j) * d + h * dh..][..dh];
                        for (oe, &ve) in o.iter_mut().zip(vj) {
                            *oe += pj * ve;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            vec![groups * sq, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    // ------------------------------------------------------------------
    // backward

    /// Differentiates the scalar `loss` with respect to every leaf that
    /// requires grad, visiting nodes in exact reverse recording order.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(FrappeError::Tape(
                "backward called twice on the same recording".into(),
            ));
        }
        self.consumed = true;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            vars: HashMap::new(),
            params: Vec::new(),
        };
        self.visit_order.clear();

        for i in (0..n).rev() {
            self.visit_order.push(i);
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.vars.insert(Var(i), g);
                }
                Op::Param(id) => {
                    out.params.push((*id, g.clone()));
                    out.vars.insert(Var(i), g);
                }
                Op::StopGrad => {}
                Op::MatMul { a, b, ta, tb } => {
                    let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                    let sa = &self.nodes[a.0].shape;
                    let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                    let nn = node.shape[1];
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if self.nodes[a.0].requires_grad {
                        let buf = grad_buf(&mut grads, a, av.len());
                        if ta {
                            // stored k×m: op(B)·dCᵀ
                            T::gemm(k, nn, m, T::one(), bv, tb, &g, true, T::one(), buf);
                        } else {
                            // stored m×k: dC·op(B)ᵀ
                            T::gemm(m, nn, k, T::one(), &g, false, bv, !tb, T::one(), buf);
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let buf = grad_buf(&mut grads, b, bv.len());
                        if tb {
                            // stored n×k: dCᵀ·op(A)
                            T::gemm(nn, m, k, T::one(), &g, true, av, ta, T::one(), buf);
                        } else {
                            // stored k×n: op(A)ᵀ·dC
                            T::gemm(k, m, nn, T::one(), av, !ta, &g, false, T::one(), buf);
                        }
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -T::one()
                    } else {
                        T::one()
                    };
                    let (a, b) = (*a, *b);
                    if self.nodes[a.0].requires_grad {
                        add_into(grad_buf(&mut grads, a, g.len()), &g);
                    }
                    if self.nodes[b.0].requires_grad {
                        let nb = self.nodes[b.0].value.len();
                        let buf = grad_buf(&mut grads, b, nb);
                        for (idx, &gv) in g.iter().enumerate() {
                            buf[idx % nb] += sign * gv;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let nb = bv.len();
                    if self.nodes[a.0].requires_grad {
                        let buf = grad_buf(&mut grads, a, av.len());
                        for (idx, &gv) in g.iter().enumerate() {
                            buf[idx] += gv * bv[idx % nb];
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let buf = grad_buf(&mut grads, b, nb);
                        for (idx, &gv) in g.iter().enumerate() {
                            buf[idx % nb] += gv * av[idx];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    let buf = grad_buf(&mut grads, *a, g.len());
                    buf.iter_mut().zip(&g).for_each(|(b, &gv)| *b += gv * c);
                }
                Op::AddScalar(a) | Op::Reshape(a) => {
                    add_into(grad_buf(&mut grads, *a, g.len()), &g);
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for ((b, &gv), &xv) in buf.iter_mut().zip(&g).zip(x) {
                        if xv > T::zero() {
                            *b += gv;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[a.0].value;
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for ((b, &gv), &xv) in buf.iter_mut().zip(&g).zip(x) {
                        *b += gv * gelu_grad(xv);
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for ((b, &gv), &yv) in buf.iter_mut().zip(&g).zip(y) {
                        *b += gv * yv;
                    }
                }
                Op::Log(a) => {
                    let x = &self.nodes[a.0].value;
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for ((b, &gv), &xv) in buf.iter_mut().zip(&g).zip(x) {
                        *b += gv / xv;
                    }
                }
                Op::Square(a) => {
                    let x = &self.nodes[a.0].value;
                    let two = T::of_f64(2.0);
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for ((b, &gv), &xv) in buf.iter_mut().zip(&g).zip(x) {
                        *b += gv * two * xv;
                    }
                }
                Op::Sqrt(a) => {
                    let y = &node.value;
                    let half = T::of_f64(0.5);
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for ((b, &gv), &yv) in buf.iter_mut().zip(&g).zip(y) {
                        *b += gv * half / yv;
                    }
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].value.len();
                    let buf = grad_buf(&mut grads, *a, len);
                    buf.iter_mut().for_each(|b| *b += g[0]);
                }
                Op::Mean(a) => {
                    let len = self.nodes[a.0].value.len();
                    let share = g[0] / T::of_f64(len as f64);
                    let buf = grad_buf(&mut grads, *a, len);
                    buf.iter_mut().for_each(|b| *b += share);
                }
                Op::SoftmaxLast(a) => {
                    let c = node.shape.last().copied().unwrap_or(1);
                    let y = &node.value;
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for ((brow, grow), yrow) in buf.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c))
                    {
                        let s: T = grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum();
                        for ((b, &gv), &yv) in brow.iter_mut().zip(grow).zip(yrow) {
                            *b += yv * (gv - s);
                        }
                    }
                }
                Op::LayerNormLast(a) => {
                    let c = node.shape.last().copied().unwrap_or(1);
                    let x = &self.nodes[a.0].value;
                    let y = &node.value;
                    let cn = T::of_f64(c as f64);
                    let buf = grad_buf(&mut grads, *a, g.len());
                    for (((brow, grow), yrow), xrow) in buf
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(y.chunks(c))
                        .zip(x.chunks(c))
                    {
                        let (_, inv) = row_stats(xrow);
                        let mg: T = grow.iter().copied().sum::<T>() / cn;
                        let mgy: T =
                            grow.iter().zip(yrow).map(|(&gv, &yv)| gv * yv).sum::<T>() / cn;
                        for ((b, &gv), &yv) in brow.iter_mut().zip(grow).zip(yrow) {
                            *b += inv * (gv - mg - yv * mgy);
                        }
                    }
                }
                Op::LogSumExpLast(a) => {
                    let x = &self.nodes[a.0].value;
                    let c = self.nodes[a.0].shape.last().copied().unwrap_or(1);
                    let buf = grad_buf(&mut grads, *a, x.len());
                    for ((brow, xrow), (&gv, &lse)) in buf
                        .chunks_mut(c)
                        .zip(x.chunks(c))
                        .zip(g.iter().zip(&node.value))
                    {
                        for (b, &xv) in brow.iter_mut().zip(xrow) {
                            *b += gv * (xv - lse).exp();
                        }
                    }
                }
                Op::Cosine(a, b) => {
                    let (a, b) = (*a, *b);
                    let c = self.nodes[a.0].shape.last().copied().unwrap_or(1);
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let eps = T::of_f64(COSINE_EPS);
                    let need_a = self.nodes[a.0].requires_grad;
                    let need_b = self.nodes[b.0].requires_grad;
                    let mut da = vec![T::zero(); av.len()];
                    let mut db = vec![T::zero(); bv.len()];
                    for (r, &gv) in g.iter().enumerate() {
                        let x = &av[r * c..(r + 1) * c];
                        let y = &bv[r * c..(r + 1) * c];
                        let (dt, nx, ny) = dot_norms(x, y);
                        let den = nx * ny + eps;
                        let coef = gv / den;
                        let back = gv * dt / (den * den);
                        // d/dx ‖x‖ = x/‖x‖, taken as 0 at the origin
                        let sx = if nx > T::zero() {
                            back * ny / nx
                        } else {
                            T::zero()
                        };
                        let sy = if ny > T::zero() {
                            back * nx / ny
                        } else {
                            T::zero()
                        };
                        for j in 0..c {
                            da[r * c + j] = coef * y[j] - sx * x[j];
                            db[r * c + j] = coef * x[j] - sy * y[j];
                        }
                    }
                    if need_a {
                        add_into(grad_buf(&mut grads, a, da.len()), &da);
                    }
                    if need_b {
                        add_into(grad_buf(&mut grads, b, db.len()), &db);
                    }
                }
                Op::GroupConcat { parts, groups } => {
                    let c = node.shape[1];
                    let groups = *groups;
                    let sizes: Vec<usize> = parts
                        .iter()
                        .map(|p| self.nodes[p.0].value.len() / c / groups)
                        .collect();
                    let total: usize = sizes.iter().sum();
                    let mut offset = 0;
                    for (&p, &r) in parts.iter().zip(&sizes) {
                        if self.nodes[p.0].requires_grad {
                            let buf = grad_buf(&mut grads, p, groups * r * c);
                            for gi in 0..groups {
                                let src = &g[(gi * total + offset) * c..][..r * c];
                                add_into(&mut buf[gi * r * c..(gi + 1) * r * c], src);
                            }
                        }
                        offset += r;
                    }
                }
                Op::GroupSlice { a, groups, start } => {
                    let (a, groups, start) = (*a, *groups, *start);
                    let c = node.shape[1];
                    let len = node.shape[0] / groups;
                    let total = self.nodes[a.0].value.len();
                    let r = total / c / groups;
                    let buf = grad_buf(&mut grads, a, total);
                    for gi in 0..groups {
                        let dst = &mut buf[(gi * r + start) * c..][..len * c];
                        add_into(dst, &g[gi * len * c..(gi + 1) * len * c]);
                    }
                }
                Op::Tile { a, times } => {
                    let len = self.nodes[a.0].value.len();
                    let buf = grad_buf(&mut grads, *a, len);
                    for t in 0..*times {
                        add_into(buf, &g[t * len..(t + 1) * len]);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a.0].shape.last().copied().unwrap_or(1);
                    let cb = self.nodes[b.0].shape.last().copied().unwrap_or(1);
                    let rows = node.shape[0];
                    if self.nodes[a.0].requires_grad {
                        let buf = grad_buf(&mut grads, a, rows * ca);
                        for r in 0..rows {
                            add_into(&mut buf[r * ca..(r + 1) * ca], &g[r * (ca + cb)..][..ca]);
                        }
                    }
                    if self.nodes[b.0].requires_grad {
                        let buf = grad_buf(&mut grads, b, rows * cb);
                        for r in 0..rows {
                            add_into(
                                &mut buf[r * cb..(r + 1) * cb],
                                &g[r * (ca + cb) + ca..][..cb],
                            );
                        }
                    }
                }
                Op::GroupMean { a, groups } => {
                    let (a, groups) = (*a, *groups);
                    let c = node.shape[1];
                    let total = self.nodes[a.0].value.len();
                    let r = total / c / groups;
                    let inv = T::one() / T::of_f64(r as f64);
                    let buf = grad_buf(&mut grads, a, total);
                    for gi in 0..groups {
                        for i in 0..r {
                            let dst = &mut buf[(gi * r + i) * c..][..c];
                            for (d, &gv) in dst.iter_mut().zip(&g[gi * c..(gi + 1) * c]) {
                                *d += gv * inv;
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    let c = node.shape[1];
                    let len = self.nodes[table.0].value.len();
                    let buf = grad_buf(&mut grads, *table, len);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut buf[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
                Op::SelectCol { a, col } => {
                    let c = self.nodes[a.0].shape.last().copied().unwrap_or(1);
                    let len = self.nodes[a.0].value.len();
                    let buf = grad_buf(&mut grads, *a, len);
                    for (r, &gv) in g.iter().enumerate() {
                        buf[r * c + col] += gv;
                    }
                }
                Op::ScaleGroups { x, s } => {
                    let (x, s) = (*x, *s);
                    let xv = &self.nodes[x.0].value;
                    let sv = &self.nodes[s.0].value;
                    let per = xv.len() / sv.len();
                    if self.nodes[x.0].requires_grad {
                        let buf = grad_buf(&mut grads, x, xv.len());
                        for (idx, (b, &gv)) in buf.iter_mut().zip(&g).enumerate() {
                            *b += gv * sv[idx / per];
                        }
                    }
                    if self.nodes[s.0].requires_grad {
                        let buf = grad_buf(&mut grads, s, sv.len());
                        for (idx, (&gv, &xe)) in g.iter().zip(xv).enumerate() {
                            buf[idx / per] += gv * xe;
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                    probs,
                } => {
                    let (q, k, v, groups, heads) = (*q, *k, *v, *groups, *heads);
                    let d = node.shape[1];
                    let sq = node.shape[0] / groups;
                    let sk = self.nodes[k.0].value.len() / d / groups;
                    let dh = d / heads;
                    let scale = T::one() / T::of_f64(dh as f64).sqrt();
                    let (qv, kv, vv) = (
                        &self.nodes[q.0].value,
                        &self.nodes[k.0].value,
                        &self.nodes[v.0].value,
                    );
                    let mut dq = vec![T::zero(); qv.len()];
                    let mut dk = vec![T::zero(); kv.len()];
                    let mut dv = vec![T::zero(); vv.len()];
                    let mut ds = vec![T::zero(); sk];
                    for gi in 0..groups {
                        for h in 0..heads {
                            for i in 0..sq {
                                let p = &probs[((gi * heads + h) * sq + i) * sk..][..sk];
                                let go = &g[(gi * sq + i) * d + h * dh..][..dh];
                                let mut s = T::zero();
                                for j in 0..sk {
                                    let vj = &vv[(gi * sk + j) * d + h * dh..][..dh];
                                    let dp = dot(go, vj);
                                    ds[j] = dp;
                                    s += dp * p[j];
                                    let dvj = &mut dv[(gi * sk + j) * d + h * dh..][..dh];
                                    for (dve, &ge) in dvj.iter_mut().zip(go) {
                                        *dve += p[j] * ge;
                                    }
                                }
                                let qi = &qv[(gi * sq + i) * d + h * dh..][..dh];
                                for j in 0..sk {
                                    let w = p[j] * (ds[j] - s) * scale;
                                    let kj = &kv[(gi * sk + j) * d + h * dh..][..dh];
                                    let dqi = &mut dq[(gi * sq + i) * d + h * dh..][..dh];
                                    for (dqe, &ke) in dqi.iter_mut().zip(kj) {
                                        *dqe += w * ke;
                                    }
                                    let dkj = &mut dk[(gi * sk + j) * d + h * dh..][..dh];
                                    for (dke, &qe) in dkj.iter_mut().zip(qi) {
                                        *dke += w * qe;
                                    }
                                }
                            }
                        }
                    }
                    for (var, gbuf) in [(q, dq), (k, dk), (v, dv)] {
                        if self.nodes[var.0].requires_grad {
                            add_into(grad_buf(&mut grads, var, gbuf.len()), &gbuf);
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn grad_buf<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn dot_norms<T: Real>(x: &[T], y: &[T]) -> (T, T, T) {
    let d = dot(x, y);
    let nx = dot(x, x).sqrt();
    let ny = dot(y, y).sqrt();
    (d, nx, ny)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

pub(crate) fn logsumexp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

fn row_stats<T: Real>(row: &[T]) -> (T, T) {
    let n = T::of_f64(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::of_f64(LAYERNORM_EPS)).sqrt())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd<T: Real>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let a = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let a = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of_f64(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(c), &[5.0, 6.0, 7.0, 8.0]);
        let x = tape.constant(&t(&[1, 1], &[2.0]));
        let y = tape.constant(&t(&[1, 1], &[3.0]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z), &[6.0]);
    }

    #[test]
    fn matmul_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_relu_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[3], &[0.0, 0.0, 0.0]));
        let s = tape.softmax_lastdim(x);
        for v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let r = tape.constant(&t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(r);
        assert_eq!(tape.value(r), &[0.0, 2.0]);
    }

    #[test]
    fn layernorm_row_statistics() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[1, 8], 2.0, &mut rng);
        let mut tape = Tape::<f32>::new();
        let v = tape.constant(&x);
        let y = tape.layernorm_lastdim(v);
        let vals: Vec<f64> = tape.value(y).iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / 8.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-5, "{mean}");
        assert!((var - 1.0).abs() < 1e-4, "{var}");
    }

    #[test]
    fn log_and_sqrt_domain_errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t(&[2], &[1.0, -1.0]));
        assert!(matches!(tape.log(x), Err(FrappeError::Domain(_))));
        assert!(matches!(tape.sqrt(x), Err(FrappeError::Domain(_))));
    }

    #[test]
    fn cosine_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(&t(&[4, 2], &[1.0, 2.0, 1.0, 2.0, 1.0, 0.0, 3.0, 4.0]));
        let b = tape.constant(&t(&[4, 2], &[1.0, 2.0, -1.0, -2.0, 0.0, 5.0, 0.0, 0.0]));
        let c = tape.cosine_similarity(a, b).unwrap();
        let v = tape.value(c);
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert!((v[1] + 1.0).abs() < 1e-6);
        assert_eq!(v[2], 0.0);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.5, -2.0]).with_requires_grad(true));
        let y = tape.leaf(&t(&[2], &[3.0, 4.0]).with_requires_grad(true));
        let sx = tape.stop_gradient(x);
        let p = tape.mul(sx, y).unwrap();
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).is_none());
        assert_eq!(g.wrt(y).unwrap(), &[1.5, -2.0]);
    }

    #[test]
    fn stop_gradient_composes() {
        // sg(sg(x)) carries nothing; x + sg(x) has the gradient of x alone.
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
        let s = tape.stop_gradient(x);
        let ss = tape.stop_gradient(s);
        let sum = tape.add(x, ss).unwrap();
        let sq = tape.square(sum);
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        // d/dx (x + c)^2 = 2(x + c) with c = x held constant
        assert_eq!(g.wrt(x).unwrap(), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn backward_twice_is_error_and_order_is_reverse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let y = tape.square(x);
        let loss = tape.sum(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.backward_order(), &[2, 1, 0]);
        assert!(matches!(tape.backward(loss), Err(FrappeError::Tape(_))));
    }

    #[test]
    fn deterministic_replay() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            let a = Tensor::<f32>::randn(&[4, 6], 1.0, &mut rng);
            let b = Tensor::<f32>::randn(&[6, 6], 1.0, &mut rng);
            let mut tape = Tape::<f32>::new();
            let (va, vb) = (tape.constant(&a), tape.constant(&b));
            let c = tape.matmul(va, vb).unwrap();
            let c = tape.gelu(c);
            let c = tape.attention(c, c, c, 2, 3).unwrap();
            tape.value(c).to_vec()
        };
        let (x, y) = (run(), run());
        assert!(x.iter().zip(&y).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
