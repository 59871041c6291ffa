//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records coarse operations (linear maps, layer norm, GELU,
//! multi-head attention over packed segments, cross entropy) together with
//! whatever each needs for its backward pass. Nodes whose inputs never reach
//! a trainable leaf are marked as not needing gradients and are skipped by
//! [`Tape::backward`], which is what makes frozen parameter groups cheap.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, Range, SubAssign};

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};

/// Scalar type usable on the tape: `f32` for training, `f64` for verification.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Name stored in checkpoint manifests.
    const DTYPE: &'static str;
    const BYTES: usize;

    fn erf(self) -> Self;
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Float for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Float for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// One attention block: queries in `q` attend to keys/values in `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q: Range<usize>,
    pub k: Range<usize>,
    /// Query `i` of the segment sees only keys `0..=i` of the segment.
    pub causal: bool,
}

enum Op<T> {
    Leaf,
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Add(Var, Var),
    /// `x · W + b` with `W` stored as (in, out).
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    /// `x · Wᵀ + b` with `W` stored as (out, in).
    LinearT {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Array2<T>,
        inv_std: Vec<T>,
    },
    Gelu {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<Array2<T>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Array2<T>,
    },
}

struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn col_sum<T: Float>(m: &Array2<T>) -> Array2<T> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn add_row<T: Float>(m: &mut Array2<T>, row: &Array2<T>) {
    *m += &row.row(0);
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.leaf(value, false)
    }

    /// Rows `rows[i]` of `table`, e.g. an embedding lookup.
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&t.row(r));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let out = xv.select(Axis(0), rows);
        let ng = self.ng(x);
        self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).dot(self.value(w));
        if let Some(b) = b {
            add_row(&mut out, self.value(b));
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    pub fn linear_t(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).dot(&self.value(w).t());
        if let Some(b) = b {
            add_row(&mut out, self.value(b));
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::LinearT { x, w, b }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let eps = T::of(LAYER_NORM_EPS);
        let dn = T::of(d as f64);
        let mut xhat = Array2::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (i, row) in xv.outer_iter().enumerate() {
            let mean = row.sum() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            Zip::from(xhat.row_mut(i))
                .and(&row)
                .for_each(|h, &v| *h = (v - mean) * is);
        }
        let g = self.value(gain).row(0).to_owned();
        let b = self.value(bias).row(0).to_owned();
        let mut out = xhat.clone();
        out *= &g;
        out += &b;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self
            .value(x)
            .mapv(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        let ng = self.ng(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `key_valid`, when given, marks which key rows may be attended to;
    /// a query with no visible key gets a zero output row.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        key_valid: Option<&[bool]>,
    ) -> Var {
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.ncols();
        assert_eq!(d % heads, 0, "width not divisible by head count");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for seg in &segments {
            let lq = seg.q.len();
            let lk = seg.k.len();
            let visible = |i: usize, j: usize| {
                !(seg.causal && j > i) && key_valid.is_none_or(|m| m[seg.k.start + j])
            };
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![seg.q.clone(), cols.clone()]);
                let kh = kv.slice(s![seg.k.clone(), cols.clone()]);
                let vh = vv.slice(s![seg.k.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t());
                for i in 0..lq {
                    let mut row = p.row_mut(i);
                    let mut max = T::neg_infinity();
                    for j in 0..lk {
                        if visible(i, j) {
                            row[j] *= scale;
                            max = max.max(row[j]);
                        }
                    }
                    if max == T::neg_infinity() {
                        row.fill(T::zero());
                        continue;
                    }
                    let mut total = T::zero();
                    for j in 0..lk {
                        if visible(i, j) {
                            let e = (row[j] - max).exp();
                            row[j] = e;
                            total += e;
                        } else {
                            row[j] = T::zero();
                        }
                    }
                    row /= total;
                }
                out.slice_mut(s![seg.q.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            },
            ng,
        )
    }

    /// `Σ_i weights[i] · −log softmax(logits_i)[targets[i]]` as a 1×1 value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        assert_eq!(targets.len(), weights.len());
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        let probs = softmax_rows(lv.view());
        let mut loss = T::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = lv.row(i);
            let max = row.fold(T::neg_infinity(), |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            loss += w * (lse - row[t]);
        }
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be a scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn backward_node(&self, node: &Node<T>, g: &Array2<T>, grads: &mut [Option<Array2<T>>]) {
        let mut acc = |v: Var, delta: Array2<T>| match &mut grads[v.0] {
            Some(existing) => *existing += &delta,
            slot @ None => *slot = Some(delta),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Gather { table, rows } => {
                if self.ng(*table) {
                    let mut dt = Array2::zeros(self.value(*table).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dt.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(*table, dt);
                }
            }
            Op::SelectRows { x, rows } => {
                if self.ng(*x) {
                    let mut dx = Array2::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(r);
                        dst += &g.row(i);
                    }
                    acc(*x, dx);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.clone());
                }
                if self.ng(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Linear { x, w, b } => {
                if self.ng(*x) {
                    acc(*x, g.dot(&self.value(*w).t()));
                }
                if self.ng(*w) {
                    acc(*w, self.value(*x).t().dot(g));
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    acc(b, col_sum(g));
                }
            }
            Op::LinearT { x, w, b } => {
                if self.ng(*x) {
                    acc(*x, g.dot(self.value(*w)));
                }
                if self.ng(*w) {
                    acc(*w, g.t().dot(self.value(*x)));
                }
                if let Some(b) = b.filter(|b| self.ng(*b)) {
                    acc(b, col_sum(g));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                if self.ng(*gain) {
                    acc(*gain, col_sum(&(g * xhat)));
                }
                if self.ng(*bias) {
                    acc(*bias, col_sum(g));
                }
                if self.ng(*x) {
                    let gv = self.value(*gain).row(0).to_owned();
                    let d = T::of(xhat.ncols() as f64);
                    let mut dx = g * &gv;
                    for (i, mut row) in dx.outer_iter_mut().enumerate() {
                        let xr = xhat.row(i);
                        let mean_g = row.sum() / d;
                        let mean_gx = row.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / d;
                        let is = inv_std[i];
                        Zip::from(&mut row)
                            .and(&xr)
                            .for_each(|r, &xh| *r = is * (*r - mean_g - xh * mean_gx));
                    }
                    acc(*x, dx);
                }
            }
            Op::Gelu { x } => {
                if self.ng(*x) {
                    let half = T::of(0.5);
                    let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
                    let mut dx = self.value(*x).mapv(|v| {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                        cdf + v * pdf
                    });
                    dx *= g;
                    acc(*x, dx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let vv = self.value(*v);
                let d = qv.ncols();
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let (need_q, need_k, need_v) = (self.ng(*q), self.ng(*k), self.ng(*v));
                let mut dq = need_q.then(|| Array2::zeros(qv.dim()));
                let mut dk = need_k.then(|| Array2::zeros(kv.dim()));
                let mut dv = need_v.then(|| Array2::zeros(vv.dim()));
                let mut p_iter = probs.iter();
                for seg in segments {
                    for h in 0..*heads {
                        let p = p_iter.next().expect("saved probabilities");
                        let cols = h * dh..(h + 1) * dh;
                        let go = g.slice(s![seg.q.clone(), cols.clone()]);
                        let vh = vv.slice(s![seg.k.clone(), cols.clone()]);
                        if let Some(dv) = dv.as_mut() {
                            let mut dst = dv.slice_mut(s![seg.k.clone(), cols.clone()]);
                            dst += &p.t().dot(&go);
                        }
                        if !(need_q || need_k) {
                            continue;
                        }
                        let dp = go.dot(&vh.t());
                        let mut ds = &dp * p;
                        for (i, mut row) in ds.outer_iter_mut().enumerate() {
                            let dot = row.sum();
                            Zip::from(&mut row)
                                .and(&p.row(i))
                                .for_each(|r, &pi| *r -= pi * dot);
                        }
                        ds *= scale;
                        if let Some(dq) = dq.as_mut() {
                            let kh = kv.slice(s![seg.k.clone(), cols.clone()]);
                            let mut dst = dq.slice_mut(s![seg.q.clone(), cols.clone()]);
                            dst += &ds.dot(&kh);
                        }
                        if let Some(dk) = dk.as_mut() {
                            let qh = qv.slice(s![seg.q.clone(), cols.clone()]);
                            let mut dst = dk.slice_mut(s![seg.k.clone(), cols.clone()]);
                            dst += &ds.t().dot(&qh);
                        }
                    }
                }
                if let Some(dq) = dq {
                    acc(*q, dq);
                }
                if let Some(dk) = dk {
                    acc(*k, dk);
                }
                if let Some(dv) = dv {
                    acc(*v, dv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.ng(*logits) {
                    let scale = g[[0, 0]];
                    let mut dl = probs.clone();
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let mut row = dl.row_mut(i);
                        row[t] -= T::one();
                        row *= w * scale;
                    }
                    acc(*logits, dl);
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Array2<T>>>,
}

impl<T> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Array2<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Row-wise softmax, computed stably.
pub fn softmax_rows<T: Float>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

/// Row-wise log-softmax, computed stably.
pub fn log_softmax_rows<T: Float>(x: ArrayView2<T>) -> Array2<T> {
    let mut out = x.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
