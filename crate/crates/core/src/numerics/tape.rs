//! Wengert-list reverse-mode autodiff.
//!
//! A [`Tape`] records every operation of one forward pass against a borrowed
//! [`ParamSet`]. [`Tape::backward`] replays the list in reverse and returns
//! gradients for the parameters the loss depends on. Tapes are independent
//! of each other, so separate forward passes can run on separate threads.

use super::mask::BinaryMask;
use super::ops;
use super::params::{Gradients, ParamId, ParamSet};
use super::tensor::{kernels, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    MaskedSoftmax(Var),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
        keep: Option<Vec<T>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Vec<Var>),
}

struct Node<T: Real> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    /// Param nodes already on the tape, so repeated uses share one node.
    param_nodes: Vec<Option<Var>>,
}

/// Dropout applied to attention weights: rate and the stream drawing the
/// keep decisions.
pub struct AttnDropout<'a> {
    pub rate: f64,
    pub rng: &'a mut super::rng::RngStream,
}

fn shape_err<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric {
                op: op_name.to_string(),
            });
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![T::zero(); m * n];
        kernels::gemm_nt(ta.data(), tb.data(), &mut out, m, k, n);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], out),
            Op::MatMulNT(a, b),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push("add", out, Op::Add(a, b))
    }

    /// Adds a bias vector (any shape with `cols` elements) to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.len() != ta.cols() {
            return Err(shape_err("add_row", ta, tb));
        }
        let mut out = ta.clone();
        let c = ta.cols();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_row", out, Op::AddRow(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::c(s);
        let out = self.value(a).map(|x| x * s);
        self.push("scale", out, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(ops::gelu);
        self.push("gelu", out, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.cols();
        if tg.len() != c || tb.len() != c {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let r = tx.rows();
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        ops::layer_norm_rows(
            tx.data(),
            c,
            tg.data(),
            tb.data(),
            eps,
            &mut out,
            &mut xhat,
            &mut rstd,
        );
        let shape = tx.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Row-wise softmax with excluded entries forced to zero probability.
    pub fn masked_softmax(&mut self, scores: Var, mask: &BinaryMask) -> Result<Var> {
        let t = self.value(scores);
        if mask.rows() != t.rows() || mask.cols() != t.cols() {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: t.shape().to_vec(),
                right: vec![mask.rows(), mask.cols()],
            });
        }
        mask.check_rows()?;
        let c = t.cols();
        let mut out = vec![T::zero(); t.len()];
        for (r, (row, o)) in t.data().chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
            ops::masked_softmax_row(row, mask.row(r), o);
        }
        let shape = t.shape().to_vec();
        self.push(
            "masked_softmax",
            Tensor::from_parts(shape, out),
            Op::MaskedSoftmax(scores),
        )
    }

    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = (t.rows(), t.cols());
        if indices.is_empty() {
            return Err(Error::EmptySequence("embedding lookup"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape {
                op: "embedding",
                left: t.shape().to_vec(),
                right: vec![bad],
            });
        }
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(t.row(i));
        }
        self.push(
            "embedding",
            Tensor::from_parts(vec![indices.len(), d], out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            out.extend_from_slice(t.data());
        }
        let r = out.len() / c;
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![r, c], out),
            Op::ConcatRows(parts.to_vec()),
        )
    }

    /// Multi-head masked attention core: per head
    /// `softmax(q kᵀ / sqrt(hd) + mask) v`, heads concatenated along columns.
    /// Projections are applied by the caller.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: &BinaryMask,
        heads: usize,
        dropout: Option<AttnDropout<'_>>,
    ) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (m, n, d) = (tq.rows(), tk.rows(), tq.cols());
        if tk.cols() != d || tv.cols() != d || tv.rows() != n {
            return Err(shape_err("attention", tq, tk));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
        }
        if mask.rows() != m || mask.cols() != n {
            return Err(Error::Shape {
                op: "attention mask",
                left: vec![m, n],
                right: vec![mask.rows(), mask.cols()],
            });
        }
        mask.check_rows()?;
        let keep = dropout.filter(|d| d.rate > 0.0).map(|d| {
            let scale = T::c(1.0 / (1.0 - d.rate));
            (0..heads * m * n)
                .map(|_| {
                    if d.rng.uniform() < d.rate {
                        T::zero()
                    } else {
                        scale
                    }
                })
                .collect::<Vec<T>>()
        });
        let mut out = vec![T::zero(); m * d];
        let mut probs = vec![T::zero(); heads * m * n];
        ops::attention_forward(
            tq.data(),
            tk.data(),
            tv.data(),
            m,
            n,
            d,
            heads,
            mask,
            keep.as_deref(),
            &mut out,
            &mut probs,
        );
        self.push(
            "attention",
            Tensor::from_parts(vec![m, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
                keep,
            },
        )
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`; a `[1, 1]` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = (t.rows(), t.cols());
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for (i, row) in t.data().chunks_exact(c).enumerate() {
            let tgt = targets[i];
            if tgt >= c {
                return Err(Error::Shape {
                    op: "cross_entropy target",
                    left: vec![c],
                    right: vec![tgt],
                });
            }
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let p = &mut probs[i * c..(i + 1) * c];
            let mut sum = T::zero();
            for (pp, &x) in p.iter_mut().zip(row) {
                *pp = (x - max).exp();
                sum += *pp;
            }
            for pp in p.iter_mut() {
                *pp /= sum;
            }
            total += sum.ln() + max - row[tgt];
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, parts: &[Var]) -> Result<Var> {
        let total = parts.iter().fold(T::zero(), |a, &p| a + self.value(p).sum());
        self.push("sum", Tensor::scalar(total), Op::Sum(parts.to_vec()))
    }

    /// Reverse pass from a scalar node. The seed gradient is 1.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Gradients::empty(self.params.len());

        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    out.grads[id.0] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, nn) = (ta.rows(), ta.cols(), tb.cols());
                    let da = acc(&mut grads, *a, ta.shape());
                    kernels::gemm_nt(g.data(), tb.data(), da, m, nn, k);
                    let db = acc(&mut grads, *b, tb.shape());
                    kernels::gemm_tn(ta.data(), g.data(), db, m, k, nn);
                }
                Op::MatMulNT(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, nn) = (ta.rows(), ta.cols(), tb.rows());
                    let da = acc(&mut grads, *a, ta.shape());
                    kernels::gemm_nn(g.data(), tb.data(), da, m, nn, k);
                    let db = acc(&mut grads, *b, tb.shape());
                    kernels::gemm_tn(g.data(), ta.data(), db, m, nn, k);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.shape()), g.data());
                    add_into(acc(&mut grads, *b, g.shape()), g.data());
                }
                Op::AddRow(a, bias) => {
                    add_into(acc(&mut grads, *a, g.shape()), g.data());
                    let bshape = self.value(*bias).shape().to_vec();
                    let db = acc(&mut grads, *bias, &bshape);
                    for row in g.data().chunks_exact(g.cols()) {
                        add_into(db, row);
                    }
                }
                Op::Scale(a, s) => {
                    let da = acc(&mut grads, *a, g.shape());
                    for (d, &gv) in da.iter_mut().zip(g.data()) {
                        *d += gv * *s;
                    }
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let da = acc(&mut grads, *a, g.shape());
                    for ((d, &gv), &xv) in da.iter_mut().zip(g.data()).zip(x.data()) {
                        *d += gv * ops::gelu_grad(xv);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let c = g.cols();
                    let gv = self.value(*gain).data().to_vec();
                    let gshape = self.value(*gain).shape().to_vec();
                    let bshape = self.value(*bias).shape().to_vec();
                    {
                        let dg = acc(&mut grads, *gain, &gshape);
                        for (gr, xr) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * xr[j];
                            }
                        }
                    }
                    {
                        let db = acc(&mut grads, *bias, &bshape);
                        for gr in g.data().chunks_exact(c) {
                            add_into(db, gr);
                        }
                    }
                    let dx = acc(&mut grads, *x, g.shape());
                    let nf = T::c(c as f64);
                    let mut dxh = vec![T::zero(); c];
                    for (r, (gr, xr)) in g.data().chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..c {
                            dxh[j] = gr[j] * gv[j];
                            mean_d += dxh[j];
                            mean_dx += dxh[j] * xr[j];
                        }
                        mean_d /= nf;
                        mean_dx /= nf;
                        let out = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            out[j] += rstd[r] * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
                Op::MaskedSoftmax(a) => {
                    let y = node.value.as_ref().expect("softmax output");
                    let c = y.cols();
                    let da = acc(&mut grads, *a, g.shape());
                    for ((yr, gr), dr) in y
                        .data()
                        .chunks_exact(c)
                        .zip(g.data().chunks_exact(c))
                        .zip(da.chunks_exact_mut(c))
                    {
                        let dot = kernels::dot(yr, gr);
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::Embedding { table, indices } => {
                    let tshape = self.value(*table).shape().to_vec();
                    let d = g.cols();
                    let dt = acc(&mut grads, *table, &tshape);
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], g.row(r));
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        let len = self.value(p).len();
                        add_into(acc(&mut grads, p, &shape), &g.data()[off..off + len]);
                        off += len;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                    keep,
                } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, *heads, probs, keep.as_deref());
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let s = g.data()[0];
                    let shape = self.value(*logits).shape().to_vec();
                    let c = *shape.last().unwrap();
                    let dl = acc(&mut grads, *logits, &shape);
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dl[r * c..(r + 1) * c];
                        for (d, &p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                            *d += s * p;
                        }
                        row[t] -= s;
                    }
                }
                Op::Sum(parts) => {
                    let s = g.data()[0];
                    for &p in parts {
                        let shape = self.value(p).shape().to_vec();
                        for d in acc(&mut grads, p, &shape) {
                            *d += s;
                        }
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        keep: Option<&[T]>,
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (m, n, d) = (tq.rows(), tk.rows(), tq.cols());
        let hd = d / heads;
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let mut dq = vec![T::zero(); m * d];
        let mut dk = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut dp = vec![T::zero(); n];
        let gd = g.data();
        for h in 0..heads {
            let c0 = h * hd;
            for i in 0..m {
                let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
                let gi = &gd[i * d + c0..i * d + c0 + hd];
                // dP (through dropout) and dV.
                for j in 0..n {
                    if p[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let kp = keep.map_or(T::one(), |kk| kk[(h * m + i) * n + j]);
                    let vj = &tv.data()[j * d + c0..j * d + c0 + hd];
                    dp[j] = kernels::dot(gi, vj) * kp;
                    let w = p[j] * kp;
                    if w != T::zero() {
                        let dvj = &mut dv[j * d + c0..j * d + c0 + hd];
                        for (o, &gv) in dvj.iter_mut().zip(gi) {
                            *o += w * gv;
                        }
                    }
                }
                let dot = kernels::dot(p, &dp);
                let qi = &tq.data()[i * d + c0..i * d + c0 + hd];
                for j in 0..n {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    let kj = &tk.data()[j * d + c0..j * d + c0 + hd];
                    let dqi = &mut dq[i * d + c0..i * d + c0 + hd];
                    for (o, &kv) in dqi.iter_mut().zip(kj) {
                        *o += ds * kv;
                    }
                    let dkj = &mut dk[j * d + c0..j * d + c0 + hd];
                    for (o, &qv) in dkj.iter_mut().zip(qi) {
                        *o += ds * qv;
                    }
                }
            }
        }
        add_into(acc(grads, q, tq.shape()), &dq);
        add_into(acc(grads, k, tk.shape()), &dk);
        add_into(acc(grads, v, tv.shape()), &dv);
    }
}

fn acc<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

#[inline]
fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
