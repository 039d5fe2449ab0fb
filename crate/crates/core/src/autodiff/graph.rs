use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use super::attention::{self, AttnLayout, CopyLayout};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::num::{matmul_into, Scalar};
use crate::rng::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Linear(Var, Var, Option<Var>),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Affine(Var, T),
    Embedding(Var, Vec<u32>),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    GatherRows(Var, Vec<Option<usize>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<T>,
    },
    AttnProbs(Var, Var, AttnLayout),
    AttendValues(Var, Var, AttnLayout),
    CopyScatter(Var, CopyLayout, Vec<T>),
    Sum(Var),
    Mean(Var),
    CrossEntropyLogits {
        logits: Var,
        targets: Vec<u32>,
        smoothing: T,
        count: usize,
        pad: u32,
    },
    CrossEntropyProbs {
        probs: Var,
        targets: Vec<u32>,
        smoothing: T,
        count: usize,
        pad: u32,
        floor: T,
    },
    Dropout(Var, Vec<T>),
}

/// Recorded computation. One graph serves one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Graph<T: Scalar> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    param_vars: BTreeMap<(u64, usize), Var>,
    backward_done: bool,
    training: bool,
    dropout_rng: Option<Rng>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    /// An inference graph: dropout disabled.
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            grads: Vec::new(),
            param_vars: BTreeMap::new(),
            backward_done: false,
            training: false,
            dropout_rng: None,
        }
    }

    /// A training graph whose dropout masks are drawn from `rng`.
    pub fn training(rng: Rng) -> Self {
        Graph {
            training: true,
            dropout_rng: Some(rng),
            ..Self::new()
        }
    }

    /// Hands back the dropout stream so the caller can continue it.
    pub fn into_rng(self) -> Option<Rng> {
        self.dropout_rng
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Gradient of the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter leaf; parameters off the loss path get zeros.
    pub fn param_grads<'a>(&'a self, store: &ParamStore<T>) -> impl Iterator<Item = (ParamId, &'a [T])> + 'a {
        let key = store.key();
        self.param_vars
            .range((key, 0)..=(key, usize::MAX))
            .filter_map(move |(&(_, i), v)| self.grad(*v).map(|g| (ParamId(i), g)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite(op_name(&op)));
        }
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Ok(Var(self.values.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(false);
        Var(self.values.len() - 1)
    }

    /// A leaf that receives gradients (used by gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(true);
        Var(self.values.len() - 1)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&(store.key(), id.0)) {
            return *v;
        }
        self.values.push(store.get(id).clone());
        self.ops.push(Op::Param);
        self.needs_grad.push(true);
        let v = Var(self.values.len() - 1);
        self.param_vars.insert((store.key(), id.0), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = (self.values[a.0].rows(), self.values[a.0].cols());
        if sb.len() != 2 || sb[0] != k {
            return Err(mismatch("matmul", sa, sb));
        }
        let n = sb[1];
        let mut out = vec![T::ZERO; m * n];
        matmul_into(self.values[a.0].data(), false, self.values[b.0].data(), false, m, k, n, &mut out, T::ZERO);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), ng)
    }

    /// `x * w + b` with `w` of shape `[in, out]` and optional bias `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (m, k) = (self.values[x.0].rows(), self.values[x.0].cols());
        if sw.len() != 2 || sw[0] != k {
            return Err(mismatch("linear", sx, sw));
        }
        let n = sw[1];
        let mut out = vec![T::ZERO; m * n];
        if let Some(b) = b {
            let bias = self.values[b.0].data();
            if bias.len() != n {
                return Err(mismatch("linear bias", sw, self.shape(b)));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        matmul_into(self.values[x.0].data(), false, self.values[w.0].data(), false, m, k, n, &mut out, T::ONE);
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.needs_grad[b.0]);
        self.push(Tensor::from_parts(shape, out), Op::Linear(x, w, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.values[a.0].data().iter().zip(self.values[b.0].data()).map(|(x, y)| *x + *y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Add(a, b), ng)
    }

    /// Adds a row vector (`cols` entries) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = self.values[a.0].cols();
        if self.values[row.0].len() != c {
            return Err(mismatch("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.values[row.0].data().to_vec();
        let mut out = self.values[a.0].data().to_vec();
        for chunk in out.chunks_mut(c) {
            add_into(chunk, &r);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, row]);
        self.push(Tensor::from_parts(shape, out), Op::AddRow(a, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<T> = self.values[a.0].data().iter().zip(self.values[b.0].data()).map(|(x, y)| *x * *y).collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), ng)
    }

    /// Scales row `r` of `a` by `s[r]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = (self.values[a.0].rows(), self.values[a.0].cols());
        if self.values[s.0].len() != r {
            return Err(mismatch("mul_col", self.shape(a), self.shape(s)));
        }
        let sv = self.values[s.0].data();
        let mut out = self.values[a.0].data().to_vec();
        for (row, &f) in out.chunks_mut(c).zip(sv) {
            row.iter_mut().for_each(|x| *x *= f);
        }
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, s]);
        self.push(Tensor::from_parts(shape, out), Op::MulCol(a, s), ng)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let out = self.values[x.0].data().iter().map(|v| s * *v + t).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Affine(x, s), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.affine(x, factor, 0.0)
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`; output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let t = &self.values[table.0];
        let (vocab, dim) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::TokenOutOfRange { id, size: vocab });
            }
            out.extend_from_slice(t.row(id as usize));
        }
        let ng = self.ng(&[table]);
        self.push(Tensor::from_parts(vec![ids.len(), dim], out), Op::Embedding(table, ids.to_vec()), ng)
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(x).len() {
            return Err(Error::invalid(alloc::format!("axis {axis} out of range for shape {:?}", self.shape(x))));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = softmax_along(self.values[x.0].data(), self.shape(x), axis, false);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x, axis), ng)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let out = softmax_along(self.values[x.0].data(), self.shape(x), axis, true);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::LogSoftmax(x, axis), ng)
    }

    /// Normalizes every row to zero mean and unit variance, then applies the
    /// optional `(gamma, beta)` affine transform.
    pub fn layer_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let c = self.values[x.0].cols();
        if let Some((g, b)) = affine {
            if self.values[g.0].len() != c || self.values[b.0].len() != c {
                return Err(mismatch("layer_norm", self.shape(x), self.shape(g)));
            }
        }
        let data = self.values[x.0].data();
        let mut xhat = vec![T::ZERO; data.len()];
        let mut inv_std = Vec::with_capacity(data.len() / c);
        let n = T::from_usize(c);
        for (row, out) in data.chunks(c).zip(xhat.chunks_mut(c)) {
            let mut mean = T::ZERO;
            row.iter().for_each(|v| mean += *v);
            mean /= n;
            let mut var = T::ZERO;
            row.iter().for_each(|v| var += (*v - mean) * (*v - mean));
            var /= n;
            let is = T::ONE / (var + T::from_f64(LN_EPS)).sqrt();
            for (o, v) in out.iter_mut().zip(row) {
                *o = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let mut out = xhat.clone();
        if let Some((g, b)) = affine {
            let (gv, bv) = (self.values[g.0].data(), self.values[b.0].data());
            for row in out.chunks_mut(c) {
                for ((o, gg), bb) in row.iter_mut().zip(gv).zip(bv) {
                    *o = *o * *gg + *bb;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]) || affine.is_some_and(|(g, b)| self.ng(&[g, b]));
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, affine, xhat, inv_std }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.values[x.0].data().iter().map(|v| if *v > T::ZERO { *v } else { T::ZERO }).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.values[x.0].data().iter().map(|v| sigmoid(*v)).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Sigmoid(x), ng)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat inputs"))?;
        self.check_axis(first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                out.extend_from_slice(&self.values[x.0].data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.ng(xs);
        self.push(Tensor::from_parts(shape, out), Op::Concat(xs.to_vec(), axis), ng)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(alloc::format!("slice {start}..{} out of range for {shape:?}", start + len)));
        }
        let (outer, n, inner) = outer_inner(&shape, axis);
        let data = self.values[x.0].data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&data[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(oshape, out), Op::Slice(x, axis, start), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values[x.0].len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let t = self.values[x.0].reshaped(shape.to_vec());
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Output row `i` is row `idx[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let (r, c) = (self.values[x.0].rows(), self.values[x.0].cols());
        let mut out = vec![T::ZERO; idx.len() * c];
        for (i, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                if s >= r {
                    return Err(Error::invalid(alloc::format!("gather row {s} out of range ({r} rows)")));
                }
                out[i * c..(i + 1) * c].copy_from_slice(self.values[x.0].row(s));
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(vec![idx.len(), c], out), Op::GatherRows(x, idx.to_vec()), ng)
    }

    /// Multi-head scaled dot-product attention over already projected
    /// queries, keys and values (all `[rows, dim]`, heads split by columns).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: &AttnLayout) -> Result<Var> {
        let dim = self.values[q.0].cols();
        if self.values[k.0].cols() != dim || self.shape(k) != self.shape(v) {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        layout.validate(self.values[q.0].rows(), self.values[k.0].rows(), dim)?;
        let probs = attention::attention_probs(self.values[q.0].data(), self.values[k.0].data(), dim, layout);
        let out = attention::attend(&probs, self.values[v.0].data(), dim, layout);
        let ng = self.ng(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            layout: layout.clone(),
            probs,
        };
        self.push(Tensor::from_parts(vec![layout.batch * layout.q_len, dim], out), op, ng)
    }

    /// Single-head attention probabilities `[batch * q_len, k_len]`.
    pub fn attention_probs(&mut self, q: Var, k: Var, layout: &AttnLayout) -> Result<Var> {
        let dim = self.values[q.0].cols();
        if self.values[k.0].cols() != dim || layout.heads != 1 {
            return Err(mismatch("attention_probs", self.shape(q), self.shape(k)));
        }
        layout.validate(self.values[q.0].rows(), self.values[k.0].rows(), dim)?;
        let probs = attention::attention_probs(self.values[q.0].data(), self.values[k.0].data(), dim, layout);
        let ng = self.ng(&[q, k]);
        self.push(
            Tensor::from_parts(vec![layout.batch * layout.q_len, layout.k_len], probs),
            Op::AttnProbs(q, k, layout.clone()),
            ng,
        )
    }

    /// Per-sequence `probs * values` for single-head probabilities.
    pub fn attend_values(&mut self, probs: Var, v: Var, layout: &AttnLayout) -> Result<Var> {
        let dim = self.values[v.0].cols();
        let expect = [layout.batch * layout.q_len, layout.k_len];
        if self.shape(probs) != expect || layout.heads != 1 || self.values[v.0].rows() != layout.batch * layout.k_len {
            return Err(mismatch("attend_values", self.shape(probs), self.shape(v)));
        }
        let out = attention::attend(self.values[probs.0].data(), self.values[v.0].data(), dim, layout);
        let ng = self.ng(&[probs, v]);
        self.push(
            Tensor::from_parts(vec![layout.batch * layout.q_len, dim], out),
            Op::AttendValues(probs, v, layout.clone()),
            ng,
        )
    }

    /// Copy distribution: attention mass scattered onto token ids.
    pub fn copy_scatter(&mut self, alpha: Var, layout: &CopyLayout) -> Result<Var> {
        let expect = [layout.batch * layout.rows_per_batch, layout.mem_len];
        if self.shape(alpha) != expect || layout.tokens.len() != layout.batch * layout.mem_len {
            return Err(mismatch("copy_scatter", self.shape(alpha), &expect));
        }
        if let Some(&Some(t)) = layout.tokens.iter().find(|t| t.is_some_and(|t| t as usize >= layout.vocab)) {
            return Err(Error::TokenOutOfRange { id: t, size: layout.vocab });
        }
        let (out, mass) = attention::copy_scatter(self.values[alpha.0].data(), layout);
        let ng = self.ng(&[alpha]);
        self.push(
            Tensor::from_parts(vec![expect[0], layout.vocab], out),
            Op::CopyScatter(alpha, layout.clone(), mass),
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut s = T::ZERO;
        self.values[x.0].data().iter().for_each(|v| s += *v);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let mut s = T::ZERO;
        self.values[x.0].data().iter().for_each(|v| s += *v);
        s /= T::from_usize(self.values[x.0].len());
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    fn check_targets(&self, x: Var, targets: &[u32], pad: u32) -> Result<usize> {
        let (r, c) = (self.values[x.0].rows(), self.values[x.0].cols());
        if targets.len() != r {
            return Err(mismatch("cross_entropy targets", self.shape(x), &[targets.len()]));
        }
        let mut count = 0;
        for &t in targets {
            if t as usize >= c {
                return Err(Error::TokenOutOfRange { id: t, size: c });
            }
            if t != pad {
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Empty("cross-entropy batch (all targets are padding)"));
        }
        Ok(count)
    }

    /// Label-smoothed cross entropy from logits, averaged over rows whose
    /// target is not `pad`. Smoothing spreads `smoothing` mass uniformly.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[u32], smoothing: f64, pad: u32) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        let count = self.check_targets(logits, targets, pad)?;
        let c = self.values[logits.0].cols();
        let eps = T::from_f64(smoothing);
        let inv_c = T::ONE / T::from_usize(c);
        let mut total = T::ZERO;
        for (row, &t) in self.values[logits.0].data().chunks(c).zip(targets) {
            if t == pad {
                continue;
            }
            let lse = log_sum_exp(row);
            let mut mean = T::ZERO;
            row.iter().for_each(|v| mean += *v);
            mean *= inv_c;
            total += (T::ONE - eps) * (lse - row[t as usize]) + eps * (lse - mean);
        }
        total /= T::from_usize(count);
        let ng = self.ng(&[logits]);
        let op = Op::CrossEntropyLogits {
            logits,
            targets: targets.to_vec(),
            smoothing: eps,
            count,
            pad,
        };
        self.push(Tensor::scalar(total), op, ng)
    }

    /// Label-smoothed cross entropy from probabilities (floored before the log).
    pub fn cross_entropy_probs(&mut self, probs: Var, targets: &[u32], smoothing: f64, pad: u32) -> Result<Var> {
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid("label smoothing must lie in [0, 1)"));
        }
        let count = self.check_targets(probs, targets, pad)?;
        let c = self.values[probs.0].cols();
        let eps = T::from_f64(smoothing);
        let floor = T::from_f64(1e-12);
        let per = eps / T::from_usize(c);
        let mut total = T::ZERO;
        for (row, &t) in self.values[probs.0].data().chunks(c).zip(targets) {
            if t == pad {
                continue;
            }
            total -= (T::ONE - eps) * row[t as usize].max(floor).ln();
            if smoothing > 0.0 {
                let mut s = T::ZERO;
                row.iter().for_each(|p| s += p.max(floor).ln());
                total -= per * s;
            }
        }
        total /= T::from_usize(count);
        let ng = self.ng(&[probs]);
        let op = Op::CrossEntropyProbs {
            probs,
            targets: targets.to_vec(),
            smoothing: eps,
            count,
            pad,
            floor,
        };
        self.push(Tensor::scalar(total), op, ng)
    }

    /// Inverted dropout with a seeded Bernoulli mask; identity outside training.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.training || p <= 0.0 {
            return Ok(x);
        }
        if p >= 1.0 {
            return Err(Error::invalid("dropout probability must be < 1"));
        }
        let rng = self.dropout_rng.as_mut().ok_or_else(|| Error::invalid("training graph without rng"))?;
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.values[x.0].len())
            .map(|_| if rng.gen::<f64>() < p { T::ZERO } else { keep })
            .collect();
        let out = self.values[x.0].data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, out), Op::Dropout(x, mask), ng)
    }

    /// Reverse sweep from a scalar `loss`. A graph supports one backward pass;
    /// a second call fails with [`Error::BackwardTwice`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads = vec![None; self.values.len()];
        for v in self.param_vars.values() {
            self.grads[v.0] = Some(vec![T::ZERO; self.values[v.0].len()]);
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backprop(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn slot(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.needs_grad[v.0] {
            return None;
        }
        let n = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    /// Takes the grad buffer of `v` out so that other values can be read while
    /// it is written; pair with `put`.
    fn take(&mut self, v: Var) -> Option<Vec<T>> {
        if !self.needs_grad[v.0] {
            return None;
        }
        let n = self.values[v.0].len();
        Some(self.grads[v.0].take().unwrap_or_else(|| vec![T::ZERO; n]))
    }

    fn put(&mut self, v: Var, g: Option<Vec<T>>) {
        if let Some(g) = g {
            self.grads[v.0] = Some(g);
        }
    }

    fn backprop(&mut self, i: usize, g: &[T]) {
        let op = core::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) | Op::Linear(a, b, _) => {
                let (m, k) = (self.values[a.0].rows(), self.values[a.0].cols());
                let n = self.values[b.0].cols();
                if let Some(mut da) = self.take(*a) {
                    matmul_into(g, false, self.values[b.0].data(), true, m, n, k, &mut da, T::ONE);
                    self.put(*a, Some(da));
                }
                if let Some(mut db) = self.take(*b) {
                    matmul_into(self.values[a.0].data(), true, g, false, k, m, n, &mut db, T::ONE);
                    self.put(*b, Some(db));
                }
                if let Op::Linear(_, _, Some(bias)) = &op {
                    if let Some(dbias) = self.slot(*bias) {
                        for row in g.chunks(n) {
                            add_into(dbias, row);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(*a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(*b) {
                    add_into(db, g);
                }
            }
            Op::AddRow(a, r) => {
                if let Some(da) = self.slot(*a) {
                    add_into(da, g);
                }
                if let Some(dr) = self.slot(*r) {
                    let c = dr.len();
                    for row in g.chunks(c) {
                        add_into(dr, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(mut da) = self.take(*a) {
                    for ((d, gg), y) in da.iter_mut().zip(g).zip(self.values[b.0].data()) {
                        *d += *gg * *y;
                    }
                    self.put(*a, Some(da));
                }
                if let Some(mut db) = self.take(*b) {
                    for ((d, gg), x) in db.iter_mut().zip(g).zip(self.values[a.0].data()) {
                        *d += *gg * *x;
                    }
                    self.put(*b, Some(db));
                }
            }
            Op::MulCol(a, s) => {
                let c = self.values[a.0].cols();
                if let Some(mut da) = self.take(*a) {
                    for ((drow, grow), f) in da.chunks_mut(c).zip(g.chunks(c)).zip(self.values[s.0].data()) {
                        for (d, gg) in drow.iter_mut().zip(grow) {
                            *d += *gg * *f;
                        }
                    }
                    self.put(*a, Some(da));
                }
                if let Some(mut ds) = self.take(*s) {
                    for ((d, grow), arow) in ds.iter_mut().zip(g.chunks(c)).zip(self.values[a.0].data().chunks(c)) {
                        let mut acc = T::ZERO;
                        for (gg, x) in grow.iter().zip(arow) {
                            acc += *gg * *x;
                        }
                        *d += acc;
                    }
                    self.put(*s, Some(ds));
                }
            }
            Op::Affine(x, s) => {
                let s = *s;
                if let Some(dx) = self.slot(*x) {
                    for (d, gg) in dx.iter_mut().zip(g) {
                        *d += s * *gg;
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let c = self.values[table.0].cols();
                if let Some(dt) = self.slot(*table) {
                    for (row, &id) in g.chunks(c).zip(ids) {
                        add_into(&mut dt[id as usize * c..(id as usize + 1) * c], row);
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = outer_inner(self.values[i].shape(), *axis);
                if let Some(mut dx) = self.take(*x) {
                    let y = self.values[i].data();
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |t: usize| (o * n + t) * inner + j;
                            let mut dotp = T::ZERO;
                            for t in 0..n {
                                dotp += g[idx(t)] * y[idx(t)];
                            }
                            for t in 0..n {
                                dx[idx(t)] += y[idx(t)] * (g[idx(t)] - dotp);
                            }
                        }
                    }
                    self.put(*x, Some(dx));
                }
            }
            Op::LogSoftmax(x, axis) => {
                let (outer, n, inner) = outer_inner(self.values[i].shape(), *axis);
                if let Some(mut dx) = self.take(*x) {
                    let y = self.values[i].data();
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |t: usize| (o * n + t) * inner + j;
                            let mut gs = T::ZERO;
                            for t in 0..n {
                                gs += g[idx(t)];
                            }
                            for t in 0..n {
                                dx[idx(t)] += g[idx(t)] - y[idx(t)].exp() * gs;
                            }
                        }
                    }
                    self.put(*x, Some(dx));
                }
            }
            Op::LayerNorm { x, affine, xhat, inv_std } => {
                let c = self.values[x.0].cols();
                let n = T::from_usize(c);
                let dxhat: Vec<T> = match affine {
                    Some((gm, _)) => {
                        let gv = self.values[gm.0].data();
                        g.chunks(c).flat_map(|row| row.iter().zip(gv).map(|(a, b)| *a * *b)).collect()
                    }
                    None => g.to_vec(),
                };
                if let Some((gm, bt)) = affine {
                    if let Some(dg) = self.slot(*gm) {
                        for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                            for ((d, a), b) in dg.iter_mut().zip(grow).zip(xrow) {
                                *d += *a * *b;
                            }
                        }
                    }
                    if let Some(db) = self.slot(*bt) {
                        for grow in g.chunks(c) {
                            add_into(db, grow);
                        }
                    }
                }
                if let Some(dx) = self.slot(*x) {
                    for ((drow, dh), (xrow, is)) in dx.chunks_mut(c).zip(dxhat.chunks(c)).zip(xhat.chunks(c).zip(inv_std)) {
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for (a, b) in dh.iter().zip(xrow) {
                            m1 += *a;
                            m2 += *a * *b;
                        }
                        m1 /= n;
                        m2 /= n;
                        for ((d, a), b) in drow.iter_mut().zip(dh).zip(xrow) {
                            *d += *is * (*a - m1 - *b * m2);
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if let Some(mut dx) = self.take(*x) {
                    for ((d, gg), v) in dx.iter_mut().zip(g).zip(self.values[x.0].data()) {
                        if *v > T::ZERO {
                            *d += *gg;
                        }
                    }
                    self.put(*x, Some(dx));
                }
            }
            Op::Sigmoid(x) => {
                if let Some(mut dx) = self.take(*x) {
                    for ((d, gg), y) in dx.iter_mut().zip(g).zip(self.values[i].data()) {
                        *d += *gg * *y * (T::ONE - *y);
                    }
                    self.put(*x, Some(dx));
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = outer_inner(self.values[i].shape(), *axis);
                let mut offset = 0;
                for x in xs {
                    let n = self.shape(*x)[*axis];
                    if let Some(dx) = self.slot(*x) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            add_into(&mut dx[o * n * inner..(o + 1) * n * inner], src);
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice(x, axis, start) => {
                let (outer, n, inner) = outer_inner(self.values[x.0].shape(), *axis);
                let len = self.values[i].shape()[*axis];
                if let Some(dx) = self.slot(*x) {
                    for o in 0..outer {
                        let dst = &mut dx[(o * n + start) * inner..(o * n + start + len) * inner];
                        add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(*x) {
                    add_into(dx, g);
                }
            }
            Op::GatherRows(x, idx) => {
                let c = self.values[x.0].cols();
                if let Some(dx) = self.slot(*x) {
                    for (row, src) in g.chunks(c).zip(idx) {
                        if let Some(s) = *src {
                            add_into(&mut dx[s * c..(s + 1) * c], row);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                let dim = self.values[q.0].cols();
                let mut dprobs = vec![T::ZERO; probs.len()];
                let mut dv = self.take(*v);
                attention::attend_backward(probs, self.values[v.0].data(), g, dim, layout, &mut dprobs, dv.as_deref_mut());
                self.put(*v, dv);
                let mut dq = self.take(*q);
                let mut dk = self.take(*k);
                attention::scores_backward(
                    self.values[q.0].data(),
                    self.values[k.0].data(),
                    probs,
                    &dprobs,
                    dim,
                    layout,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                self.put(*q, dq);
                self.put(*k, dk);
            }
            Op::AttnProbs(q, k, layout) => {
                let dim = self.values[q.0].cols();
                let mut dq = self.take(*q);
                let mut dk = self.take(*k);
                attention::scores_backward(
                    self.values[q.0].data(),
                    self.values[k.0].data(),
                    self.values[i].data(),
                    g,
                    dim,
                    layout,
                    dq.as_deref_mut(),
                    dk.as_deref_mut(),
                );
                self.put(*q, dq);
                self.put(*k, dk);
            }
            Op::AttendValues(p, v, layout) => {
                let dim = self.values[v.0].cols();
                let mut dp = self.take(*p);
                let mut dv = self.take(*v);
                let mut scratch;
                let dprobs = match dp.as_deref_mut() {
                    Some(d) => d,
                    None => {
                        scratch = vec![T::ZERO; self.values[p.0].len()];
                        &mut scratch[..]
                    }
                };
                attention::attend_backward(self.values[p.0].data(), self.values[v.0].data(), g, dim, layout, dprobs, dv.as_deref_mut());
                self.put(*p, dp);
                self.put(*v, dv);
            }
            Op::CopyScatter(alpha, layout, mass) => {
                if let Some(mut da) = self.take(*alpha) {
                    attention::copy_scatter_backward(self.values[i].data(), mass, g, layout, &mut da);
                    self.put(*alpha, Some(da));
                }
            }
            Op::Sum(x) => {
                let gg = g[0];
                if let Some(dx) = self.slot(*x) {
                    dx.iter_mut().for_each(|d| *d += gg);
                }
            }
            Op::Mean(x) => {
                let gg = g[0] / T::from_usize(self.values[x.0].len());
                if let Some(dx) = self.slot(*x) {
                    dx.iter_mut().for_each(|d| *d += gg);
                }
            }
            Op::CrossEntropyLogits { logits, targets, smoothing, count, pad } => {
                let c = self.values[logits.0].cols();
                let scale = g[0] / T::from_usize(*count);
                let uni = *smoothing / T::from_usize(c);
                if let Some(mut dx) = self.take(*logits) {
                    for ((drow, row), &t) in dx.chunks_mut(c).zip(self.values[logits.0].data().chunks(c)).zip(targets) {
                        if t == *pad {
                            continue;
                        }
                        let lse = log_sum_exp(row);
                        for (j, (d, v)) in drow.iter_mut().zip(row).enumerate() {
                            let mut grad = (*v - lse).exp() - uni;
                            if j == t as usize {
                                grad -= T::ONE - *smoothing;
                            }
                            *d += scale * grad;
                        }
                    }
                    self.put(*logits, Some(dx));
                }
            }
            Op::CrossEntropyProbs { probs, targets, smoothing, count, pad, floor } => {
                let c = self.values[probs.0].cols();
                let scale = g[0] / T::from_usize(*count);
                let uni = *smoothing / T::from_usize(c);
                if let Some(mut dp) = self.take(*probs) {
                    for ((drow, row), &t) in dp.chunks_mut(c).zip(self.values[probs.0].data().chunks(c)).zip(targets) {
                        if t == *pad {
                            continue;
                        }
                        for (j, (d, p)) in drow.iter_mut().zip(row).enumerate() {
                            if *p <= *floor {
                                continue;
                            }
                            let mut w = uni;
                            if j == t as usize {
                                w += T::ONE - *smoothing;
                            }
                            if w != T::ZERO {
                                *d -= scale * w / *p;
                            }
                        }
                    }
                    self.put(*probs, Some(dp));
                }
            }
            Op::Dropout(x, mask) => {
                if let Some(dx) = self.slot(*x) {
                    for ((d, gg), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += *gg * *m;
                    }
                }
            }
        }
        self.ops[i] = op;
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = -T::MAX;
    for v in row {
        if *v > max {
            max = *v;
        }
    }
    let mut s = T::ZERO;
    for v in row {
        s += (*v - max).exp();
    }
    max + s.ln()
}

fn softmax_along<T: Scalar>(data: &[T], shape: &[usize], axis: usize, log: bool) -> Vec<T> {
    let (outer, n, inner) = outer_inner(shape, axis);
    let mut out = vec![T::ZERO; data.len()];
    for o in 0..outer {
        for j in 0..inner {
            let idx = |t: usize| (o * n + t) * inner + j;
            let mut max = -T::MAX;
            for t in 0..n {
                if data[idx(t)] > max {
                    max = data[idx(t)];
                }
            }
            let mut z = T::ZERO;
            for t in 0..n {
                z += (data[idx(t)] - max).exp();
            }
            let lz = z.ln();
            for t in 0..n {
                out[idx(t)] = if log {
                    data[idx(t)] - max - lz
                } else {
                    (data[idx(t)] - max).exp() / z
                };
            }
        }
    }
    out
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "param",
        Op::MatMul(..) => "matmul",
        Op::Linear(..) => "linear",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::MulCol(..) => "mul_col",
        Op::Affine(..) => "affine",
        Op::Embedding(..) => "embedding",
        Op::Softmax(..) => "softmax",
        Op::LogSoftmax(..) => "log_softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Concat(..) => "concat",
        Op::Slice(..) => "slice",
        Op::Reshape(_) => "reshape",
        Op::GatherRows(..) => "gather_rows",
        Op::Attention { .. } => "attention",
        Op::AttnProbs(..) => "attention_probs",
        Op::AttendValues(..) => "attend_values",
        Op::CopyScatter(..) => "copy_scatter",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
        Op::CrossEntropyProbs { .. } => "cross_entropy_probs",
        Op::Dropout(..) => "dropout",
    }
}
