//! Fused kernels for batched attention and TM copy scattering.
//!
//! Batched tensors use a padded layout: query row `b * q_len + i` belongs to
//! sequence `b`, key row `b * k_len + j` likewise. Invalid keys are skipped
//! entirely, so a query with no valid key yields an all-zero probability row.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// Query `i` may only see keys `j <= i` (requires `q_len == k_len`).
    pub causal: bool,
    /// One flag per key row (`batch * k_len`).
    pub key_valid: Vec<bool>,
    pub scale: f64,
}

impl AttnLayout {
    pub fn new(batch: usize, q_len: usize, k_len: usize, heads: usize, key_valid: Vec<bool>) -> Self {
        AttnLayout {
            batch,
            q_len,
            k_len,
            heads,
            causal: false,
            key_valid,
            scale: 1.0,
        }
    }

    pub fn causal(mut self) -> Self {
        self.causal = true;
        self
    }

    pub fn scaled(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub(crate) fn validate(&self, q_rows: usize, k_rows: usize, dim: usize) -> Result<()> {
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::invalid(alloc::format!(
                "model dim {dim} not divisible by {} heads",
                self.heads
            )));
        }
        if q_rows != self.batch * self.q_len || k_rows != self.batch * self.k_len {
            return Err(Error::ShapeMismatch {
                op: "attention layout",
                left: vec![q_rows, k_rows],
                right: vec![self.batch * self.q_len, self.batch * self.k_len],
            });
        }
        if self.key_valid.len() != k_rows {
            return Err(Error::ShapeMismatch {
                op: "attention key mask",
                left: vec![self.key_valid.len()],
                right: vec![k_rows],
            });
        }
        if self.causal && self.q_len != self.k_len {
            return Err(Error::invalid("causal attention needs q_len == k_len"));
        }
        Ok(())
    }

    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::ZERO;
    for (x, y) in a.iter().zip(b) {
        s += *x * *y;
    }
    s
}

/// Softmax-normalized scores, laid out `[batch, heads, q_len, k_len]`.
pub(crate) fn attention_probs<T: Scalar>(q: &[T], k: &[T], dim: usize, l: &AttnLayout) -> Vec<T> {
    let dh = dim / l.heads;
    let scale = T::from_f64(l.scale);
    let mut probs = vec![T::ZERO; l.batch * l.heads * l.q_len * l.k_len];
    for b in 0..l.batch {
        for h in 0..l.heads {
            for i in 0..l.q_len {
                let qrow = &q[(b * l.q_len + i) * dim + h * dh..][..dh];
                let base = ((b * l.heads + h) * l.q_len + i) * l.k_len;
                let row = &mut probs[base..base + l.k_len];
                let mut max = -T::MAX;
                let mut any = false;
                for (j, slot) in row.iter_mut().enumerate() {
                    if l.visible(b, i, j) {
                        let krow = &k[(b * l.k_len + j) * dim + h * dh..][..dh];
                        let s = dot(qrow, krow) * scale;
                        *slot = s;
                        if s > max {
                            max = s;
                        }
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let mut z = T::ZERO;
                for (j, slot) in row.iter_mut().enumerate() {
                    if l.visible(b, i, j) {
                        *slot = (*slot - max).exp();
                        z += *slot;
                    }
                }
                for slot in row.iter_mut() {
                    *slot /= z;
                }
            }
        }
    }
    probs
}

/// `out[b, i, head] = sum_j p[b, head, i, j] * v[b, j, head]`.
pub(crate) fn attend<T: Scalar>(probs: &[T], v: &[T], dim: usize, l: &AttnLayout) -> Vec<T> {
    let dh = dim / l.heads;
    let mut out = vec![T::ZERO; l.batch * l.q_len * dim];
    for b in 0..l.batch {
        for h in 0..l.heads {
            for i in 0..l.q_len {
                let prow = &probs[((b * l.heads + h) * l.q_len + i) * l.k_len..][..l.k_len];
                let orow = &mut out[(b * l.q_len + i) * dim + h * dh..][..dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == T::ZERO {
                        continue;
                    }
                    let vrow = &v[(b * l.k_len + j) * dim + h * dh..][..dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    out
}

/// Gradient of `attend` with respect to probabilities and values.
pub(crate) fn attend_backward<T: Scalar>(
    probs: &[T],
    v: &[T],
    g: &[T],
    dim: usize,
    l: &AttnLayout,
    dprobs: &mut [T],
    dv: Option<&mut [T]>,
) {
    let dh = dim / l.heads;
    for b in 0..l.batch {
        for h in 0..l.heads {
            for i in 0..l.q_len {
                let grow = &g[(b * l.q_len + i) * dim + h * dh..][..dh];
                let base = ((b * l.heads + h) * l.q_len + i) * l.k_len;
                for j in 0..l.k_len {
                    if l.visible(b, i, j) {
                        let vrow = &v[(b * l.k_len + j) * dim + h * dh..][..dh];
                        dprobs[base + j] += dot(grow, vrow);
                    }
                }
            }
        }
    }
    if let Some(dv) = dv {
        for b in 0..l.batch {
            for h in 0..l.heads {
                for i in 0..l.q_len {
                    let grow = &g[(b * l.q_len + i) * dim + h * dh..][..dh];
                    let prow = &probs[((b * l.heads + h) * l.q_len + i) * l.k_len..][..l.k_len];
                    for (j, &p) in prow.iter().enumerate() {
                        if p == T::ZERO {
                            continue;
                        }
                        let dvrow = &mut dv[(b * l.k_len + j) * dim + h * dh..][..dh];
                        for (o, &x) in dvrow.iter_mut().zip(grow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
    }
}

/// Back-propagates through the masked softmax of scaled dot products.
#[allow(clippy::too_many_arguments)]
pub(crate) fn scores_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    probs: &[T],
    dprobs: &[T],
    dim: usize,
    l: &AttnLayout,
    mut dq: Option<&mut [T]>,
    mut dk: Option<&mut [T]>,
) {
    let dh = dim / l.heads;
    let scale = T::from_f64(l.scale);
    let mut ds = vec![T::ZERO; l.k_len];
    for b in 0..l.batch {
        for h in 0..l.heads {
            for i in 0..l.q_len {
                let base = ((b * l.heads + h) * l.q_len + i) * l.k_len;
                let prow = &probs[base..base + l.k_len];
                let dprow = &dprobs[base..base + l.k_len];
                let inner = dot(prow, dprow);
                for j in 0..l.k_len {
                    ds[j] = prow[j] * (dprow[j] - inner) * scale;
                }
                let qoff = (b * l.q_len + i) * dim + h * dh;
                if let Some(dq) = dq.as_deref_mut() {
                    let dqrow = &mut dq[qoff..qoff + dh];
                    for j in 0..l.k_len {
                        if ds[j] == T::ZERO {
                            continue;
                        }
                        let krow = &k[(b * l.k_len + j) * dim + h * dh..][..dh];
                        for (o, &x) in dqrow.iter_mut().zip(krow) {
                            *o += ds[j] * x;
                        }
                    }
                }
                if let Some(dk) = dk.as_deref_mut() {
                    let qrow = &q[qoff..qoff + dh];
                    for j in 0..l.k_len {
                        if ds[j] == T::ZERO {
                            continue;
                        }
                        let dkrow = &mut dk[(b * l.k_len + j) * dim + h * dh..][..dh];
                        for (o, &x) in dkrow.iter_mut().zip(qrow) {
                            *o += ds[j] * x;
                        }
                    }
                }
            }
        }
    }
}

/// Which memory positions contribute vocabulary mass to the copy distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyLayout {
    pub batch: usize,
    pub rows_per_batch: usize,
    pub mem_len: usize,
    /// `batch * mem_len` entries; `None` marks positions that receive attention
    /// but are not copy candidates (source side, padding).
    pub tokens: Vec<Option<u32>>,
    pub vocab: usize,
}

/// Scatter-adds attention mass onto vocabulary ids, renormalized over the
/// copyable positions. Returns the output and the per-row copyable mass.
pub(crate) fn copy_scatter<T: Scalar>(alpha: &[T], l: &CopyLayout) -> (Vec<T>, Vec<T>) {
    let rows = l.batch * l.rows_per_batch;
    let mut out = vec![T::ZERO; rows * l.vocab];
    let mut mass = vec![T::ZERO; rows];
    for r in 0..rows {
        let b = r / l.rows_per_batch;
        let arow = &alpha[r * l.mem_len..(r + 1) * l.mem_len];
        let toks = &l.tokens[b * l.mem_len..(b + 1) * l.mem_len];
        let mut s = T::ZERO;
        for (a, t) in arow.iter().zip(toks) {
            if t.is_some() {
                s += *a;
            }
        }
        mass[r] = s;
        if s <= T::ZERO {
            continue;
        }
        let orow = &mut out[r * l.vocab..(r + 1) * l.vocab];
        for (a, t) in arow.iter().zip(toks) {
            if let Some(t) = t {
                orow[*t as usize] += *a / s;
            }
        }
    }
    (out, mass)
}

pub(crate) fn copy_scatter_backward<T: Scalar>(out: &[T], mass: &[T], g: &[T], l: &CopyLayout, dalpha: &mut [T]) {
    let rows = l.batch * l.rows_per_batch;
    for r in 0..rows {
        let s = mass[r];
        if s <= T::ZERO {
            continue;
        }
        let b = r / l.rows_per_batch;
        let grow = &g[r * l.vocab..(r + 1) * l.vocab];
        let inner = dot(grow, &out[r * l.vocab..(r + 1) * l.vocab]);
        let toks = &l.tokens[b * l.mem_len..(b + 1) * l.mem_len];
        let drow = &mut dalpha[r * l.mem_len..(r + 1) * l.mem_len];
        for (d, t) in drow.iter_mut().zip(toks) {
            if let Some(t) = t {
                *d += (grow[*t as usize] - inner) / s;
            }
        }
    }
}
