use alloc::vec;
use alloc::vec::Vec;

use super::batch::{Batch, MemBatch, MemLayout};
use super::{Arch, AttnIds, LayerIds, Model};
use crate::autodiff::{AttnLayout, CopyLayout, Graph, Tensor, Var};
use crate::corpus::PAD;
use crate::error::{Error, Result};
use crate::num::Scalar;

/// Everything the dual-encoder TM head computes for a block of decoder rows.
#[derive(Debug, Clone, Copy)]
pub struct TmOut {
    /// Final next-token distribution `(1 - lambda) P_nmt + lambda P_tm`.
    pub probs: Var,
    pub p_nmt: Var,
    pub p_tm: Var,
    /// Attention over memory tokens, `[rows, max_keys]`.
    pub alpha: Var,
    /// Contextualized memory representation `H_{t,Z}`.
    pub h_tz: Var,
    /// Gate per row, forced to zero for rows without copyable memory tokens.
    pub lambda: Var,
}

/// Mixes two distributions row-wise with gate `lambda` (`[rows]` or `[rows, 1]`).
pub fn gate_and_mix<T: Scalar>(g: &mut Graph<T>, lambda: Var, p_nmt: Var, p_tm: Var) -> Result<Var> {
    let keep = g.affine(lambda, -1.0, 1.0)?;
    let a = g.mul_col(p_nmt, keep)?;
    let b = g.mul_col(p_tm, lambda)?;
    g.add(a, b)
}

impl<T: Scalar> Model<T> {
    fn p(&self, g: &mut Graph<T>, id: crate::autodiff::ParamId) -> Var {
        g.param(&self.params, id)
    }

    fn ln(&self, g: &mut Graph<T>, x: Var, ids: (crate::autodiff::ParamId, crate::autodiff::ParamId)) -> Result<Var> {
        let gamma = self.p(g, ids.0);
        let beta = self.p(g, ids.1);
        g.layer_norm(x, Some((gamma, beta)))
    }

    fn positional(&self, positions: &[usize]) -> Result<Tensor<T>> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(positions.len() * d);
        for &p in positions {
            if p >= self.config.max_len {
                return Err(Error::TooLong {
                    what: "position",
                    len: p + 1,
                    max: self.config.max_len,
                });
            }
            data.extend(self.positions[p * d..(p + 1) * d].iter().map(|v| T::from_f64(*v)));
        }
        Ok(Tensor::from_parts(vec![positions.len(), d], data))
    }

    /// Scaled token embeddings plus sinusoidal positions (and segments).
    fn embed(&self, g: &mut Graph<T>, ids: &[u32], positions: &[usize], segments: Option<&[usize]>) -> Result<Var> {
        let table = self.p(g, self.w.embed);
        let e = g.embedding(table, ids)?;
        let e = g.scale(e, libm::sqrt(self.config.d_model as f64))?;
        let pos = g.constant(self.positional(positions)?);
        let mut x = g.add(e, pos)?;
        if let Some(seg) = segments {
            let tm = self.w.tm.as_ref().ok_or_else(|| Error::invalid("segments need a dual encoder"))?;
            let table = self.p(g, tm.segment);
            let rows: Vec<Option<usize>> = seg.iter().map(|s| Some(*s)).collect();
            let s = g.gather_rows(table, &rows)?;
            x = g.add(x, s)?;
        }
        g.dropout(x, self.config.dropout)
    }

    fn attend(&self, g: &mut Graph<T>, x: Var, mem: Var, ids: &AttnIds, layout: &AttnLayout) -> Result<Var> {
        let d = self.config.d_model;
        let (wq, bq, wkv, bkv, wo, bo) = (
            self.p(g, ids.q),
            self.p(g, ids.bq),
            self.p(g, ids.kv),
            self.p(g, ids.bkv),
            self.p(g, ids.o),
            self.p(g, ids.bo),
        );
        let q = g.linear(x, wq, Some(bq))?;
        let kv = g.linear(mem, wkv, Some(bkv))?;
        let k = g.slice(kv, 1, 0, d)?;
        let v = g.slice(kv, 1, d, d)?;
        let scale = 1.0 / libm::sqrt((d / self.config.n_heads) as f64);
        let a = g.attention(q, k, v, &layout.clone().scaled(scale))?;
        g.linear(a, wo, Some(bo))
    }

    fn block(
        &self,
        g: &mut Graph<T>,
        x: Var,
        layer: &LayerIds,
        self_layout: &AttnLayout,
        cross: Option<(Var, &AttnLayout)>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let h = self.ln(g, x, layer.ln1)?;
        let a = self.attend(g, h, h, &layer.self_attn, self_layout)?;
        let a = g.dropout(a, p)?;
        let mut x = g.add(x, a)?;
        if let (Some((enc, layout)), Some(ids), Some(ln)) = (cross, &layer.cross_attn, layer.ln_cross) {
            let h = self.ln(g, x, ln)?;
            let c = self.attend(g, h, enc, ids, layout)?;
            let c = g.dropout(c, p)?;
            x = g.add(x, c)?;
        }
        let h = self.ln(g, x, layer.ln2)?;
        let (w1, b1) = (self.p(g, layer.ff1.0), self.p(g, layer.ff1.1));
        let (w2, b2) = (self.p(g, layer.ff2.0), self.p(g, layer.ff2.1));
        let f = g.linear(h, w1, Some(b1))?;
        let f = g.relu(f)?;
        let f = g.linear(f, w2, Some(b2))?;
        let f = g.dropout(f, p)?;
        g.add(x, f)
    }

    /// Source encoder output, `[size * src_len, d]`.
    pub fn encode_source(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Var> {
        let positions: Vec<usize> = (0..batch.size * batch.src_len).map(|r| r % batch.src_len).collect();
        let mut x = self.embed(g, &batch.src_ids, &positions, None)?;
        let layout = AttnLayout::new(batch.size, batch.src_len, batch.src_len, self.config.n_heads, batch.src_valid.clone());
        for layer in &self.w.src {
            x = self.block(g, x, layer, &layout, None)?;
        }
        self.ln(g, x, self.w.src_ln)
    }

    /// Memory encoder output, `[count * len, d]`.
    pub fn encode_memories(&self, g: &mut Graph<T>, mb: &MemBatch) -> Result<Var> {
        let ln = self.w.mem_ln.ok_or_else(|| Error::invalid("model has no memory encoder"))?;
        let mut x = self.embed(g, &mb.ids, &mb.positions, Some(&mb.segments))?;
        let layout = AttnLayout::new(mb.count, mb.len, mb.len, self.config.n_heads, mb.valid.clone());
        for layer in &self.w.mem {
            x = self.block(g, x, layer, &layout, None)?;
        }
        self.ln(g, x, ln)
    }

    /// Decoder states `H_t`, `[size * tgt_len, d]`.
    pub fn decode(&self, g: &mut Graph<T>, batch: &Batch, enc: Var) -> Result<Var> {
        let positions: Vec<usize> = (0..batch.size * batch.tgt_len).map(|r| r % batch.tgt_len).collect();
        let mut x = self.embed(g, &batch.dec_in, &positions, None)?;
        let dec_valid = vec![true; batch.size * batch.tgt_len];
        let self_layout = AttnLayout::new(batch.size, batch.tgt_len, batch.tgt_len, self.config.n_heads, dec_valid).causal();
        let cross = AttnLayout::new(batch.size, batch.tgt_len, batch.src_len, self.config.n_heads, batch.src_valid.clone());
        for layer in &self.w.dec {
            x = self.block(g, x, layer, &self_layout, Some((enc, &cross)))?;
        }
        self.ln(g, x, self.w.dec_ln)
    }

    /// Output-layer logits for decoder states.
    pub fn logits(&self, g: &mut Graph<T>, h: Var) -> Result<Var> {
        let (w, b) = (self.p(g, self.w.out_w), self.p(g, self.w.out_b));
        g.linear(h, w, Some(b))
    }

    /// Copy attention, TM context, gate and final mixture for decoder rows
    /// `h` (`groups * rows_per_group` rows, group-major) against encoded
    /// memories `mem`.
    pub fn tm_head(&self, g: &mut Graph<T>, h: Var, rows_per_group: usize, mem: Var, layout: &MemLayout) -> Result<TmOut> {
        let tm = self.w.tm.as_ref().ok_or_else(|| Error::invalid("model has no TM head"))?;
        let groups = layout.groups.len();
        let keys = layout.max_keys().max(1);
        let logits = self.logits(g, h)?;
        let p_nmt = g.softmax(logits, 1)?;
        let mut idx = vec![None; groups * keys];
        let mut valid = vec![false; groups * keys];
        let mut tokens = vec![None; groups * keys];
        let mut gate_mask = Vec::with_capacity(groups * rows_per_group);
        for (gi, toks) in layout.groups.iter().enumerate() {
            for (j, t) in toks.iter().enumerate() {
                idx[gi * keys + j] = Some(t.row);
                valid[gi * keys + j] = true;
                tokens[gi * keys + j] = t.target_side.then_some(t.token);
            }
            let copyable = toks.iter().any(|t| t.target_side);
            gate_mask.extend(core::iter::repeat(if copyable { T::ONE } else { T::ZERO }).take(rows_per_group));
        }
        let z = g.gather_rows(mem, &idx)?;
        let w_tm = self.p(g, tm.w_tm);
        let q = g.matmul(h, w_tm)?;
        let attn = AttnLayout::new(groups, rows_per_group, keys, 1, valid);
        let alpha = g.attention_probs(q, z, &attn)?;
        let ctx = g.attend_values(alpha, z, &attn)?;
        let w_h = self.p(g, tm.w_h);
        let h_tz = g.matmul(ctx, w_h)?;
        let copy = CopyLayout {
            batch: groups,
            rows_per_batch: rows_per_group,
            mem_len: keys,
            tokens,
            vocab: self.config.vocab_size,
        };
        let p_tm = g.copy_scatter(alpha, &copy)?;
        let (gw, gb) = (self.p(g, tm.gate_w), self.p(g, tm.gate_b));
        let gate = g.linear(h_tz, gw, Some(gb))?;
        let gate = g.sigmoid(gate)?;
        let mask = g.constant(Tensor::from_parts(vec![groups * rows_per_group, 1], gate_mask));
        let lambda = g.mul(gate, mask)?;
        let probs = gate_and_mix(g, lambda, p_nmt, p_tm)?;
        Ok(TmOut {
            probs,
            p_nmt,
            p_tm,
            alpha,
            h_tz,
            lambda,
        })
    }

    /// Teacher-forced output for every decoder row: logits for `vanilla` and
    /// `single_enc`, probabilities for `dual_enc`.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Output> {
        let enc = self.encode_source(g, batch)?;
        let h = self.decode(g, batch, enc)?;
        match (self.config.arch, &batch.mem) {
            (Arch::DualEnc, Some((mb, layout))) if mb.count > 0 => {
                let mem = self.encode_memories(g, mb)?;
                let out = self.tm_head(g, h, batch.tgt_len, mem, layout)?;
                Ok(Output::Probs(out.probs))
            }
            (Arch::DualEnc, _) => {
                let logits = self.logits(g, h)?;
                Ok(Output::Probs(g.softmax(logits, 1)?))
            }
            _ => Ok(Output::Logits(self.logits(g, h)?)),
        }
    }

    /// Mean label-smoothed token cross entropy of a batch.
    pub fn loss(&self, g: &mut Graph<T>, batch: &Batch, smoothing: f64) -> Result<Var> {
        match self.forward(g, batch)? {
            Output::Logits(l) => g.cross_entropy_logits(l, &batch.dec_out, smoothing, PAD),
            Output::Probs(p) => g.cross_entropy_probs(p, &batch.dec_out, smoothing, PAD),
        }
    }

    /// Next-token distributions for every decoder row, as plain vectors.
    pub fn distributions(&self, batch: &Batch) -> Result<Vec<Vec<T>>> {
        let mut g = Graph::new();
        let out = match self.forward(&mut g, batch)? {
            Output::Logits(l) => g.softmax(l, 1)?,
            Output::Probs(p) => p,
        };
        Ok(g.value(out).data().chunks(self.config.vocab_size).map(<[T]>::to_vec).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Output {
    Logits(Var),
    Probs(Var),
}
