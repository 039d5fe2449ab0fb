//! Inference over retrieved memories: joint conditioning, a single memory,
//! the average ensemble and the learned weighted ensemble, plus fine-tuning
//! of the weighted ensemble and sequence decoding.

mod decode;
mod finetune;
mod weightnet;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::BOS;
use crate::error::{Error, Result};
use crate::model::{Arch, Batch, MemLayout, MemToken, Memory, Model};

pub use decode::{decode, translate, Hypothesis, Strategy};
pub use finetune::{finetune_weighted, CurvePoint, FinetuneConfig, FinetuneResult};
pub use weightnet::WeightNet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One forward conditioned on all memories jointly.
    Base,
    /// One forward conditioned on the best memory only.
    Single,
    /// Uniform mixture of single-memory predictions.
    Average,
    /// Mixture weighted by the weighting network.
    Weighted,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Base, Mode::Single, Mode::Average, Mode::Weighted];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Base => "base",
            Mode::Single => "single",
            Mode::Average => "average",
            Mode::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s:?} (expected base, single, average or weighted)")))
    }
}

/// Weighted sum of distributions. Bitwise-identical components are merged
/// first (weights added in component order) and group weights normalized, so
/// mixing copies of one distribution returns it unchanged. With several
/// distinct groups the result is renormalized.
pub fn mix(components: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if components.is_empty() || components.len() != weights.len() {
        return Err(Error::invalid(format!(
            "mixture of {} components with {} weights",
            components.len(),
            weights.len()
        )));
    }
    let mut groups: Vec<(usize, f64)> = Vec::new();
    for (k, (c, w)) in components.iter().zip(weights).enumerate() {
        let bits_equal = |j: usize| {
            components[j].len() == c.len() && components[j].iter().zip(c).all(|(a, b)| a.to_bits() == b.to_bits())
        };
        match groups.iter_mut().find(|(j, _)| bits_equal(*j)) {
            Some(g) => g.1 += *w,
            None => groups.push((k, *w)),
        }
    }
    if groups.len() == 1 {
        return Ok(components[groups[0].0].clone());
    }
    let total: f64 = groups.iter().map(|g| g.1).sum();
    if !(total > 0.0) {
        return Err(Error::invalid("mixture weights must have a positive sum"));
    }
    let mut out = vec![0.0; components[0].len()];
    for (j, w) in &groups {
        let w = w / total;
        for (o, p) in out.iter_mut().zip(&components[*j]) {
            *o += w * p;
        }
    }
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// Numerically stable softmax of a score vector.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| libm::exp(s - max)).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Inference-time model (in `f64`) with an optional weighting network.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub model: Model<f64>,
    pub weightnet: Option<WeightNet<f64>>,
}

#[derive(Debug, Clone)]
struct Context {
    enc: Tensor<f64>,
    batch: Batch,
}

#[derive(Debug, Clone)]
struct EncodedMemory {
    enc: Tensor<f64>,
    tokens: Vec<MemToken>,
}

/// Per-sentence state shared by every decoding step.
#[derive(Debug, Clone)]
pub struct Prepared {
    mode: Mode,
    /// Context for joint conditioning (and the plain source).
    base: Context,
    /// Single-memory contexts (single-encoder models only).
    per_memory: Vec<Context>,
    memories: Vec<EncodedMemory>,
    n_memories: usize,
}

/// Next-token output of one step, per requested decoder row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOut {
    pub dist: Vec<f64>,
    /// Mixture weights (average and weighted modes).
    pub weights: Option<Vec<f64>>,
}

impl Predictor {
    pub fn new(model: Model<f64>, weightnet: Option<WeightNet<f64>>) -> Result<Self> {
        if let Some(w) = &weightnet {
            w.check_dim(model.config.d_model)?;
        }
        Ok(Predictor { model, weightnet })
    }

    fn context(&self, source: &[u32], memories: &[Memory]) -> Result<Context> {
        let ex = crate::model::Example {
            source: source.to_vec(),
            memories: if self.model.config.arch == Arch::SingleEnc {
                memories.to_vec()
            } else {
                Vec::new()
            },
            target: Vec::new(),
        };
        let batch = Batch::new(&self.model.config, &[&ex])?;
        let mut g = Graph::new();
        let enc = self.model.encode_source(&mut g, &batch)?;
        Ok(Context {
            enc: g.value(enc).clone(),
            batch,
        })
    }

    /// Encodes the source (and memories) once for all decoding steps.
    pub fn prepare(&self, mode: Mode, source: &[u32], memories: &[Memory]) -> Result<Prepared> {
        let memories: Vec<Memory> = match mode {
            Mode::Single => memories.iter().take(1).cloned().collect(),
            _ => memories.to_vec(),
        };
        if matches!(mode, Mode::Average | Mode::Weighted) && memories.is_empty() {
            return Err(Error::invalid(
                "ensemble modes need at least one memory; use the base mode without memories instead",
            ));
        }
        if mode == Mode::Weighted {
            if self.model.config.arch != Arch::DualEnc {
                return Err(Error::invalid("the weighted ensemble needs a dual_enc checkpoint"));
            }
            if self.weightnet.is_none() {
                return Err(Error::invalid("the weighted ensemble needs a weighting network"));
            }
        }
        let arch = self.model.config.arch;
        let ensemble = matches!(mode, Mode::Average | Mode::Weighted);
        let base = self.context(source, if ensemble { &[] } else { &memories })?;
        let per_memory = if arch == Arch::SingleEnc && ensemble {
            memories
                .iter()
                .map(|m| self.context(source, core::slice::from_ref(m)))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let encoded = if arch == Arch::DualEnc {
            memories
                .iter()
                .map(|m| {
                    let mb = crate::model::MemBatch::new(&[m], self.model.config.max_len)?;
                    let mut g = Graph::new();
                    let enc = self.model.encode_memories(&mut g, &mb)?;
                    Ok(EncodedMemory {
                        enc: g.value(enc).clone(),
                        tokens: mb.tokens[0].clone(),
                    })
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(Prepared {
            mode,
            base,
            per_memory,
            memories: encoded,
            n_memories: memories.len(),
        })
    }

    /// Decoder states for `[BOS] + prefix`, restricted to `rows`.
    fn states(&self, g: &mut Graph<f64>, ctx: &Context, prefix: &[u32], rows: &[usize]) -> Result<Var> {
        let mut batch = ctx.batch.clone();
        batch.tgt_len = prefix.len() + 1;
        batch.dec_in = core::iter::once(BOS).chain(prefix.iter().copied()).collect();
        batch.dec_out = vec![crate::corpus::PAD; batch.tgt_len];
        let enc = g.constant(ctx.enc.clone());
        let h = self.model.decode(g, &batch, enc)?;
        let sel: Vec<Option<usize>> = rows.iter().map(|r| Some(*r)).collect();
        g.gather_rows(h, &sel)
    }

    fn plain(&self, g: &mut Graph<f64>, h: Var) -> Result<Var> {
        let logits = self.model.logits(g, h)?;
        g.softmax(logits, 1)
    }

    /// Copy head for memories `which` (jointly), or the plain softmax if empty.
    fn with_memories(&self, g: &mut Graph<f64>, h: Var, rows: usize, p: &Prepared, which: &[usize]) -> Result<(Var, Option<Var>)> {
        if which.is_empty() {
            return Ok((self.plain(g, h)?, None));
        }
        let d = self.model.config.d_model;
        let mut data = Vec::new();
        let mut tokens = Vec::new();
        let mut offset = 0;
        for &k in which {
            let m = &p.memories[k];
            data.extend_from_slice(m.enc.data());
            tokens.extend(m.tokens.iter().map(|t| MemToken { row: t.row + offset, ..*t }));
            offset += m.enc.rows();
        }
        let mem = g.constant(Tensor::new(vec![offset, d], data)?);
        let layout = MemLayout { groups: vec![tokens] };
        let out = self.model.tm_head(g, h, rows, mem, &layout)?;
        Ok((out.probs, Some(out.h_tz)))
    }

    /// Next-token distributions after `prefix` for decoder rows `rows`
    /// (row `t` predicts the token following `prefix[..t]`).
    pub fn step_rows(&self, p: &Prepared, prefix: &[u32], rows: &[usize]) -> Result<Vec<StepOut>> {
        let v = self.model.config.vocab_size;
        let n = rows.len();
        let to_rows = |g: &Graph<f64>, var: Var| -> Vec<Vec<f64>> { g.value(var).data().chunks(v).map(<[f64]>::to_vec).collect() };
        let arch = self.model.config.arch;
        let mut g = Graph::new();
        match p.mode {
            Mode::Base | Mode::Single => {
                let h = self.states(&mut g, &p.base, prefix, rows)?;
                let probs = if arch == Arch::DualEnc {
                    let all: Vec<usize> = (0..p.n_memories).collect();
                    self.with_memories(&mut g, h, n, p, &all)?.0
                } else {
                    self.plain(&mut g, h)?
                };
                Ok(to_rows(&g, probs)
                    .into_iter()
                    .map(|dist| StepOut { dist, weights: None })
                    .collect())
            }
            Mode::Average | Mode::Weighted => {
                let k = p.n_memories;
                let mut comps: Vec<Vec<Vec<f64>>> = Vec::with_capacity(k);
                let mut contexts = Vec::with_capacity(k);
                let h = if arch == Arch::DualEnc || arch == Arch::Vanilla {
                    Some(self.states(&mut g, &p.base, prefix, rows)?)
                } else {
                    None
                };
                for i in 0..k {
                    let (probs, h_tz) = match (arch, h) {
                        (Arch::DualEnc, Some(h)) => self.with_memories(&mut g, h, n, p, &[i])?,
                        (Arch::Vanilla, Some(h)) => (self.plain(&mut g, h)?, None),
                        _ => {
                            let hk = self.states(&mut g, &p.per_memory[i], prefix, rows)?;
                            (self.plain(&mut g, hk)?, None)
                        }
                    };
                    comps.push(to_rows(&g, probs));
                    contexts.push(h_tz);
                }
                let weights: Vec<Vec<f64>> = if p.mode == Mode::Weighted {
                    let net = self.weightnet.as_ref().expect("checked in prepare");
                    let h = h.expect("dual encoder");
                    let mut per_k = Vec::with_capacity(k);
                    for c in &contexts {
                        let s = net.scores(&mut g, h, c.expect("dual encoder"))?;
                        per_k.push(g.value(s).data().to_vec());
                    }
                    (0..n).map(|r| softmax(&per_k.iter().map(|s| s[r]).collect::<Vec<_>>())).collect()
                } else {
                    vec![vec![1.0 / k as f64; k]; n]
                };
                (0..n)
                    .map(|r| {
                        let parts: Vec<Vec<f64>> = comps.iter().map(|c| c[r].clone()).collect();
                        Ok(StepOut {
                            dist: mix(&parts, &weights[r])?,
                            weights: Some(weights[r].clone()),
                        })
                    })
                    .collect()
            }
        }
    }

    /// Distribution of the token following `prefix`.
    pub fn step(&self, p: &Prepared, prefix: &[u32]) -> Result<Vec<f64>> {
        Ok(self.step_rows(p, prefix, &[prefix.len()])?.remove(0).dist)
    }

    /// Teacher-forced distributions for every position of `target` plus EOS.
    pub fn score_rows(&self, p: &Prepared, target: &[u32]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<usize> = (0..=target.len()).collect();
        Ok(self.step_rows(p, target, &rows)?.into_iter().map(|s| s.dist).collect())
    }

    /// Convenience wrapper: the step distribution for one source, memory set and prefix.
    pub fn predict(&self, mode: Mode, source: &[u32], memories: &[Memory], prefix: &[u32]) -> Result<Vec<f64>> {
        let p = self.prepare(mode, source, memories)?;
        self.step(&p, prefix)
    }
}

#[cfg(test)]
mod tests;
