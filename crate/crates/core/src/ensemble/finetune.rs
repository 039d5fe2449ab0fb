use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::WeightNet;
use crate::autodiff::{clip_grad_norm, Adam, AdamConfig, Graph, InverseSqrtSchedule, Tensor, Var};
use crate::corpus::{ParallelCorpus, PAD};
use crate::error::{Error, Result};
use crate::model::{memories_for, Arch, Batch, Checkpoint, Example, MemLayout, Model};
use crate::num::Scalar;
use crate::retrieval::RetrievalIndex;
use crate::rng;

/// Smallest validation corpus that can be split 90/10.
pub const MIN_VALID_PAIRS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub updates: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub eval_every: usize,
    /// Memories retrieved per pair.
    pub k: usize,
    pub label_smoothing: f64,
    pub clip_norm: Option<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            updates: 2000,
            batch_size: 32,
            lr: 1e-4,
            warmup: 100,
            eval_every: 100,
            k: 5,
            label_smoothing: 0.1,
            clip_norm: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub update: usize,
    /// Token cross entropy of the weighted ensemble on the held-out part.
    pub heldout_loss: f64,
    /// Mean training loss since the previous point.
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub checkpoint: Checkpoint,
    pub weightnet: WeightNet<f32>,
    pub curve: Vec<CurvePoint>,
    pub best_update: usize,
}

/// Mixture loss of the weighted ensemble over a batch; components laid out
/// `(k, b, t)`. Examples with fewer memories get masked components.
pub(crate) fn weighted_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    net: &WeightNet<T>,
    examples: &[&Example],
    smoothing: f64,
) -> Result<Var> {
    let batch = Batch::new(&model.config, examples)?;
    let enc = model.encode_source(g, &batch)?;
    let h = model.decode(g, &batch, enc)?;
    let (b, lt, v) = (batch.size, batch.tgt_len, model.config.vocab_size);
    let k = examples.iter().map(|e| e.memories.len()).max().unwrap_or(0);
    let (mb, _) = batch.mem.as_ref().ok_or_else(|| Error::invalid("weighted fine-tuning needs dual_enc"))?;
    if k == 0 {
        let logits = model.logits(g, h)?;
        let p = g.softmax(logits, 1)?;
        return g.cross_entropy_probs(p, &batch.dec_out, smoothing, PAD);
    }
    let mut first = Vec::with_capacity(b);
    let mut next = 0;
    for e in examples {
        first.push(next);
        next += e.memories.len();
    }
    let mut groups = Vec::with_capacity(k * b);
    let mut rows = Vec::with_capacity(k * b * lt);
    let mut mask = Vec::with_capacity(k * b * lt);
    for ki in 0..k {
        for (bi, e) in examples.iter().enumerate() {
            let present = ki < e.memories.len();
            groups.push(if present { mb.tokens[first[bi] + ki].clone() } else { Vec::new() });
            for t in 0..lt {
                rows.push(Some(bi * lt + t));
                mask.push(if present { T::ZERO } else { T::from_f64(-1e9) });
            }
        }
    }
    let mem = model.encode_memories(g, mb)?;
    let h_rep = g.gather_rows(h, &rows)?;
    let tm = model.tm_head(g, h_rep, lt, mem, &MemLayout { groups })?;
    let scores = net.scores(g, h_rep, tm.h_tz)?;
    let mask = g.constant(Tensor::from_parts(vec![k * b * lt, 1], mask));
    let scores = g.add(scores, mask)?;
    let scores = g.reshape(scores, &[k, b * lt])?;
    let w = g.softmax(scores, 0)?;
    let w = g.reshape(w, &[k * b * lt])?;
    let weighted = g.mul_col(tm.probs, w)?;
    let weighted = g.reshape(weighted, &[k, b * lt * v])?;
    let mut total = g.slice(weighted, 0, 0, 1)?;
    for ki in 1..k {
        let part = g.slice(weighted, 0, ki, 1)?;
        total = g.add(total, part)?;
    }
    let p = g.reshape(total, &[b * lt, v])?;
    g.cross_entropy_probs(p, &batch.dec_out, smoothing, PAD)
}

fn heldout_loss(model: &Model<f32>, net: &WeightNet<f32>, held: &[Example], batch_size: usize) -> Result<f64> {
    let model = model.cast::<f64>();
    let net = net.cast::<f64>();
    let mut sum = 0.0;
    let mut tokens = 0usize;
    for chunk in held.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let n: usize = chunk.iter().map(|e| e.target.len() + 1).sum();
        let mut g = Graph::new();
        let loss = weighted_loss(&mut g, &model, &net, &refs, 0.0)?;
        sum += g.value(loss).item() * n as f64;
        tokens += n;
    }
    Ok(sum / tokens as f64)
}

/// Fine-tunes a single-memory checkpoint together with a fresh weighting
/// network on 90% of `valid` (seeded split); the checkpoint with the lowest
/// held-out loss on the other 10%, update 0 included, is returned.
pub fn finetune_weighted(
    ckpt: &Checkpoint,
    valid: &ParallelCorpus,
    index: &RetrievalIndex,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneResult> {
    if ckpt.model.config.arch != Arch::DualEnc {
        return Err(Error::invalid("weighted fine-tuning needs a dual_enc checkpoint"));
    }
    if valid.len() < MIN_VALID_PAIRS {
        return Err(Error::invalid(alloc::format!(
            "validation corpus has {} pairs; at least {MIN_VALID_PAIRS} are needed",
            valid.len()
        )));
    }
    if cfg.batch_size == 0 || cfg.k == 0 {
        return Err(Error::invalid("batch_size and k must be at least 1"));
    }
    let mut examples = Vec::with_capacity(valid.len());
    for p in valid.pairs() {
        examples.push(Example {
            source: p.source.0.clone(),
            memories: memories_for(index, &p.source, cfg.k, None)?,
            target: p.target.0.clone(),
        });
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng::substream(seed, "split"));
    let n_held = (examples.len() / 10).max(1);
    let held: Vec<Example> = order[..n_held].iter().map(|&i| examples[i].clone()).collect();
    let train: Vec<Example> = order[n_held..].iter().map(|&i| examples[i].clone()).collect();

    let mut model = ckpt.model.clone();
    let mut net = WeightNet::<f32>::init(model.config.d_model, seed);
    let mut adam_model = Adam::new(AdamConfig::default());
    let mut adam_net = Adam::new(AdamConfig::default());
    let schedule = InverseSqrtSchedule {
        base: cfg.lr,
        warmup: cfg.warmup,
    };
    let mut order_rng = rng::substream(seed, "batches");
    let mut dropout_rng = Some(rng::substream(seed, "dropout"));

    let start = heldout_loss(&model, &net, &held, cfg.batch_size)?;
    let mut curve = vec![CurvePoint {
        update: 0,
        heldout_loss: start,
        train_loss: None,
    }];
    let mut best = (start, 0usize, model.clone(), net.clone());
    let mut queue: Vec<usize> = Vec::new();
    let (mut run_sum, mut run_n) = (0.0, 0usize);
    for update in 1..=cfg.updates {
        if queue.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut order_rng);
            queue.extend(fresh);
        }
        let ids: Vec<usize> = queue.drain(..cfg.batch_size.min(queue.len())).collect();
        let refs: Vec<&Example> = ids.iter().map(|&i| &train[i]).collect();
        let mut g = Graph::training(dropout_rng.take().expect("rng returned after each step"));
        let loss = weighted_loss(&mut g, &model, &net, &refs, cfg.label_smoothing)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite("fine-tuning loss"));
        }
        g.backward(loss)?;
        model.params.zero_grads();
        model.params.accumulate_grads(&g);
        net.params.zero_grads();
        net.params.accumulate_grads(&g);
        dropout_rng = g.into_rng();
        if let Some(c) = cfg.clip_norm {
            clip_grad_norm(&mut model.params, c);
            clip_grad_norm(&mut net.params, c);
        }
        let lr = schedule.lr(update as u64);
        adam_model.step(&mut model.params, lr)?;
        adam_net.step(&mut net.params, lr)?;
        run_sum += value;
        run_n += 1;
        if update % cfg.eval_every.max(1) == 0 || update == cfg.updates {
            let h = heldout_loss(&model, &net, &held, cfg.batch_size)?;
            curve.push(CurvePoint {
                update,
                heldout_loss: h,
                train_loss: Some(run_sum / run_n as f64),
            });
            (run_sum, run_n) = (0.0, 0);
            if h < best.0 {
                best = (h, update, model.clone(), net.clone());
            }
        }
    }
    let (_, best_update, model, weightnet) = best;
    Ok(FinetuneResult {
        checkpoint: Checkpoint {
            model,
            vocab_fingerprint: ckpt.vocab_fingerprint,
            retrieval: ckpt.retrieval,
            steps: ckpt.steps + best_update as u64,
        },
        weightnet,
        curve,
        best_update,
    })
}
