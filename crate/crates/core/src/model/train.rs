use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::batch::Batch;
use super::{Example, Memory, Model, ModelConfig};
use crate::autodiff::{clip_grad_norm, Adam, AdamConfig, Graph, InverseSqrtSchedule};
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::retrieval::{Exclusion, RetrievalIndex};
use crate::rng;

/// Number of ranked memories cycled through by [`TrainMode::SingleMulti`].
pub const SINGLE_MULTI_RANKS: usize = 5;

/// How memories are attached to training pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// No memories.
    None,
    /// The top `k` memories, jointly.
    Topk(usize),
    /// Each pair once per rank `1..=5` with that single memory, and once with
    /// no memory: six presentations per epoch.
    SingleMulti,
}

impl TrainMode {
    /// Training presentations per pair and epoch.
    pub fn passes(self) -> usize {
        match self {
            TrainMode::SingleMulti => SINGLE_MULTI_RANKS + 1,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSettings {
    pub mode: TrainMode,
    pub self_exclusion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Sentences per batch.
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: u64,
    pub label_smoothing: f64,
    pub clip_norm: Option<f64>,
    pub mode: TrainMode,
    pub self_exclusion: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 7e-4,
            warmup: 400,
            label_smoothing: 0.1,
            clip_norm: Some(1.0),
            mode: TrainMode::None,
            self_exclusion: true,
        }
    }
}

/// A trained model with the context needed to use it safely.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub vocab_fingerprint: u64,
    pub retrieval: RetrievalSettings,
    pub steps: u64,
}

impl Checkpoint {
    pub fn check_vocab(&self, fingerprint: u64) -> Result<()> {
        if fingerprint != self.vocab_fingerprint {
            return Err(Error::VocabMismatch {
                expected: self.vocab_fingerprint,
                found: fingerprint,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Token-weighted mean training loss.
    pub loss: f64,
    pub examples: usize,
    pub steps: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Top-`k` memories for `source`, excluding the pair itself when
/// `exclude_self` names it.
pub fn memories_for(index: &RetrievalIndex, source: &[u32], k: usize, exclude_self: Option<u32>) -> Result<Vec<Memory>> {
    let exclusion = exclude_self.map(Exclusion::own).unwrap_or(Exclusion::NONE);
    Ok(index.retrieve_topk(source, k, exclusion)?.iter().map(Memory::from).collect())
}

fn expand(corpus: &ParallelCorpus, index: Option<&RetrievalIndex>, tc: &TrainConfig) -> Result<Vec<Example>> {
    let need = match tc.mode {
        TrainMode::None => 0,
        TrainMode::Topk(k) => k,
        TrainMode::SingleMulti => SINGLE_MULTI_RANKS,
    };
    let mut out = Vec::with_capacity(corpus.len() * tc.mode.passes());
    for p in corpus.pairs() {
        let mems = if need == 0 {
            Vec::new()
        } else {
            let index = index.ok_or_else(|| Error::invalid("this training mode needs a retrieval index"))?;
            memories_for(index, &p.source, need, tc.self_exclusion.then_some(p.pair_id))?
        };
        let ex = |memories: Vec<Memory>| Example {
            source: p.source.0.clone(),
            memories,
            target: p.target.0.clone(),
        };
        match tc.mode {
            TrainMode::SingleMulti => {
                for r in 0..SINGLE_MULTI_RANKS {
                    out.push(ex(mems.get(r).cloned().into_iter().collect()));
                }
                out.push(ex(Vec::new()));
            }
            _ => out.push(ex(mems)),
        }
    }
    Ok(out)
}

/// Teacher-forced training with Adam and an inverse square-root schedule.
///
/// Retrieval for training pairs happens once up front. All randomness comes
/// from named substreams of `seed`.
pub fn train(
    config: ModelConfig,
    corpus: &ParallelCorpus,
    vocab_fingerprint: u64,
    index: Option<&RetrievalIndex>,
    tc: &TrainConfig,
    seed: u64,
) -> Result<(Checkpoint, TrainLog)> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if tc.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if let Some(max) = corpus.max_token() {
        if max as usize >= config.vocab_len() {
            return Err(Error::TokenOutOfRange {
                id: max,
                size: config.vocab_len(),
            });
        }
    }
    let examples = expand(corpus, index, tc)?;
    let mut model = Model::<f32>::init(config, seed)?;
    let mut adam = Adam::new(AdamConfig::default());
    let schedule = InverseSqrtSchedule {
        base: tc.lr,
        warmup: tc.warmup,
    };
    let mut order_rng = rng::substream(seed, "batches");
    let mut dropout_rng = Some(rng::substream(seed, "dropout"));
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..tc.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut tokens = 0usize;
        for chunk in order.chunks(tc.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = Batch::new(&model.config, &refs)?;
            let mut g = Graph::training(dropout_rng.take().expect("rng is returned after every step"));
            let loss = model.loss(&mut g, &batch, tc.label_smoothing)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            g.backward(loss)?;
            model.params.zero_grads();
            model.params.accumulate_grads(&g);
            dropout_rng = g.into_rng();
            if let Some(c) = tc.clip_norm {
                clip_grad_norm(&mut model.params, c);
            }
            adam.step(&mut model.params, schedule.lr(adam.steps() + 1))?;
            let n = batch.target_tokens();
            loss_sum += value * n as f64;
            tokens += n;
        }
        log.epochs.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / tokens.max(1) as f64,
            examples: examples.len(),
            steps: adam.steps(),
        });
    }
    let steps = adam.steps();
    Ok((
        Checkpoint {
            model,
            vocab_fingerprint,
            retrieval: RetrievalSettings {
                mode: tc.mode,
                self_exclusion: tc.self_exclusion,
            },
            steps,
        },
        log,
    ))
}

#[cfg(test)]
pub(crate) fn expand_for_test(corpus: &ParallelCorpus, index: Option<&RetrievalIndex>, tc: &TrainConfig) -> Result<Vec<Example>> {
    expand(corpus, index, tc)
}
