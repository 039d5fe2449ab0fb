//! Corpus BLEU and teacher-forced token cross-entropy.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::biasvar::FLOOR;
use crate::corpus::{ParallelCorpus, TokenId, EOS};
use crate::ensemble::{Mode, Predictor};
use crate::error::{Error, Result};
use crate::model::memories_for;
use crate::retrieval::RetrievalIndex;

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuResult {
    /// In `[0, 100]`.
    pub score: f64,
    /// Smoothed modified precisions for orders 1 through 4.
    pub precisions: [f64; MAX_ORDER],
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngrams<T: Ord + Clone>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with clipped counts pooled over sentences.
///
/// A higher order with no matches gets precision `1 / (total + 1)`; orders
/// with matches are left unsmoothed. Without a single unigram match the score
/// is zero.
pub fn corpus_bleu<T: Ord + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<BleuResult> {
    if hyps.len() != refs.len() {
        return Err(Error::ShapeMismatch {
            op: "corpus_bleu",
            left: vec![hyps.len()],
            right: vec![refs.len()],
        });
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let mut hyp_len = 0;
    let mut ref_len = 0;
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matches[n - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = match (n, matches[n]) {
            (0, 0) => 0.0,
            (_, 0) => 1.0 / (totals[n] + 1) as f64,
            (_, m) => m as f64 / totals[n] as f64,
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        libm::exp(1.0 - ref_len as f64 / hyp_len as f64)
    };
    let score = if matches[0] == 0 {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| libm::log(*p)).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * libm::exp(log_mean)
    };
    Ok(BleuResult {
        score,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// Mean nats per target token, EOS included.
    pub nats: f64,
    pub tokens: usize,
}

impl CrossEntropy {
    pub fn perplexity(&self) -> f64 {
        libm::exp(self.nats)
    }
}

/// Where the memories for each evaluated pair come from.
#[derive(Debug, Clone, Copy)]
pub struct MemorySource<'a> {
    pub index: &'a RetrievalIndex,
    pub k: usize,
    /// Skip the pair's own entry (for evaluating on the indexed corpus).
    pub exclude_self: bool,
}

/// Teacher-forced mean cross-entropy of `corpus` under `mode`.
pub fn token_ce(pred: &Predictor, mode: Mode, corpus: &ParallelCorpus, memories: Option<MemorySource<'_>>) -> Result<CrossEntropy> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let size = pred.model.config.vocab_size;
    if let Some(max) = corpus.max_token() {
        if max as usize >= size {
            return Err(Error::TokenOutOfRange { id: max, size });
        }
    }
    let mut sum = 0.0;
    let mut tokens = 0;
    for pair in corpus.pairs() {
        let mems = match memories {
            Some(m) if m.k > 0 => memories_for(m.index, &pair.source, m.k, m.exclude_self.then_some(pair.pair_id))?,
            _ => Vec::new(),
        };
        let prepared = pred.prepare(mode, &pair.source, &mems)?;
        let rows = pred.score_rows(&prepared, &pair.target)?;
        let gold = pair.target.iter().copied().chain([EOS as TokenId]);
        for (row, y) in rows.iter().zip(gold) {
            sum -= libm::log(row[y as usize].max(FLOOR));
            tokens += 1;
        }
    }
    Ok(CrossEntropy {
        nats: sum / tokens as f64,
        tokens,
    })
}
