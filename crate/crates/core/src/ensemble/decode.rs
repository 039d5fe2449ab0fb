use alloc::vec;
use alloc::vec::Vec;

use super::{Mode, Predictor, Prepared};
use crate::corpus::EOS;
use crate::error::{Error, Result};
use crate::model::memories_for;
use crate::retrieval::RetrievalIndex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

/// A decoded sentence. `score` is the mean log-probability per generated
/// token, EOS included.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub score: f64,
    pub finished: bool,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn ln(p: f64) -> f64 {
    libm::log(p.max(1e-300))
}

fn greedy(pred: &Predictor, p: &Prepared, max_steps: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut logp = 0.0;
    for _ in 0..max_steps {
        let dist = pred.step(p, &tokens)?;
        let t = argmax(&dist);
        logp += ln(dist[t]);
        if t as u32 == EOS {
            let n = tokens.len() + 1;
            return Ok(Hypothesis {
                tokens,
                score: logp / n as f64,
                finished: true,
            });
        }
        tokens.push(t as u32);
    }
    let n = tokens.len().max(1);
    Ok(Hypothesis {
        tokens,
        score: logp / n as f64,
        finished: false,
    })
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<u32>,
    logp: f64,
}

fn beam(pred: &Predictor, p: &Prepared, width: usize, max_steps: usize) -> Result<Hypothesis> {
    let mut live = vec![Beam {
        tokens: Vec::new(),
        logp: 0.0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for step in 0..max_steps {
        let mut cand: Vec<(f64, usize, u32)> = Vec::new();
        for (bi, b) in live.iter().enumerate() {
            let dist = pred.step(p, &b.tokens)?;
            let mut order: Vec<usize> = (0..dist.len()).collect();
            order.sort_by(|&x, &y| dist[y].total_cmp(&dist[x]).then(x.cmp(&y)));
            for &t in order.iter().take(width) {
                cand.push((b.logp + ln(dist[t]), bi, t as u32));
            }
        }
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(width);
        for (logp, bi, t) in cand.into_iter().take(width) {
            let mut tokens = live[bi].tokens.clone();
            if t == EOS {
                done.push(Hypothesis {
                    score: logp / (step + 1) as f64,
                    tokens,
                    finished: true,
                });
            } else {
                tokens.push(t);
                next.push(Beam { tokens, logp });
            }
        }
        live = next;
        if live.is_empty() {
            break;
        }
    }
    if done.is_empty() {
        done.extend(live.into_iter().map(|b| Hypothesis {
            score: b.logp / b.tokens.len().max(1) as f64,
            tokens: b.tokens,
            finished: false,
        }));
    }
    let mut best = done.swap_remove(0);
    for h in done {
        if h.score > best.score {
            best = h;
        }
    }
    Ok(best)
}

/// Decodes one prepared sentence. Beam search returns the best of its
/// finished hypotheses and the greedy hypothesis, by length-normalized score.
pub fn decode(pred: &Predictor, p: &Prepared, strategy: Strategy, max_steps: usize) -> Result<Hypothesis> {
    let g = greedy(pred, p, max_steps)?;
    match strategy {
        Strategy::Greedy => Ok(g),
        Strategy::Beam(0) => Err(Error::invalid("beam width must be at least 1")),
        Strategy::Beam(w) => {
            let b = beam(pred, p, w, max_steps)?;
            Ok(if b.score > g.score { b } else { g })
        }
    }
}

/// Retrieves `k` memories for `source` from `index` (if any) and decodes.
pub fn translate(
    pred: &Predictor,
    mode: Mode,
    source: &[u32],
    index: Option<&RetrievalIndex>,
    k: usize,
    strategy: Strategy,
) -> Result<Hypothesis> {
    let memories = match index {
        Some(idx) if k > 0 => memories_for(idx, source, k, None)?,
        _ => Vec::new(),
    };
    let p = pred.prepare(mode, source, &memories)?;
    let max_steps = (pred.model.config.max_len - 1).min(2 * source.len() + 10);
    decode(pred, &p, strategy, max_steps)
}
