use alloc::vec;
use alloc::vec::Vec;

use super::{Arch, Example, Memory, ModelConfig};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// A memory token as a key of the TM attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemToken {
    /// Row of the memory-encoder output holding this token.
    pub row: usize,
    pub token: u32,
    pub target_side: bool,
}

/// For every query group, the memory tokens it attends over.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MemLayout {
    pub groups: Vec<Vec<MemToken>>,
}

impl MemLayout {
    pub fn max_keys(&self) -> usize {
        self.groups.iter().map(Vec::len).max().unwrap_or(0)
    }
}

/// Memory sequences `[x_tm ; y_tm]` padded into one encoder batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemBatch {
    pub count: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
    /// Position within its own side; both sides start at zero.
    pub positions: Vec<usize>,
    /// 0 for the source side, 1 for the target side.
    pub segments: Vec<usize>,
    /// Token rows of each memory, in order.
    pub tokens: Vec<Vec<MemToken>>,
}

impl MemBatch {
    pub fn new(memories: &[&Memory], max_len: usize) -> Result<Self> {
        let len = memories
            .iter()
            .map(|m| m.source.len() + m.target.len())
            .max()
            .unwrap_or(0)
            .max(1);
        let count = memories.len();
        let mut mb = MemBatch {
            count,
            len,
            ids: vec![PAD; count * len],
            valid: vec![false; count * len],
            positions: vec![0; count * len],
            segments: vec![0; count * len],
            tokens: Vec::with_capacity(count),
        };
        for (m, mem) in memories.iter().enumerate() {
            for side in [&mem.source, &mem.target] {
                if side.len() > max_len {
                    return Err(Error::TooLong {
                        what: "memory side",
                        len: side.len(),
                        max: max_len,
                    });
                }
            }
            let mut toks = Vec::with_capacity(mem.source.len() + mem.target.len());
            let sides = [(0usize, &mem.source), (1, &mem.target)];
            let mut j = 0;
            for (seg, side) in sides {
                for (p, &t) in side.iter().enumerate() {
                    let row = m * len + j;
                    mb.ids[row] = t;
                    mb.valid[row] = true;
                    mb.positions[row] = p;
                    mb.segments[row] = seg;
                    toks.push(MemToken {
                        row,
                        token: t,
                        target_side: seg == 1,
                    });
                    j += 1;
                }
            }
            mb.tokens.push(toks);
        }
        Ok(mb)
    }
}

/// Padded batch ready for a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub src_ids: Vec<u32>,
    pub src_valid: Vec<bool>,
    pub tgt_len: usize,
    /// `[BOS] + target`, padded.
    pub dec_in: Vec<u32>,
    /// `target + [EOS]`, padded with PAD.
    pub dec_out: Vec<u32>,
    /// Memories and per-example groups (dual encoder only).
    pub mem: Option<(MemBatch, MemLayout)>,
}

/// `[x ; SEP ; x_1 ; SEP ; y_1 ; SEP ; ...]`.
pub(crate) fn concat_input(source: &[u32], memories: &[Memory], sep: u32) -> Vec<u32> {
    let mut out = source.to_vec();
    out.push(sep);
    for m in memories {
        out.extend_from_slice(&m.source);
        out.push(sep);
        out.extend_from_slice(&m.target);
        out.push(sep);
    }
    out
}

impl Batch {
    pub fn new(config: &ModelConfig, examples: &[&Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let sources: Vec<Vec<u32>> = examples
            .iter()
            .map(|e| match config.sep() {
                Some(sep) => concat_input(&e.source, &e.memories, sep),
                None => e.source.clone(),
            })
            .collect();
        for (e, s) in examples.iter().zip(&sources) {
            if e.source.is_empty() {
                return Err(Error::Empty("source sentence"));
            }
            if s.len() > config.max_len {
                let what = if config.arch == Arch::SingleEnc {
                    "source and memories concatenated"
                } else {
                    "source"
                };
                return Err(Error::TooLong {
                    what,
                    len: s.len(),
                    max: config.max_len,
                });
            }
            if e.target.len() + 1 > config.max_len {
                return Err(Error::TooLong {
                    what: "target (with EOS)",
                    len: e.target.len() + 1,
                    max: config.max_len,
                });
            }
        }
        let size = examples.len();
        let src_len = sources.iter().map(Vec::len).max().unwrap_or(1);
        let tgt_len = examples.iter().map(|e| e.target.len() + 1).max().unwrap_or(1);
        let mut src_ids = vec![PAD; size * src_len];
        let mut src_valid = vec![false; size * src_len];
        let mut dec_in = vec![PAD; size * tgt_len];
        let mut dec_out = vec![PAD; size * tgt_len];
        for (b, (e, s)) in examples.iter().zip(&sources).enumerate() {
            for (j, &t) in s.iter().enumerate() {
                check_token(t, config.vocab_size)?;
                src_ids[b * src_len + j] = t;
                src_valid[b * src_len + j] = true;
            }
            dec_in[b * tgt_len] = BOS;
            for (j, &t) in e.target.iter().enumerate() {
                check_token(t, config.vocab_size)?;
                dec_in[b * tgt_len + j + 1] = t;
                dec_out[b * tgt_len + j] = t;
            }
            dec_out[b * tgt_len + e.target.len()] = EOS;
        }
        let mem = if config.arch == Arch::DualEnc {
            let mems: Vec<&Memory> = examples.iter().flat_map(|e| e.memories.iter()).collect();
            for m in &mems {
                for &t in m.source.iter().chain(&m.target) {
                    check_token(t, config.vocab_size)?;
                }
            }
            let mb = MemBatch::new(&mems, config.max_len)?;
            let mut groups = Vec::with_capacity(size);
            let mut next = 0;
            for e in examples {
                let n = e.memories.len();
                groups.push(mb.tokens[next..next + n].iter().flatten().copied().collect());
                next += n;
            }
            Some((mb, MemLayout { groups }))
        } else {
            None
        };
        Ok(Batch {
            size,
            src_len,
            src_ids,
            src_valid,
            tgt_len,
            dec_in,
            dec_out,
            mem,
        })
    }

    pub fn target_tokens(&self) -> usize {
        self.dec_out.iter().filter(|&&t| t != PAD).count()
    }
}

fn check_token(t: u32, size: usize) -> Result<()> {
    if t as usize >= size {
        return Err(Error::TokenOutOfRange { id: t, size });
    }
    Ok(())
}
