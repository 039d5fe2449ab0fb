//! `TMIDX1` index files: the magic line, the vocabulary fingerprint, the
//! stored pairs and the posting lists, all as little-endian u32/u64 words.

use std::collections::BTreeMap;
use std::path::Path;

use tmlab_core::corpus::SentencePair;
use tmlab_core::retrieval::RetrievalIndex;

use crate::error::{CliError, Result};
use crate::fsio;

const MAGIC: &[u8] = b"TMIDX1\n";

fn put(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_seq(out: &mut Vec<u8>, s: &[u32]) {
    put(out, s.len() as u32);
    s.iter().for_each(|&v| put(out, v));
}

pub fn encode_index(index: &RetrievalIndex, vocab_fingerprint: u64) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&vocab_fingerprint.to_le_bytes());
    put(&mut out, index.pairs().len() as u32);
    for p in index.pairs() {
        put(&mut out, p.pair_id);
        put_seq(&mut out, &p.source);
        put_seq(&mut out, &p.target);
    }
    put(&mut out, index.postings().len() as u32);
    for (token, list) in index.postings() {
        put(&mut out, *token);
        put_seq(&mut out, list);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Option<u32> {
        let b = self.bytes.get(self.at..self.at + 4)?;
        self.at += 4;
        Some(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn seq(&mut self) -> Option<Vec<u32>> {
        let n = self.u32()? as usize;
        if self.bytes.len().saturating_sub(self.at) < 4 * n {
            return None;
        }
        (0..n).map(|_| self.u32()).collect()
    }
}

/// Returns the index and the vocabulary fingerprint it was built with.
pub fn decode_index(bytes: &[u8], origin: &str) -> Result<(RetrievalIndex, u64)> {
    let bad = |msg: &str| CliError::data(format!("{origin}: {msg}"));
    let body = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("not a TMIDX1 index"))?;
    if body.len() < 8 {
        return Err(bad("truncated"));
    }
    let fp = u64::from_le_bytes(body[..8].try_into().expect("eight bytes"));
    let mut r = Reader { bytes: &body[8..], at: 0 };
    let parsed = (|| {
        let n = r.u32()?;
        let mut pairs = Vec::with_capacity(n.min(1 << 20) as usize);
        for _ in 0..n {
            let pair_id = r.u32()?;
            let source = r.seq()?.into();
            let target = r.seq()?.into();
            pairs.push(SentencePair {
                source,
                target,
                pair_id,
            });
        }
        let m = r.u32()?;
        let mut postings = BTreeMap::new();
        for _ in 0..m {
            let token = r.u32()?;
            postings.insert(token, r.seq()?);
        }
        Some((pairs, postings))
    })();
    let (pairs, postings) = parsed.ok_or_else(|| bad("truncated"))?;
    if r.at != r.bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let index = RetrievalIndex::from_parts(pairs, postings).map_err(|e| bad(&e.to_string()))?;
    Ok((index, fp))
}

pub fn save_index(path: &Path, index: &RetrievalIndex, vocab_fingerprint: u64) -> Result<()> {
    fsio::atomic_write(path, &encode_index(index, vocab_fingerprint))
}

pub fn load_index(path: &Path) -> Result<(RetrievalIndex, u64)> {
    decode_index(&fsio::read(path)?, &path.display().to_string())
}
