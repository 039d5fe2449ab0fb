//! Corpus ingestion: tokenization, vocabularies, parallel corpora, seeded
//! splits and the synthetic templated translation task.

mod synth;
mod vocab;

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Deref;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

pub use synth::{synth_task, SynthCorpus, MAX_LEXICON_SIZE};
pub use vocab::{build_vocab, Vocab, BOS, EOS, PAD, RESERVED, UNK};

pub type TokenId = u32;

/// A tokenized sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl Deref for TokenSeq {
    type Target = [TokenId];
    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq(ids)
    }
}

impl From<&[TokenId]> for TokenSeq {
    fn from(ids: &[TokenId]) -> Self {
        TokenSeq(ids.to_vec())
    }
}

/// An untokenized sentence pair as read from disk or produced by `synth_task`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub source: String,
    pub target: String,
}

impl RawPair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        RawPair {
            source: source.into(),
            target: target.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: TokenSeq,
    pub target: TokenSeq,
    pub pair_id: u32,
}

/// Tokenized parallel data. Pair ids are unique; a freshly loaded corpus
/// numbers them densely by line, subsets produced by [`split_equal`] keep the
/// ids of the corpus they came from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParallelCorpus {
    pairs: Vec<SentencePair>,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>) -> Result<Self> {
        let mut ids: Vec<u32> = pairs.iter().map(|p| p.pair_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate pair_id in corpus"));
        }
        for p in &pairs {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(Error::invalid(alloc::format!(
                    "pair {} has an empty side",
                    p.pair_id
                )));
            }
        }
        Ok(ParallelCorpus { pairs })
    }

    /// Tokenizes raw pairs with `vocab`; pair `i` gets id `i`.
    pub fn from_raw(raw: &[RawPair], vocab: &Vocab) -> Result<Self> {
        let mut pairs = Vec::with_capacity(raw.len());
        for (i, rp) in raw.iter().enumerate() {
            let source = vocab.encode_text(&rp.source);
            let target = vocab.encode_text(&rp.target);
            if source.is_empty() || target.is_empty() {
                return Err(Error::invalid(alloc::format!(
                    "line {}: empty side after tokenization",
                    i + 1
                )));
            }
            pairs.push(SentencePair {
                source,
                target,
                pair_id: i as u32,
            });
        }
        Ok(ParallelCorpus { pairs })
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Concatenation of several corpora (e.g. growing datastores).
    pub fn union(parts: &[&ParallelCorpus]) -> Result<Self> {
        let pairs = parts.iter().flat_map(|c| c.pairs.iter().cloned()).collect();
        ParallelCorpus::new(pairs)
    }

    /// Renumbers pair ids densely in current order.
    pub fn renumbered(&self) -> Self {
        let pairs = self
            .pairs
            .iter()
            .enumerate()
            .map(|(i, p)| SentencePair {
                pair_id: i as u32,
                ..p.clone()
            })
            .collect();
        ParallelCorpus { pairs }
    }

    /// Largest token id used on either side, if any.
    pub fn max_token(&self) -> Option<TokenId> {
        self.pairs
            .iter()
            .flat_map(|p| p.source.iter().chain(p.target.iter()))
            .copied()
            .max()
    }
}

/// Whitespace tokenization with lowercasing.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

/// Like [`tokenize`] but starting from raw bytes, which must be UTF-8.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<String>> {
    let text = core::str::from_utf8(bytes)
        .map_err(|e| Error::invalid(alloc::format!("invalid UTF-8: {e}")))?;
    Ok(tokenize(text))
}

/// Seeded shuffle followed by a contiguous partition into `parts` subsets
/// whose sizes differ by at most one.
pub fn split_equal(corpus: &ParallelCorpus, parts: usize, seed: u64) -> Result<Vec<ParallelCorpus>> {
    if parts == 0 {
        return Err(Error::invalid("parts must be at least 1"));
    }
    let n = corpus.len();
    if parts > n {
        return Err(Error::invalid(alloc::format!(
            "cannot split {n} pairs into {parts} parts"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(seed, "split"));
    let base = n / parts;
    let extra = n % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        let pairs = order[start..start + size]
            .iter()
            .map(|&i| corpus.pairs[i].clone())
            .collect();
        out.push(ParallelCorpus { pairs });
        start += size;
    }
    Ok(out)
}

/// Joins tokens with single spaces.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn toy(n: usize) -> ParallelCorpus {
        let pairs = (0..n)
            .map(|i| SentencePair {
                source: TokenSeq(vec![4 + i as u32]),
                target: TokenSeq(vec![5 + i as u32]),
                pair_id: i as u32,
            })
            .collect();
        ParallelCorpus::new(pairs).unwrap()
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("The cat sat"), ["the", "cat", "sat"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a  b"), ["a", "b"]);
        assert!(tokenize_bytes(&[0xff, 0xfe]).is_err());
    }

    #[test]
    fn split_into_four_equal_parts() {
        let parts = split_equal(&toy(8), 4, 1).unwrap();
        assert_eq!(parts.len(), 4);
        assert!(parts.iter().all(|p| p.len() == 2));
        assert_eq!(split_equal(&toy(8), 4, 1).unwrap(), parts);
    }

    #[test]
    fn split_one_part_is_a_permutation() {
        let c = toy(10);
        let parts = split_equal(&c, 1, 3).unwrap();
        let mut ids: Vec<u32> = parts[0].pairs().iter().map(|p| p.pair_id).collect();
        ids.sort();
        assert_eq!(ids, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_too_many_parts() {
        assert!(split_equal(&toy(3), 4, 0).is_err());
        assert!(split_equal(&toy(3), 0, 0).is_err());
    }

    #[test]
    fn corpus_rejects_duplicates_and_empty_sides() {
        let p = SentencePair {
            source: TokenSeq(vec![4]),
            target: TokenSeq(vec![5]),
            pair_id: 0,
        };
        assert!(ParallelCorpus::new(vec![p.clone(), p.clone()]).is_err());
        let empty = SentencePair {
            target: TokenSeq(vec![]),
            ..p
        };
        assert!(ParallelCorpus::new(vec![empty]).is_err());
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(words in proptest::collection::vec("[a-zA-Z]{1,6}", 0..8)) {
            let once = detokenize(&tokenize(&words.join("  ")));
            prop_assert_eq!(detokenize(&tokenize(&once)), once.clone());
        }

        #[test]
        fn split_is_disjoint_and_exhaustive(n in 1usize..60, parts in 1usize..8, seed in any::<u64>()) {
            prop_assume!(parts <= n);
            let out = split_equal(&toy(n), parts, seed).unwrap();
            let sizes: Vec<usize> = out.iter().map(|p| p.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            let mut ids: Vec<u32> = out.iter().flat_map(|p| p.pairs().iter().map(|q| q.pair_id)).collect();
            ids.sort();
            prop_assert_eq!(ids, (0..n as u32).collect::<Vec<_>>());
        }
    }
}
