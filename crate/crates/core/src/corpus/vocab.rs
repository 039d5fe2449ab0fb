use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{tokenize, RawPair, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::rng::stable_hash;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Token table shared by source and target side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    itos: Vec<String>,
    stoi: BTreeMap<String, TokenId>,
    counts: Vec<u64>,
}

impl Vocab {
    /// Rebuilds a vocabulary from its token list (reserved tokens first).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::invalid("vocabulary must start with <pad> <s> </s> <unk>"));
        }
        let mut stoi = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::invalid(alloc::format!("bad vocabulary token at line {}", i + 1)));
            }
            if stoi.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(alloc::format!("duplicate vocabulary token {t:?}")));
            }
        }
        let counts = alloc::vec![0; tokens.len()];
        Ok(Vocab {
            itos: tokens,
            stoi,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.itos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.itos.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.stoi.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.itos.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.itos
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts.get(id as usize).copied().unwrap_or(0)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> TokenSeq {
        TokenSeq(tokens.iter().map(|t| self.id(t.as_ref())).collect())
    }

    pub fn encode_text(&self, text: &str) -> TokenSeq {
        self.encode(&tokenize(text))
    }

    /// Space-joined surface form; out-of-range ids render as `<unk>`.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]))
            .collect();
        super::detokenize(&words)
    }

    /// Fingerprint of the id-to-token table.
    pub fn fingerprint(&self) -> u64 {
        let mut buf = Vec::new();
        for t in &self.itos {
            buf.extend_from_slice(t.as_bytes());
            buf.push(b'\n');
        }
        stable_hash(&buf)
    }
}

/// Builds the joint source/target vocabulary. Ids after the reserved block are
/// ordered by descending count, then lexicographically; tokens seen fewer than
/// `min_freq` times are left out and encode as UNK.
pub fn build_vocab(corpus: &[RawPair], min_freq: u64) -> Result<Vocab> {
    if min_freq == 0 {
        return Err(Error::invalid("min_freq must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(Error::Empty("vocabulary corpus"));
    }
    let mut freq: BTreeMap<String, u64> = BTreeMap::new();
    for pair in corpus {
        for tok in tokenize(&pair.source).into_iter().chain(tokenize(&pair.target)) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    let mut entries: Vec<(String, u64)> = freq
        .into_iter()
        .filter(|(t, c)| *c >= min_freq && !RESERVED.contains(&t.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut itos: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut counts = alloc::vec![0u64; RESERVED.len()];
    for (t, c) in entries {
        itos.push(t);
        counts.push(c);
    }
    let stoi = itos
        .iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i as TokenId))
        .collect();
    Ok(Vocab { itos, stoi, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    #[test]
    fn min_freq_filters_rare_tokens() {
        let v = build_vocab(&[RawPair::new("a a b", "a")], 2).unwrap();
        assert_ne!(v.id("a"), UNK);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn reserved_plus_one() {
        let v = build_vocab(&[RawPair::new("a", "a")], 1).unwrap();
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.count(4), 2);
    }

    #[test]
    fn hundred_distinct_tokens() {
        let words: Vec<String> = (0..100).map(|i| format!("w{i}")).collect();
        let v = build_vocab(&[RawPair::new(words.join(" "), "w0")], 1).unwrap();
        assert_eq!(v.len(), 104);
    }

    #[test]
    fn order_is_count_then_lexicographic() {
        let v = build_vocab(&[RawPair::new("b c c a", "b")], 1).unwrap();
        assert_eq!(&v.tokens()[4..], ["b", "c", "a"]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(build_vocab(&[], 1).is_err());
        assert!(build_vocab(&[RawPair::new("a", "b")], 0).is_err());
    }

    #[test]
    fn from_tokens_round_trip() {
        let v = build_vocab(&[RawPair::new("x y z", "y")], 1).unwrap();
        let w = Vocab::from_tokens(v.tokens().to_vec()).unwrap();
        assert_eq!(v.tokens(), w.tokens());
        assert_eq!(v.fingerprint(), w.fingerprint());
        assert!(Vocab::from_tokens(vec!["a".into()]).is_err());
    }

    #[test]
    fn encode_maps_unknown_to_unk() {
        let v = build_vocab(&[RawPair::new("hallo", "hello")], 1).unwrap();
        assert_eq!(v.encode_text("Hallo welt").0, vec![v.id("hallo"), UNK]);
        assert_eq!(v.decode(&[v.id("hello"), 999]), "hello <unk>");
    }
}
