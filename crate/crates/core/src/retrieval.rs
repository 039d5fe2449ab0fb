//! Fuzzy translation-memory retrieval.
//!
//! An inverted index proposes a candidate pool by token overlap; the pool is
//! re-ranked by normalized token edit distance.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::corpus::{ParallelCorpus, SentencePair, TokenId, TokenSeq};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Size of the candidate pool that is re-ranked by similarity.
pub const POOL_SIZE: usize = 100;

/// A retrieved translation memory.
#[derive(Debug, Clone, PartialEq)]
pub struct TmPair {
    pub source: TokenSeq,
    pub target: TokenSeq,
    pub pair_id: u32,
    pub similarity: f64,
}

/// Retrieved memories, best first.
pub type TmSet = Vec<TmPair>;

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - dist(x, x_tm) / max(|x|, |x_tm|)`.
pub fn similarity(x: &[TokenId], x_tm: &[TokenId]) -> Result<f64> {
    let longest = x.len().max(x_tm.len());
    if longest == 0 {
        return Err(Error::Empty("similarity of two empty sequences"));
    }
    let d = edit_distance(x, x_tm);
    debug_assert!(d <= longest);
    Ok((1.0 - d as f64 / longest as f64).clamp(0.0, 1.0))
}

/// Which index entries a query must not retrieve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Exclusion {
    pub pair_id: Option<u32>,
    /// Also drop entries whose source equals the query token for token.
    pub identical_source: bool,
}

impl Exclusion {
    pub const NONE: Exclusion = Exclusion {
        pair_id: None,
        identical_source: false,
    };

    /// Self-exclusion used when retrieving for training pairs.
    pub fn own(pair_id: u32) -> Self {
        Exclusion {
            pair_id: Some(pair_id),
            identical_source: true,
        }
    }
}

/// Immutable datastore plus inverted index over source tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    /// Stored pairs in ascending `pair_id` order.
    pairs: Vec<SentencePair>,
    /// Token -> ascending positions into `pairs`.
    postings: BTreeMap<TokenId, Vec<u32>>,
}

impl RetrievalIndex {
    pub fn build(corpus: &ParallelCorpus) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("retrieval corpus"));
        }
        let mut pairs = corpus.pairs().to_vec();
        pairs.sort_by_key(|p| p.pair_id);
        let postings = build_postings(&pairs);
        Ok(RetrievalIndex { pairs, postings })
    }

    /// Reassembles an index from stored parts, checking every invariant.
    pub fn from_parts(pairs: Vec<SentencePair>, postings: BTreeMap<TokenId, Vec<u32>>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("retrieval corpus"));
        }
        if pairs.windows(2).any(|w| w[0].pair_id >= w[1].pair_id) {
            return Err(Error::invalid("index pairs are not in strictly ascending pair_id order"));
        }
        if postings != build_postings(&pairs) {
            return Err(Error::invalid("index posting lists do not match the stored pairs"));
        }
        Ok(RetrievalIndex { pairs, postings })
    }

    pub fn pairs(&self) -> &[SentencePair] {
        &self.pairs
    }

    pub fn postings(&self) -> &BTreeMap<TokenId, Vec<u32>> {
        &self.postings
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, pair_id: u32) -> Option<&SentencePair> {
        self.pairs
            .binary_search_by_key(&pair_id, |p| p.pair_id)
            .ok()
            .map(|i| &self.pairs[i])
    }

    fn positions(&self, x: &[TokenId], limit: usize) -> Vec<usize> {
        let mut distinct = x.to_vec();
        distinct.sort_unstable();
        distinct.dedup();
        let mut counts = vec![0u32; self.pairs.len()];
        for t in &distinct {
            if let Some(list) = self.postings.get(t) {
                for &p in list {
                    counts[p as usize] += 1;
                }
            }
        }
        let mut hit: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
        hit.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
        hit.truncate(limit);
        if hit.len() < limit {
            let pad: Vec<usize> = (0..counts.len())
                .filter(|&i| counts[i] == 0)
                .take(limit - hit.len())
                .collect();
            hit.extend(pad);
        }
        hit
    }

    /// Pair ids of the `limit` entries sharing the most distinct tokens with
    /// `x` (ties by ascending pair id), padded in pair id order.
    pub fn candidates(&self, x: &[TokenId], limit: usize) -> Vec<u32> {
        self.positions(x, limit.max(1))
            .into_iter()
            .map(|i| self.pairs[i].pair_id)
            .collect()
    }

    fn scored_pool(&self, x: &[TokenId], pool: usize, exclude: Exclusion) -> Result<TmSet> {
        let mut out = Vec::new();
        for i in self.positions(x, pool.max(1)) {
            let p = &self.pairs[i];
            if exclude.pair_id == Some(p.pair_id) || (exclude.identical_source && p.source.0 == x) {
                continue;
            }
            out.push(TmPair {
                source: p.source.clone(),
                target: p.target.clone(),
                pair_id: p.pair_id,
                similarity: similarity(x, &p.source)?,
            });
        }
        out.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.pair_id.cmp(&b.pair_id)));
        Ok(out)
    }

    /// Top-`k` memories for `x` by similarity (desc), ties by pair id.
    pub fn retrieve_topk(&self, x: &[TokenId], k: usize, exclude: Exclusion) -> Result<TmSet> {
        if k == 0 {
            return Ok(Vec::new());
        }
        if x.is_empty() {
            return Err(Error::Empty("retrieval query"));
        }
        let mut set = self.scored_pool(x, POOL_SIZE, exclude)?;
        set.truncate(k);
        Ok(set)
    }

    /// The candidate pool with sampling probabilities `softmax(sim / temperature)`.
    pub fn sampling_distribution(&self, x: &[TokenId], temperature: f64, pool: usize) -> Result<Vec<(TmPair, f64)>> {
        if !(temperature > 0.0) {
            return Err(Error::invalid("sampling temperature must be > 0"));
        }
        if x.is_empty() {
            return Err(Error::Empty("retrieval query"));
        }
        let set = self.scored_pool(x, pool, Exclusion::NONE)?;
        let top = set.first().map(|p| p.similarity).unwrap_or(0.0);
        let weights: Vec<f64> = set.iter().map(|p| libm::exp((p.similarity - top) / temperature)).collect();
        let z: f64 = weights.iter().sum();
        Ok(set.into_iter().zip(weights).map(|(p, w)| (p, w / z)).collect())
    }

    /// Draws one memory from the candidate pool with probability
    /// proportional to `exp(sim / temperature)`.
    pub fn sample_tm(&self, x: &[TokenId], temperature: f64, rng: &mut Rng, pool: usize) -> Result<TmPair> {
        let dist = self.sampling_distribution(x, temperature, pool)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (p, w) in &dist {
            acc += w;
            if u < acc {
                return Ok(p.clone());
            }
        }
        Ok(dist.last().expect("pool is never empty").0.clone())
    }
}

fn build_postings(pairs: &[SentencePair]) -> BTreeMap<TokenId, Vec<u32>> {
    let mut postings: BTreeMap<TokenId, Vec<u32>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        let mut toks = p.source.0.clone();
        toks.sort_unstable();
        toks.dedup();
        for t in toks {
            postings.entry(t).or_default().push(i as u32);
        }
    }
    postings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_task;
    use crate::corpus::build_vocab;
    use proptest::prelude::*;
    use rand::SeedableRng;

    // Full (n+1)x(m+1) table, kept deliberately separate from the two-row version.
    fn dp_oracle(a: &[u32], b: &[u32]) -> usize {
        let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in t.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            t[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                t[i][j] = (t[i - 1][j - 1] + c).min(t[i - 1][j] + 1).min(t[i][j - 1] + 1);
            }
        }
        t[a.len()][b.len()]
    }

    fn corpus(rows: &[(&[u32], &[u32])]) -> ParallelCorpus {
        ParallelCorpus::new(
            rows.iter()
                .enumerate()
                .map(|(i, (s, t))| SentencePair {
                    source: s.to_vec().into(),
                    target: t.to_vec().into(),
                    pair_id: i as u32,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(edit_distance(&[4, 5, 6], &[4, 5, 6]), 0);
        assert_eq!(edit_distance(&[], &[4, 5]), 2);
        // the cat sat / the dog sat
        let (a, b) = ([10, 11, 12], [10, 13, 12]);
        assert_eq!(edit_distance(&a, &b), 1);
        assert_eq!(dp_oracle(&a, &b), 1);
        assert!((similarity(&a, &b).unwrap() - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert_eq!(similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(similarity(&[4], &[5]).unwrap(), 0.0);
        assert!(similarity(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn distance_matches_oracle_and_is_a_metric(
            a in prop::collection::vec(0u32..5, 0..9),
            b in prop::collection::vec(0u32..5, 0..9),
            c in prop::collection::vec(0u32..5, 0..9),
        ) {
            let ab = edit_distance(&a, &b);
            prop_assert_eq!(ab, dp_oracle(&a, &b));
            prop_assert_eq!(ab, edit_distance(&b, &a));
            prop_assert!(edit_distance(&a, &c) <= ab + edit_distance(&b, &c));
            if !a.is_empty() || !b.is_empty() {
                prop_assert_eq!(similarity(&a, &b).unwrap(), similarity(&b, &a).unwrap());
            }
        }
    }

    #[test]
    fn single_pair_postings() {
        let idx = RetrievalIndex::build(&corpus(&[(&[7, 8, 7], &[9])])).unwrap();
        for t in [7, 8] {
            assert_eq!(idx.postings()[&t], vec![0]);
        }
        assert!(RetrievalIndex::build(&ParallelCorpus::default()).is_err());
    }

    #[test]
    fn duplicates_are_indexed_separately() {
        let idx = RetrievalIndex::build(&corpus(&[(&[5, 6], &[9]), (&[5, 6], &[9])])).unwrap();
        assert_eq!(idx.postings()[&5], vec![0, 1]);
        let set = idx.retrieve_topk(&[5, 6], 5, Exclusion::NONE).unwrap();
        assert_eq!(set.iter().map(|p| p.pair_id).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn candidates_rank_by_overlap_then_pad() {
        let c = corpus(&[
            (&[20, 21], &[4]),
            (&[5, 6, 7], &[4]),
            (&[30], &[4]),
            (&[5, 40], &[4]),
            (&[6, 7, 50], &[4]),
        ]);
        let idx = RetrievalIndex::build(&c).unwrap();
        assert_eq!(idx.candidates(&[5, 6, 7, 7], 100), vec![1, 4, 3, 0, 2]);
        assert_eq!(idx.candidates(&[5, 6, 7], 1), vec![1]);
        assert_eq!(idx.candidates(&[3, 3], 3), vec![0, 1, 2]);
    }

    #[test]
    fn self_exclusion() {
        let c = corpus(&[(&[5, 6, 7], &[4]), (&[5, 6, 8], &[4]), (&[5, 6, 7], &[9])]);
        let idx = RetrievalIndex::build(&c).unwrap();
        let open = idx.retrieve_topk(&[5, 6, 7], 5, Exclusion::NONE).unwrap();
        assert_eq!(open[0].pair_id, 0);
        assert_eq!(open[0].similarity, 1.0);
        let closed = idx.retrieve_topk(&[5, 6, 7], 5, Exclusion::own(0)).unwrap();
        assert_eq!(closed.iter().map(|p| p.pair_id).collect::<Vec<_>>(), vec![1]);
        assert!(idx.retrieve_topk(&[5, 6, 7], 0, Exclusion::NONE).unwrap().is_empty());
    }

    #[test]
    fn parts_roundtrip_and_validation() {
        let c = corpus(&[(&[5, 6], &[4]), (&[6, 7], &[4])]);
        let idx = RetrievalIndex::build(&c).unwrap();
        let back = RetrievalIndex::from_parts(idx.pairs().to_vec(), idx.postings().clone()).unwrap();
        assert_eq!(back, idx);
        let mut bad = idx.postings().clone();
        bad.get_mut(&6).unwrap().reverse();
        assert!(RetrievalIndex::from_parts(idx.pairs().to_vec(), bad).is_err());
    }

    #[test]
    fn sampling_follows_softmax_of_similarity() {
        // Similarities 1.0 and 0.5 against the query.
        let c = corpus(&[(&[5, 6], &[4]), (&[5, 7], &[4])]);
        let idx = RetrievalIndex::build(&c).unwrap();
        let dist = idx.sampling_distribution(&[5, 6], 0.5, POOL_SIZE).unwrap();
        let expect = 1.0 / (1.0 + libm::exp(-1.0));
        assert!((dist[0].1 - expect).abs() < 1e-12);
        assert!((dist[0].1 - 0.731059).abs() < 1e-6);
        assert!((dist.iter().map(|d| d.1).sum::<f64>() - 1.0).abs() < 1e-9);
        let mut rng = crate::rng::Rng::seed_from_u64(3);
        let n = 100_000;
        let first = (0..n)
            .filter(|_| idx.sample_tm(&[5, 6], 0.5, &mut rng, POOL_SIZE).unwrap().pair_id == 0)
            .count();
        assert!((first as f64 / n as f64 - expect).abs() < 0.01);
        let cold = (0..10_000)
            .filter(|_| idx.sample_tm(&[5, 6], 1e-6, &mut rng, POOL_SIZE).unwrap().pair_id == 0)
            .count();
        assert!(cold as f64 / 10_000.0 > 0.999);
        assert!(idx.sample_tm(&[5, 6], 0.0, &mut rng, POOL_SIZE).is_err());
        let one = RetrievalIndex::build(&corpus(&[(&[5], &[4])])).unwrap();
        assert_eq!(one.sampling_distribution(&[9], 1.0, POOL_SIZE).unwrap()[0].1, 1.0);
    }

    #[test]
    fn topk_agrees_with_brute_force_when_pool_covers_it() {
        let synth = synth_task(1100, 60, 80, 5).unwrap();
        let vocab = build_vocab(&synth.pairs, 1).unwrap();
        let all = ParallelCorpus::from_raw(&synth.pairs, &vocab).unwrap();
        let store = ParallelCorpus::new(all.pairs()[..1000].to_vec()).unwrap();
        let idx = RetrievalIndex::build(&store).unwrap();
        let mut misses = 0;
        for q in &all.pairs()[1000..] {
            let mut brute: Vec<(f64, u32)> = store
                .pairs()
                .iter()
                .map(|p| (similarity(&q.source, &p.source).unwrap(), p.pair_id))
                .collect();
            brute.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let truth: Vec<u32> = brute[..5].iter().map(|b| b.1).collect();
            let pool = idx.candidates(&q.source, POOL_SIZE);
            if !truth.iter().all(|t| pool.contains(t)) {
                misses += 1;
                continue;
            }
            let got: Vec<u32> = idx
                .retrieve_topk(&q.source, 5, Exclusion::NONE)
                .unwrap()
                .iter()
                .map(|p| p.pair_id)
                .collect();
            assert_eq!(got, truth);
        }
        assert!(misses < 5, "pool misses: {misses}/100");
    }
}
