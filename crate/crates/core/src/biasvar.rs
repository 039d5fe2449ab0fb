//! Bias-variance decomposition of the token-level cross-entropy.
//!
//! Several models are trained on disjoint splits of the same corpus. Their
//! next-token distributions at fixed test points are pooled into a normalized
//! geometric mean `P̄`. The variance is the mean divergence between each model
//! and `P̄`, and the squared bias is whatever loss is left over.
//!
//! The divergence can be taken in two orders. `KL(P ‖ P̄)` is the conventional
//! statement of the decomposition; only `KL(P̄ ‖ P)` makes
//! `loss = KL(P₀ ‖ P̄) + E[KL(P̄ ‖ P)]` an exact identity for a one-hot `P₀`.
//! Both are reported.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::corpus::{split_equal, ParallelCorpus, TokenId, EOS};
use crate::error::{Error, Result};
use crate::rng;

/// Probability floor applied before every logarithm.
pub const FLOOR: f64 = 1e-12;

/// Default number of entries kept by [`truncate_top`].
pub const TRUNCATION: usize = 100;

/// One prediction site: a source, a target prefix and the gold next token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TestPoint {
    pub source: Vec<TokenId>,
    pub prefix: Vec<TokenId>,
    pub gold: TokenId,
}

impl TestPoint {
    /// Every position of `target` followed by EOS, in order.
    pub fn all_positions(source: &[TokenId], target: &[TokenId]) -> Vec<TestPoint> {
        (0..=target.len())
            .map(|t| TestPoint {
                source: source.to_vec(),
                prefix: target[..t].to_vec(),
                gold: target.get(t).copied().unwrap_or(EOS),
            })
            .collect()
    }

    /// Every position of every pair.
    pub fn from_corpus(corpus: &ParallelCorpus) -> Vec<TestPoint> {
        corpus
            .pairs()
            .iter()
            .flat_map(|p| TestPoint::all_positions(&p.source, &p.target))
            .collect()
    }
}

/// Which argument order the variance divergence uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlOrder {
    /// `KL(P_model ‖ P̄)`, the default.
    ModelFirst,
    /// `KL(P̄ ‖ P_model)`, the order under which the decomposition is exact.
    Exact,
}

impl KlOrder {
    pub const ALL: [KlOrder; 2] = [KlOrder::ModelFirst, KlOrder::Exact];

    pub fn as_str(self) -> &'static str {
        match self {
            KlOrder::ModelFirst => "model_first",
            KlOrder::Exact => "exact_order",
        }
    }
}

/// `Σ p log(p / q)` in nats, with `q` floored where `p > 0`.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    p.iter()
        .zip(q)
        .filter(|(p, _)| **p > 0.0)
        .map(|(&p, &q)| p * (libm::log(p) - libm::log(q.max(FLOOR))))
        .sum()
}

/// Normalized `exp(mean log P_i)`, with inputs floored before the log.
pub fn geometric_mean_dist(dists: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = dists.first().ok_or(Error::Empty("distributions"))?;
    let v = first.len();
    if let Some(d) = dists.iter().find(|d| d.len() != v) {
        return Err(Error::ShapeMismatch {
            op: "geometric_mean_dist",
            left: vec![v],
            right: vec![d.len()],
        });
    }
    let n = dists.len() as f64;
    let logs: Vec<f64> = (0..v)
        .map(|y| dists.iter().map(|d| libm::log(d[y].max(FLOOR))).sum::<f64>() / n)
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // An entry that is zero everywhere stays zero rather than picking up the floor.
    let e: Vec<f64> = logs
        .iter()
        .enumerate()
        .map(|(y, l)| {
            if dists.iter().all(|d| d[y] <= 0.0) {
                0.0
            } else {
                libm::exp(l - max)
            }
        })
        .collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}

/// Keeps the `n` most probable entries (ties go to the lower id), zeroes the
/// rest and renormalizes. Identity when the support already fits.
pub fn truncate_top(dist: &[f64], n: usize) -> Vec<f64> {
    let n = n.max(1);
    if dist.len() <= n {
        return dist.to_vec();
    }
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    let mut out = vec![0.0; dist.len()];
    let mut z = 0.0;
    for &i in &order[..n] {
        out[i] = dist[i];
        z += dist[i];
    }
    if z > 0.0 {
        out.iter_mut().for_each(|p| *p /= z);
    }
    out
}

/// Loss and both variance variants for a fixed set of predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decomposition {
    /// Mean gold-token cross-entropy over models and points (nats/token).
    pub loss: f64,
    pub variance_model_first: f64,
    pub variance_exact: f64,
}

impl Decomposition {
    pub fn variance(&self, order: KlOrder) -> f64 {
        match order {
            KlOrder::ModelFirst => self.variance_model_first,
            KlOrder::Exact => self.variance_exact,
        }
    }

    pub fn bias2(&self, order: KlOrder) -> f64 {
        self.loss - self.variance(order)
    }
}

/// Decomposes `predictions[model][point]` against the gold tokens.
///
/// The loss is read off the raw distributions; the variance uses the
/// truncated ones, as does `P̄`.
pub fn decompose(predictions: &[Vec<Vec<f64>>], gold: &[TokenId], truncation: usize) -> Result<Decomposition> {
    if predictions.is_empty() {
        return Err(Error::Empty("models"));
    }
    if gold.is_empty() {
        return Err(Error::Empty("test points"));
    }
    for m in predictions {
        if m.len() != gold.len() {
            return Err(Error::ShapeMismatch {
                op: "decompose",
                left: vec![m.len()],
                right: vec![gold.len()],
            });
        }
    }
    let models = predictions.len() as f64;
    let mut loss = 0.0;
    let mut model_first = 0.0;
    let mut exact = 0.0;
    for (t, &y) in gold.iter().enumerate() {
        let mut truncated = Vec::with_capacity(predictions.len());
        for m in predictions {
            let p = &m[t];
            let py = p.get(y as usize).ok_or(Error::TokenOutOfRange {
                id: y,
                size: p.len(),
            })?;
            loss -= libm::log(py.max(FLOOR));
            truncated.push(truncate_top(p, truncation));
        }
        let mean = geometric_mean_dist(&truncated)?;
        for p in &truncated {
            model_first += kl(p, &mean);
            exact += kl(&mean, p);
        }
    }
    let n = models * gold.len() as f64;
    Ok(Decomposition {
        loss: loss / n,
        variance_model_first: model_first / n,
        variance_exact: exact / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimateSettings {
    /// Number of splits per repetition.
    pub k: usize,
    /// Number of repetitions with fresh splits.
    pub reps: usize,
    pub truncation: usize,
    pub seed: u64,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        EstimateSettings {
            k: 4,
            reps: 1,
            truncation: TRUNCATION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasVarReport {
    pub decomposition: Decomposition,
    pub settings: EstimateSettings,
    /// Seeds handed to each fitted model, in split order.
    pub model_seeds: Vec<u64>,
    pub points: usize,
}

impl BiasVarReport {
    pub fn loss(&self) -> f64 {
        self.decomposition.loss
    }

    pub fn variance(&self, order: KlOrder) -> f64 {
        self.decomposition.variance(order)
    }

    pub fn bias2(&self, order: KlOrder) -> f64 {
        self.decomposition.bias2(order)
    }

    /// Set when subtracting the variance left a negative remainder.
    pub fn negative_bias(&self, order: KlOrder) -> bool {
        self.bias2(order) < 0.0
    }
}

/// One model to fit: its training subset and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitJob {
    pub rep: usize,
    pub part: usize,
    pub corpus: ParallelCorpus,
    pub seed: u64,
}

/// The `reps · k` training subsets and model seeds of the estimator, in
/// aggregation order. For each repetition the corpus is shuffled and cut
/// into `k` equal parts.
pub fn plan_splits(corpus: &ParallelCorpus, settings: &EstimateSettings) -> Result<Vec<SplitJob>> {
    if settings.reps == 0 {
        return Err(Error::invalid("at least one repetition is required"));
    }
    let mut jobs = Vec::with_capacity(settings.k * settings.reps);
    for rep in 0..settings.reps {
        let split_seed = rng::substream_seed(settings.seed, &format!("biasvar.split.{rep}"));
        for (part, sub) in split_equal(corpus, settings.k, split_seed)?.into_iter().enumerate() {
            jobs.push(SplitJob {
                rep,
                part,
                corpus: sub,
                seed: rng::substream_seed(settings.seed, &format!("biasvar.model.{rep}.{part}")),
            });
        }
    }
    Ok(jobs)
}

/// Aggregates per-model predictions (aligned with `plan_splits`) into a report.
pub fn assemble_report(
    jobs: &[SplitJob],
    predictions: &[Vec<Vec<f64>>],
    points: &[TestPoint],
    settings: &EstimateSettings,
) -> Result<BiasVarReport> {
    if points.is_empty() {
        return Err(Error::Empty("test points"));
    }
    if predictions.len() != jobs.len() {
        return Err(Error::ShapeMismatch {
            op: "assemble_report",
            left: vec![predictions.len()],
            right: vec![jobs.len()],
        });
    }
    if let Some(bad) = predictions.iter().find(|d| d.len() != points.len()) {
        return Err(Error::ShapeMismatch {
            op: "assemble_report",
            left: vec![bad.len()],
            right: vec![points.len()],
        });
    }
    let gold: Vec<TokenId> = points.iter().map(|p| p.gold).collect();
    Ok(BiasVarReport {
        decomposition: decompose(predictions, &gold, settings.truncation)?,
        settings: *settings,
        model_seeds: jobs.iter().map(|j| j.seed).collect(),
        points: points.len(),
    })
}

/// Runs the split-and-refit estimator sequentially.
///
/// `fit(part, seed)` trains one model on a part and returns its next-token
/// distribution at every test point, in order. Aggregation is a fold in split
/// order, so the result depends only on the seeds.
pub fn estimate_bias_variance<F>(
    corpus: &ParallelCorpus,
    points: &[TestPoint],
    settings: &EstimateSettings,
    mut fit: F,
) -> Result<BiasVarReport>
where
    F: FnMut(&ParallelCorpus, u64) -> Result<Vec<Vec<f64>>>,
{
    if points.is_empty() {
        return Err(Error::Empty("test points"));
    }
    let jobs = plan_splits(corpus, settings)?;
    let mut predictions = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let dists = fit(&job.corpus, job.seed)?;
        if dists.len() != points.len() {
            return Err(Error::ShapeMismatch {
                op: "estimate_bias_variance",
                left: vec![dists.len()],
                right: vec![points.len()],
            });
        }
        predictions.push(dists);
    }
    assemble_report(&jobs, &predictions, points, settings)
}

/// Population variance of `f(z)` and of the mean of `k` i.i.d. draws of
/// `f(z)`, where `z` takes index `i` with probability `weights[i]` and
/// `f(z) = values[i]`.
///
/// Each trial draws `k` samples; the single-draw estimate uses the first, so
/// the two coincide exactly when `k = 1`.
pub fn mc_variance_check(values: &[f64], weights: &[f64], k: usize, trials: usize, seed: u64) -> Result<(f64, f64)> {
    if k == 0 || trials == 0 {
        return Err(Error::invalid("k and the number of trials must be positive"));
    }
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "mc_variance_check",
            left: vec![values.len()],
            right: vec![weights.len()],
        });
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::invalid("weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("weights must not all be zero"));
    }
    let mut cdf = Vec::with_capacity(weights.len());
    let mut acc = 0.0;
    for w in weights {
        acc += w / total;
        cdf.push(acc);
    }
    let mut rng = rng::substream(seed, "mc");
    let mut draw = || {
        let u: f64 = rng.gen();
        let i = cdf.partition_point(|c| *c <= u).min(values.len() - 1);
        values[i]
    };
    let mut single = Vec::with_capacity(trials);
    let mut means = Vec::with_capacity(trials);
    for _ in 0..trials {
        let first = draw();
        let mut sum = first;
        for _ in 1..k {
            sum += draw();
        }
        single.push(first);
        means.push(sum / k as f64);
    }
    Ok((population_variance(&single), population_variance(&means)))
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}
