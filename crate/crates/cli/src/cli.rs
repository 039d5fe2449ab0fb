//! Command-line definitions.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Seeds are capped at 63 bits so they round-trip through TOML manifests.
fn seed_parser() -> clap::builder::RangedU64ValueParser<u64> {
    clap::value_parser!(u64).range(..=i64::MAX as u64)
}

#[derive(Debug, Parser)]
#[command(name = "tmlab", version, about = "Translation-memory augmented NMT laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Create, inspect and split parallel corpora.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Build retrieval indexes.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Retrieve the top-k translation memories for each input sentence.
    Retrieve(RetrieveArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Fine-tune a single-memory checkpoint with a weighting network.
    FinetuneWeight(FinetuneArgs),
    /// Translate sentences with a trained model.
    Translate(TranslateArgs),
    /// Score translations or models.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Estimate the bias-variance decomposition of a system by refitting on splits.
    Biasvar(BiasvarArgs),
    /// Run one of the experiment scenarios.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Re-execute a command from its run manifest and verify the outputs are byte-identical.
    Rerun(RerunArgs),
}

#[derive(Debug, Subcommand)]
pub enum CorpusCmd {
    /// Generate a synthetic templated parallel corpus.
    Synth(SynthArgs),
    /// Print corpus statistics.
    Stats(StatsArgs),
    /// Shuffle and cut a corpus into equal parts.
    Split(SplitArgs),
    /// Build a vocabulary file from corpora.
    Vocab(VocabArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of sentence pairs.
    #[arg(long, default_value_t = 1000)]
    pub pairs: usize,
    /// Number of sentence templates.
    #[arg(long, default_value_t = 40)]
    pub templates: usize,
    /// Number of slot-filler words.
    #[arg(long, default_value_t = 30)]
    pub lexicon: usize,
    #[arg(long, default_value_t = 0, value_parser = seed_parser())]
    pub seed: u64,
    /// Output TSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Template id per pair [default: <out>.templates.tsv].
    #[arg(long)]
    pub templates_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// Input TSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Write the statistics here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// Input TSV.
    #[arg(long)]
    pub input: PathBuf,
    /// Number of parts.
    #[arg(long, default_value_t = 4)]
    pub parts: usize,
    #[arg(long, default_value_t = 0, value_parser = seed_parser())]
    pub seed: u64,
    /// Directory for part1.tsv, part2.tsv, ...
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct VocabArgs {
    /// Input TSV files (repeatable).
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Drop tokens seen fewer times than this.
    #[arg(long, default_value_t = 1)]
    pub min_freq: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum IndexCmd {
    /// Index a TSV corpus for fuzzy-match retrieval.
    Build(IndexBuildArgs),
}

#[derive(Debug, Args)]
pub struct IndexBuildArgs {
    /// Corpus to index (TSV).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Query sentences, one per line (the first column of a TSV).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    /// Skip the entry whose pair id equals the query's line number.
    #[arg(long)]
    pub exclude_self: bool,
    /// Output: per query, `query_id` then `pair_id similarity source target` per hit, TAB separated.
    #[arg(long)]
    pub out: PathBuf,
}

/// Model hyperparameter flags; they override the config file.
#[derive(Debug, Args, Default)]
pub struct ModelFlags {
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub ffn_dim: Option<usize>,
    /// Layers in every encoder and in the decoder.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training TSV.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// vanilla, single_enc or dual_enc.
    #[arg(long, default_value = "dual_enc")]
    pub arch: String,
    /// Memory attachment: none, topk or single_multi [default: none for vanilla, topk otherwise].
    #[arg(long)]
    pub mode: Option<String>,
    /// Memories per pair in topk mode.
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    /// Memory store for training [default: an index over the training corpus].
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// TOML file with optional [model] and [train] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long, default_value_t = 0, value_parser = seed_parser())]
    pub seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch training log (CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Single-memory dual-encoder checkpoint.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Validation TSV; 90% trains, 10% selects the checkpoint.
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub index: PathBuf,
    /// TOML file with an optional [finetune] table.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Memories per sentence.
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long, default_value_t = 0, value_parser = seed_parser())]
    pub seed: u64,
    /// Fine-tuned backbone checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Weighting-network checkpoint.
    #[arg(long)]
    pub weightnet_out: PathBuf,
    /// Held-out loss curve (CSV).
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

/// Model, memory and ensemble selection shared by translate and eval ppl.
#[derive(Debug, Args)]
pub struct InferenceFlags {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// base, single, average or weighted.
    #[arg(long, default_value = "base")]
    pub mode: String,
    /// Memories per sentence.
    #[arg(long, default_value_t = 5)]
    pub topk: usize,
    /// Memory store; without it no memories are used.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Weighting network for the weighted mode.
    #[arg(long)]
    pub weightnet: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[command(flatten)]
    pub inference: InferenceFlags,
    /// Source sentences, one per line (the first column of a TSV).
    #[arg(long)]
    pub input: PathBuf,
    /// Beam width; 1 is greedy decoding.
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    /// Append the mean log-probability per token after a TAB.
    #[arg(long)]
    pub scores: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCmd {
    /// Corpus BLEU of hypotheses against references.
    Bleu(BleuArgs),
    /// Teacher-forced perplexity of a model on a TSV corpus.
    Ppl(PplArgs),
}

#[derive(Debug, Args)]
pub struct BleuArgs {
    /// Hypotheses, one per line.
    #[arg(long)]
    pub hyp: PathBuf,
    /// References, one per line (the second column of a TSV).
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PplArgs {
    #[command(flatten)]
    pub inference: InferenceFlags,
    /// Test TSV.
    #[arg(long)]
    pub test: PathBuf,
    /// Skip each pair's own index entry (for corpora that are in the index).
    #[arg(long)]
    pub exclude_self: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BiasvarArgs {
    /// Corpus that is split into `--splits` training subsets.
    #[arg(long)]
    pub train: PathBuf,
    /// Test TSV; every target position is a test point.
    #[arg(long)]
    pub test: PathBuf,
    /// Validation TSV (needed by tm_weight).
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long)]
    pub vocab: PathBuf,
    /// vanilla, tm_base, tm_single, tm_average or tm_weight.
    #[arg(long)]
    pub system: String,
    /// TOML file with system settings ([model], [train], [finetune], topk, ...).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 4)]
    pub splits: usize,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Keep this many most probable tokens when averaging distributions.
    #[arg(long, default_value_t = 100)]
    pub truncate: usize,
    #[arg(long, default_value_t = 0, value_parser = seed_parser())]
    pub seed: u64,
    /// Key/value report (TOML).
    #[arg(long)]
    pub out: PathBuf,
    /// Flat CSV: model, variant, loss, variance, bias2.
    #[arg(long)]
    pub csv: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum ExperimentCmd {
    /// Train and index on the first of four equal subsets.
    LowResource(ExperimentArgs),
    /// Train on the first subset, then grow the memory store subset by subset.
    PlugAndPlay(ExperimentArgs),
    /// Train and index on the whole training corpus.
    HighResource(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Receives results.csv and checkpoints/.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}
