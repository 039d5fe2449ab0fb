//! The compared systems and the shared train/evaluate plumbing used by the
//! experiment harness and the bias-variance command.

use serde::{Deserialize, Serialize};
use tmlab_core::corpus::{ParallelCorpus, Vocab};
use tmlab_core::ensemble::{finetune_weighted, translate, FinetuneConfig, Mode, Predictor, Strategy};
use tmlab_core::eval::{corpus_bleu, token_ce, MemorySource};
use tmlab_core::model::{memories_for, train, Arch, Checkpoint, ModelConfig, TrainConfig, TrainMode};
use tmlab_core::ensemble::WeightNet;
use tmlab_core::retrieval::RetrievalIndex;
use tmlab_core::rng::substream_seed;

use crate::error::{CliError, Context, Result};
use crate::threads;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    /// Plain transformer, no memories.
    Vanilla,
    /// Dual encoder trained and decoded with the top-k memories jointly.
    TmBase,
    /// Single-memory model decoded with the best memory.
    TmSingle,
    /// Single-memory model, uniform ensemble over k memories.
    TmAverage,
    /// Single-memory model fine-tuned with a weighting network.
    TmWeight,
}

impl System {
    pub const ALL: [System; 5] = [System::Vanilla, System::TmBase, System::TmSingle, System::TmAverage, System::TmWeight];

    pub fn as_str(self) -> &'static str {
        match self {
            System::Vanilla => "vanilla",
            System::TmBase => "tm_base",
            System::TmSingle => "tm_single",
            System::TmAverage => "tm_average",
            System::TmWeight => "tm_weight",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        System::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| CliError::usage(format!("unknown system {s:?} (expected one of vanilla, tm_base, tm_single, tm_average, tm_weight)")))
    }

    fn backbone(self) -> Backbone {
        match self {
            System::Vanilla => Backbone::Vanilla,
            System::TmBase => Backbone::Joint,
            System::TmSingle | System::TmAverage => Backbone::Multi,
            System::TmWeight => Backbone::Weighted,
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            System::Vanilla | System::TmBase => Mode::Base,
            System::TmSingle => Mode::Single,
            System::TmAverage => Mode::Average,
            System::TmWeight => Mode::Weighted,
        }
    }

    /// Memories retrieved per sentence at inference.
    pub fn memories(self, topk: usize) -> usize {
        match self {
            System::Vanilla => 0,
            System::TmSingle => 1,
            _ => topk,
        }
    }
}

/// Partial model hyperparameters; unset fields keep the desk-scale defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub src_layers: Option<usize>,
    pub mem_layers: Option<usize>,
    pub dec_layers: Option<usize>,
    pub dropout: Option<f64>,
    pub max_len: Option<usize>,
}

impl ModelOverrides {
    pub fn config(&self, arch: Arch, vocab_len: usize) -> ModelConfig {
        let mut c = ModelConfig::new(arch, vocab_len);
        let set = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v;
            }
        };
        set(&mut c.d_model, self.d_model);
        set(&mut c.n_heads, self.n_heads);
        set(&mut c.ffn_dim, self.ffn_dim);
        set(&mut c.src_layers, self.src_layers);
        set(&mut c.mem_layers, self.mem_layers);
        set(&mut c.dec_layers, self.dec_layers);
        set(&mut c.max_len, self.max_len);
        if let Some(d) = self.dropout {
            c.dropout = d;
        }
        c
    }
}

/// How every system is trained and decoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSettings {
    pub model: ModelOverrides,
    /// Used for the vanilla and joint top-k backbones.
    pub train: TrainConfig,
    /// Epochs of the single-memory backbone, which sees every pair six times
    /// per epoch. Defaults to a third of `train.epochs`, rounded up.
    pub single_multi_epochs: Option<usize>,
    pub finetune: FinetuneConfig,
    /// Memories per sentence for the joint and ensemble systems.
    pub topk: usize,
    /// Beam width; 1 is greedy decoding.
    pub beam: usize,
}

impl Default for SystemSettings {
    fn default() -> Self {
        SystemSettings {
            model: ModelOverrides::default(),
            train: TrainConfig::default(),
            single_multi_epochs: None,
            finetune: FinetuneConfig::default(),
            topk: 5,
            beam: 1,
        }
    }
}

impl SystemSettings {
    pub fn validate(&self, vocab_len: usize) -> Result<()> {
        if self.topk == 0 || self.beam == 0 {
            return Err(CliError::usage("topk and beam must be at least 1"));
        }
        if self.train.epochs == 0 || self.single_multi_epochs == Some(0) {
            return Err(CliError::usage("epochs must be at least 1"));
        }
        self.model
            .config(Arch::DualEnc, vocab_len)
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))
    }

    fn strategy(&self) -> Strategy {
        if self.beam <= 1 {
            Strategy::Greedy
        } else {
            Strategy::Beam(self.beam)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Backbone {
    Vanilla,
    Joint,
    Multi,
    Weighted,
}

impl Backbone {
    fn name(self) -> &'static str {
        match self {
            Backbone::Vanilla => "vanilla",
            Backbone::Joint => "joint",
            Backbone::Multi => "single_multi",
            Backbone::Weighted => "weighted",
        }
    }
}

/// A trained system, ready for inference.
#[derive(Debug, Clone)]
pub struct Trained {
    pub system: System,
    pub checkpoint: Checkpoint,
    pub weightnet: Option<WeightNet<f32>>,
}

impl Trained {
    pub fn predictor(&self) -> Result<Predictor> {
        Ok(Predictor::new(
            self.checkpoint.model.cast(),
            self.weightnet.as_ref().map(|w| w.cast()),
        )?)
    }
}

fn train_backbone(
    b: Backbone,
    settings: &SystemSettings,
    vocab: &Vocab,
    corpus: &ParallelCorpus,
    index: &RetrievalIndex,
    seed: u64,
) -> Result<Checkpoint> {
    let (arch, mode, epochs) = match b {
        Backbone::Vanilla => (Arch::Vanilla, TrainMode::None, settings.train.epochs),
        Backbone::Joint => (Arch::DualEnc, TrainMode::Topk(settings.topk), settings.train.epochs),
        _ => (
            Arch::DualEnc,
            TrainMode::SingleMulti,
            settings.single_multi_epochs.unwrap_or(settings.train.epochs.div_ceil(3)),
        ),
    };
    let config = settings.model.config(arch, vocab.len());
    let tc = TrainConfig {
        mode,
        epochs,
        ..settings.train.clone()
    };
    let idx = (mode != TrainMode::None).then_some(index);
    let (ckpt, _) = train(config, corpus, vocab.fingerprint(), idx, &tc, substream_seed(seed, b.name()))
        .context(format!("training the {} backbone", b.name()))?;
    Ok(ckpt)
}

/// Trains what `systems` need on `corpus`, with `index` as the training-time
/// memory store; systems sharing a backbone share one trained model. The
/// weighted system is fine-tuned on `valid`.
pub fn train_systems(
    systems: &[System],
    settings: &SystemSettings,
    vocab: &Vocab,
    corpus: &ParallelCorpus,
    index: &RetrievalIndex,
    valid: Option<&ParallelCorpus>,
    seed: u64,
    workers: usize,
) -> Result<Vec<Trained>> {
    let mut needed: Vec<Backbone> = systems
        .iter()
        .map(|s| match s.backbone() {
            Backbone::Weighted => Backbone::Multi,
            b => b,
        })
        .collect();
    needed.sort();
    needed.dedup();
    let trained = threads::par_map(&needed, workers, |b| train_backbone(*b, settings, vocab, corpus, index, seed));
    let mut by_backbone = Vec::new();
    for (b, r) in needed.iter().zip(trained) {
        by_backbone.push((*b, r?));
    }
    let find = |b: Backbone| by_backbone.iter().find(|(x, _)| *x == b).map(|(_, c)| c.clone()).expect("trained");
    let mut weighted = None;
    let mut out = Vec::new();
    for &system in systems {
        let t = match system.backbone() {
            Backbone::Weighted => {
                if weighted.is_none() {
                    let valid = valid.ok_or_else(|| CliError::usage("tm_weight needs a validation corpus"))?;
                    let fc = FinetuneConfig {
                        k: settings.topk,
                        ..settings.finetune.clone()
                    };
                    let r = finetune_weighted(&find(Backbone::Multi), valid, index, &fc, substream_seed(seed, "finetune"))
                        .context("fine-tuning the weighting network")?;
                    weighted = Some((r.checkpoint, r.weightnet));
                }
                let (c, w) = weighted.clone().expect("set above");
                Trained {
                    system,
                    checkpoint: c,
                    weightnet: Some(w),
                }
            }
            b => Trained {
                system,
                checkpoint: find(b),
                weightnet: None,
            },
        };
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub bleu: f64,
    pub ppl: f64,
}

/// BLEU of decoded `test` sources and teacher-forced perplexity, with
/// memories retrieved from `index`.
pub fn evaluate(t: &Trained, settings: &SystemSettings, test: &ParallelCorpus, index: &RetrievalIndex, workers: usize) -> Result<Scores> {
    let pred = t.predictor()?;
    let k = t.system.memories(settings.topk);
    let mode = t.system.mode();
    let strategy = settings.strategy();
    let hyps = threads::par_map(test.pairs(), workers, |p| {
        translate(&pred, mode, &p.source, Some(index), k, strategy).map(|h| h.tokens)
    });
    let hyps = hyps.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    let refs: Vec<Vec<u32>> = test.pairs().iter().map(|p| p.target.0.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?.score;
    let source = (k > 0).then_some(MemorySource {
        index,
        k,
        exclude_self: false,
    });
    let ce = token_ce(&pred, mode, test, source)?;
    Ok(Scores {
        bleu,
        ppl: ce.perplexity(),
    })
}

/// Next-token distributions at every target position of `test`, EOS
/// included, in corpus order.
pub fn predictions(t: &Trained, settings: &SystemSettings, test: &ParallelCorpus, index: &RetrievalIndex) -> Result<Vec<Vec<f64>>> {
    let pred = t.predictor()?;
    let k = t.system.memories(settings.topk);
    let mut out = Vec::new();
    for pair in test.pairs() {
        let mems = if k > 0 { memories_for(index, &pair.source, k, None)? } else { Vec::new() };
        let prepared = pred.prepare(t.system.mode(), &pair.source, &mems)?;
        out.extend(pred.score_rows(&prepared, &pair.target)?);
    }
    Ok(out)
}
