//! Transformer translation models: a vanilla encoder-decoder, a single-encoder
//! variant reading the source concatenated with its memories, and a
//! dual-encoder variant with a copy distribution over memory tokens mixed in by
//! a learned gate.

mod batch;
mod forward;
mod train;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::retrieval::TmPair;
use crate::rng;

pub use batch::{Batch, MemBatch, MemLayout, MemToken};
pub use forward::{gate_and_mix, Output, TmOut};
pub use train::{
    memories_for, train, Checkpoint, EpochStats, RetrievalSettings, TrainConfig, TrainLog, TrainMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Vanilla,
    SingleEnc,
    DualEnc,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Vanilla => "vanilla",
            Arch::SingleEnc => "single_enc",
            Arch::DualEnc => "dual_enc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Arch::Vanilla),
            "single_enc" => Ok(Arch::SingleEnc),
            "dual_enc" => Ok(Arch::DualEnc),
            other => Err(Error::invalid(format!(
                "unknown architecture {other:?} (expected vanilla, single_enc or dual_enc)"
            ))),
        }
    }
}

/// Model hyperparameters.
///
/// Defaults are desk scale. The full-scale reference configuration is
/// `d_model = 512`, `n_heads = 8`, `ffn_dim = 2048`, six source-encoder layers,
/// four memory-encoder layers and six decoder layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Output vocabulary, including the separator slot for `single_enc`.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub src_layers: usize,
    pub mem_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults for a vocabulary of `vocab_len` entries.
    pub fn new(arch: Arch, vocab_len: usize) -> Self {
        let vocab_size = if arch == Arch::SingleEnc { vocab_len + 1 } else { vocab_len };
        ModelConfig {
            arch,
            vocab_size,
            d_model: 64,
            n_heads: 4,
            ffn_dim: 256,
            src_layers: 2,
            mem_layers: 2,
            dec_layers: 2,
            dropout: 0.1,
            max_len: 160,
        }
    }

    /// Vocabulary size of the token vocabulary the model was built for.
    pub fn vocab_len(&self) -> usize {
        if self.arch == Arch::SingleEnc {
            self.vocab_size - 1
        } else {
            self.vocab_size
        }
    }

    /// Separator between the source and memories in `single_enc` inputs.
    pub fn sep(&self) -> Option<u32> {
        (self.arch == Arch::SingleEnc).then(|| (self.vocab_size - 1) as u32)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.ffn_dim == 0 || self.max_len < 2 || self.vocab_size < 5 {
            return bad(format!(
                "ffn_dim, max_len and vocab_size too small ({}, {}, {})",
                self.ffn_dim, self.max_len, self.vocab_size
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.arch == Arch::DualEnc && self.mem_layers == 0 {
            return bad("dual_enc needs at least one memory-encoder layer".into());
        }
        Ok(())
    }
}

/// A retrieved memory as seen by the model.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Memory {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl From<&TmPair> for Memory {
    fn from(p: &TmPair) -> Self {
        Memory {
            source: p.source.0.clone(),
            target: p.target.0.clone(),
        }
    }
}

/// One training or scoring instance. `target` excludes BOS and EOS.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Example {
    pub source: Vec<u32>,
    pub memories: Vec<Memory>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct AttnIds {
    pub q: ParamId,
    pub kv: ParamId,
    pub bq: ParamId,
    pub bkv: ParamId,
    pub o: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerIds {
    pub ln1: (ParamId, ParamId),
    pub self_attn: AttnIds,
    pub ln_cross: Option<(ParamId, ParamId)>,
    pub cross_attn: Option<AttnIds>,
    pub ln2: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct TmHeadIds {
    pub segment: ParamId,
    pub w_tm: ParamId,
    pub w_h: ParamId,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Weights {
    pub embed: ParamId,
    pub src: Vec<LayerIds>,
    pub src_ln: (ParamId, ParamId),
    pub mem: Vec<LayerIds>,
    pub mem_ln: Option<(ParamId, ParamId)>,
    pub dec: Vec<LayerIds>,
    pub dec_ln: (ParamId, ParamId),
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub tm: Option<TmHeadIds>,
}

/// Parameters plus the layout that gives them meaning.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub(crate) w: Weights,
    pub(crate) positions: Vec<f64>,
}

struct Builder<'a, T: Scalar> {
    store: ParamStore<T>,
    rng: &'a mut rng::Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let t = ParamStore::xavier(fan_in, fan_out, self.rng);
        self.store.add(name, t)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    fn ones(&mut self, name: String, n: usize) -> ParamId {
        self.store.add(name, Tensor::from_parts(alloc::vec![n], alloc::vec![T::ONE; n]))
    }

    fn ln(&mut self, prefix: &str, d: usize) -> (ParamId, ParamId) {
        (self.ones(format!("{prefix}.gamma"), d), self.zeros(format!("{prefix}.beta"), &[d]))
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.xavier(format!("{prefix}.q.w"), d, d),
            kv: self.xavier(format!("{prefix}.kv.w"), d, 2 * d),
            bq: self.zeros(format!("{prefix}.q.b"), &[d]),
            bkv: self.zeros(format!("{prefix}.kv.b"), &[2 * d]),
            o: self.xavier(format!("{prefix}.o.w"), d, d),
            bo: self.zeros(format!("{prefix}.o.b"), &[d]),
        }
    }

    fn layer(&mut self, prefix: &str, c: &ModelConfig, cross: bool) -> LayerIds {
        let d = c.d_model;
        LayerIds {
            ln1: self.ln(&format!("{prefix}.ln1"), d),
            self_attn: self.attn(&format!("{prefix}.self"), d),
            ln_cross: cross.then(|| self.ln(&format!("{prefix}.ln_cross"), d)),
            cross_attn: cross.then(|| self.attn(&format!("{prefix}.cross"), d)),
            ln2: self.ln(&format!("{prefix}.ln2"), d),
            ff1: (
                self.xavier(format!("{prefix}.ff1.w"), d, c.ffn_dim),
                self.zeros(format!("{prefix}.ff1.b"), &[c.ffn_dim]),
            ),
            ff2: (
                self.xavier(format!("{prefix}.ff2.w"), c.ffn_dim, d),
                self.zeros(format!("{prefix}.ff2.b"), &[d]),
            ),
        }
    }
}

fn sinusoid_table(max_len: usize, d: usize) -> Vec<f64> {
    let mut t = alloc::vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d / 2 {
            let freq = libm::pow(10_000.0, -2.0 * i as f64 / d as f64);
            let a = pos as f64 * freq;
            t[pos * d + 2 * i] = libm::sin(a);
            t[pos * d + 2 * i + 1] = libm::cos(a);
        }
    }
    t
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized parameters drawn from the `init` substream of `seed`.
    ///
    /// The output projection starts at zero, so an untrained model predicts the
    /// uniform distribution.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::substream(seed, "init");
        let d = config.d_model;
        let v = config.vocab_size;
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let bound = libm::sqrt(3.0 / d as f64);
        let embed = {
            let t = ParamStore::uniform(&[v, d], bound, b.rng);
            b.store.add("embed", t)
        };
        let src = (0..config.src_layers).map(|i| b.layer(&format!("src.{i}"), &config, false)).collect();
        let src_ln = b.ln("src.ln", d);
        let dual = config.arch == Arch::DualEnc;
        let mem = if dual {
            (0..config.mem_layers).map(|i| b.layer(&format!("mem.{i}"), &config, false)).collect()
        } else {
            Vec::new()
        };
        let mem_ln = dual.then(|| b.ln("mem.ln", d));
        let dec = (0..config.dec_layers).map(|i| b.layer(&format!("dec.{i}"), &config, true)).collect();
        let dec_ln = b.ln("dec.ln", d);
        let out_w = b.zeros("out.w".into(), &[d, v]);
        let out_b = b.zeros("out.b".into(), &[v]);
        let tm = dual.then(|| {
            let segment = {
                let t = ParamStore::uniform(&[2, d], bound, b.rng);
                b.store.add("tm.segment", t)
            };
            TmHeadIds {
                segment,
                w_tm: b.xavier("tm.w_tm".into(), d, d),
                w_h: b.xavier("tm.w_h".into(), d, d),
                gate_w: b.xavier("tm.gate.w".into(), d, 1),
                gate_b: b.zeros("tm.gate.b".into(), &[1]),
            }
        });
        let w = Weights {
            embed,
            src,
            src_ln,
            mem,
            mem_ln,
            dec,
            dec_ln,
            out_w,
            out_b,
            tm,
        };
        let positions = sinusoid_table(config.max_len, d);
        Ok(Model {
            config,
            params: b.store,
            w,
            positions,
        })
    }

    /// The same architecture over another store with identical layout, such as a
    /// perturbed clone of `self.params`. Unlike [`Model::from_params`] the store
    /// is used as is, so gradients land on it.
    pub fn with_params(&self, params: ParamStore<T>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        Ok(Model {
            config: self.config.clone(),
            params,
            w: self.w.clone(),
            positions: self.positions.clone(),
        })
    }

    /// Rebuilds a model from a config and named parameters (e.g. a checkpoint).
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let mut model = Model::<T>::init(config, 0)?;
        if params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = String::from(model.params.name(id));
            let src = params
                .find(&name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
            model.params.set(id, params.get(src).clone())?;
        }
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            w: self.w.clone(),
            positions: self.positions.clone(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }
}

#[cfg(test)]
mod tests;
