//! The three experiment scenarios: low resource, plug-and-play and high
//! resource.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmlab_core::corpus::{build_vocab, split_equal, ParallelCorpus, Vocab};
use tmlab_core::retrieval::RetrievalIndex;
use tmlab_core::rng::substream_seed;

use crate::error::{CliError, Context, Result};
use crate::manifest::RunRecord;
use crate::report::{num, Table};
use crate::systems::{evaluate, train_systems, System, SystemSettings};
use crate::{checkpoint, formats, fsio, threads};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Train and index on the first of `parts` equal subsets only.
    LowResource,
    /// Train on the first subset, then grow the index subset by subset with
    /// the trained models frozen.
    PlugAndPlay,
    /// Train and index on everything.
    HighResource,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::LowResource => "low_resource",
            Scenario::PlugAndPlay => "plug_and_play",
            Scenario::HighResource => "high_resource",
        }
    }
}

/// An experiment description. Relative paths are resolved against the
/// directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Must match the subcommand when given.
    #[serde(default)]
    pub scenario: Option<Scenario>,
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    /// Built from the training and validation files when absent.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_systems")]
    pub systems: Vec<System>,
    #[serde(default = "default_parts")]
    pub parts: usize,
    #[serde(default)]
    pub settings: SystemSettings,
}

fn default_systems() -> Vec<System> {
    System::ALL.to_vec()
}

fn default_parts() -> usize {
    4
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::usage(format!("{origin}: {e}")))
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self, scenario: Scenario) -> Result<()> {
        if let Some(s) = self.scenario {
            if s != scenario {
                return Err(CliError::usage(format!(
                    "config is for scenario {} but {} was requested",
                    s.as_str(),
                    scenario.as_str()
                )));
            }
        }
        if self.systems.is_empty() {
            return Err(CliError::usage("no systems selected"));
        }
        let mut sorted = self.systems.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.systems.len() {
            return Err(CliError::usage("systems are listed twice"));
        }
        if self.parts == 0 {
            return Err(CliError::usage("parts must be at least 1"));
        }
        if self.seed > i64::MAX as u64 {
            return Err(CliError::usage("seed must fit in 63 bits"));
        }
        Ok(())
    }

    fn resolve(&mut self, base: &Path) {
        for p in [&mut self.train, &mut self.valid, &mut self.test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(v) = self.vocab.as_mut().filter(|v| v.is_relative()) {
            *v = base.join(&*v);
        }
    }
}

/// One results row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub stage: String,
    pub system: System,
    pub bleu: f64,
    pub ppl: f64,
}

pub fn results_table(rows: &[Row]) -> Table {
    let mut t = Table::new(&["stage", "mode", "bleu", "ppl"]);
    for r in rows {
        t.push(vec![r.stage.clone(), r.system.as_str().into(), num(r.bleu, 4), num(r.ppl, 6)]);
    }
    t
}

struct Data {
    vocab: Vocab,
    train: ParallelCorpus,
    valid: ParallelCorpus,
    test: ParallelCorpus,
}

fn load_data(cfg: &ExperimentConfig, record: &mut RunRecord) -> Result<Data> {
    let train_raw = formats::load_tsv(&cfg.train)?;
    let valid_raw = formats::load_tsv(&cfg.valid)?;
    let test_raw = formats::load_tsv(&cfg.test)?;
    for p in [&cfg.train, &cfg.valid, &cfg.test] {
        record.input(p);
    }
    let vocab = match &cfg.vocab {
        Some(p) => {
            record.input(p);
            formats::load_vocab(p)?
        }
        None => {
            let all: Vec<_> = train_raw.iter().chain(&valid_raw).cloned().collect();
            build_vocab(&all, 1)?
        }
    };
    let enc = |raw: &[_], p: &Path| ParallelCorpus::from_raw(raw, &vocab).context(p.display());
    Ok(Data {
        train: enc(&train_raw, &cfg.train)?,
        valid: enc(&valid_raw, &cfg.valid)?,
        test: enc(&test_raw, &cfg.test)?,
        vocab,
    })
}

/// Runs `scenario`, writing `results.csv` and per-system checkpoints into
/// `out_dir`. Returns the result rows.
pub fn run(scenario: Scenario, config_path: &Path, out_dir: &Path, record: &mut RunRecord) -> Result<Vec<Row>> {
    let text = fsio::read_string(config_path)?;
    let mut cfg = ExperimentConfig::parse(&text, &config_path.display().to_string())?;
    cfg.validate(scenario)?;
    cfg.resolve(config_path.parent().unwrap_or(Path::new("")));
    record.input(config_path);
    record.seed = Some(cfg.seed);
    record.config_hash = Some(fsio::sha256_hex(text.as_bytes()));

    let data = load_data(&cfg, record)?;
    cfg.settings.validate(data.vocab.len())?;
    let workers = threads::worker_count();
    let parts = if scenario == Scenario::HighResource {
        vec![data.train.clone()]
    } else {
        split_equal(&data.train, cfg.parts, substream_seed(cfg.seed, "experiment.split"))?
    };
    let train_set = &parts[0];
    let train_index = RetrievalIndex::build(train_set)?;
    let trained = train_systems(
        &cfg.systems,
        &cfg.settings,
        &data.vocab,
        train_set,
        &train_index,
        Some(&data.valid),
        substream_seed(cfg.seed, "experiment.train"),
        workers,
    )?;

    let ckpt_dir = out_dir.join("checkpoints");
    for t in &trained {
        let path = ckpt_dir.join(format!("{}.tmlab", t.system.as_str()));
        checkpoint::save_checkpoint(&path, &t.checkpoint)?;
        record.output(&path);
        if let Some(w) = &t.weightnet {
            let path = ckpt_dir.join(format!("{}.weightnet.tmlab", t.system.as_str()));
            checkpoint::save_weightnet(&path, w)?;
            record.output(&path);
        }
    }

    let stages: Vec<(String, RetrievalIndex)> = match scenario {
        Scenario::HighResource => vec![("full".into(), train_index)],
        Scenario::LowResource => vec![(format!("1/{}", cfg.parts), train_index)],
        Scenario::PlugAndPlay => {
            let mut out = vec![(format!("1/{}", cfg.parts), train_index)];
            for s in 2..=cfg.parts {
                let refs: Vec<&ParallelCorpus> = parts[..s].iter().collect();
                let store = ParallelCorpus::union(&refs)?;
                out.push((format!("{s}/{}", cfg.parts), RetrievalIndex::build(&store)?));
            }
            out
        }
    };
    let mut rows = Vec::new();
    for (stage, index) in &stages {
        for t in &trained {
            let s = evaluate(t, &cfg.settings, &data.test, index, workers).context(format!("evaluating {} at stage {stage}", t.system.as_str()))?;
            rows.push(Row {
                stage: stage.clone(),
                system: t.system,
                bleu: s.bleu,
                ppl: s.ppl,
            });
        }
    }
    let csv = out_dir.join("results.csv");
    results_table(&rows).save(&csv)?;
    record.output(&csv);
    Ok(rows)
}
