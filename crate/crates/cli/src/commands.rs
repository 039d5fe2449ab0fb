//! Command implementations. Each one fills a [`RunRecord`] with the files it
//! read and wrote.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tmlab_core::biasvar::{assemble_report, plan_splits, EstimateSettings, KlOrder, TestPoint};
use tmlab_core::corpus::{build_vocab, split_equal, synth_task, tokenize, ParallelCorpus, RawPair, Vocab};
use tmlab_core::ensemble::{finetune_weighted, translate, FinetuneConfig, Mode, Predictor, Strategy};
use tmlab_core::eval::{corpus_bleu, token_ce, MemorySource};
use tmlab_core::model::{train, Arch, TrainConfig, TrainMode};
use tmlab_core::retrieval::{Exclusion, RetrievalIndex};

use crate::cli::*;
use crate::error::{CliError, Context, Result};
use crate::experiment::{self, Scenario};
use crate::manifest::{self, RunRecord};
use crate::report::{num, save_toml, to_toml, Table};
use crate::systems::{self, ModelOverrides, System, SystemSettings};
use crate::{checkpoint, formats, fsio, indexfile, threads};

fn toml_file<T: for<'de> Deserialize<'de>>(path: &Path, record: &mut RunRecord) -> Result<(T, String)> {
    let text = fsio::read_string(path)?;
    record.input(path);
    let value = toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok((value, text))
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(CliError::usage(format!("--{name} must be at least 1")));
    }
    Ok(())
}

fn load_vocab(path: &Path, record: &mut RunRecord) -> Result<Vocab> {
    record.input(path);
    formats::load_vocab(path)
}

fn load_corpus(path: &Path, vocab: &Vocab, record: &mut RunRecord) -> Result<ParallelCorpus> {
    record.input(path);
    formats::load_corpus(path, vocab)
}

fn load_index(path: &Path, vocab: &Vocab, record: &mut RunRecord) -> Result<RetrievalIndex> {
    record.input(path);
    let (index, fp) = indexfile::load_index(path)?;
    if fp != vocab.fingerprint() {
        return Err(CliError::data(format!(
            "{}: built with vocabulary {fp:016x}, but the given vocabulary is {:016x}",
            path.display(),
            vocab.fingerprint()
        )));
    }
    Ok(index)
}

fn lines_out(lines: &[String]) -> String {
    let mut s = String::new();
    for l in lines {
        s.push_str(l);
        s.push('\n');
    }
    s
}

fn write(path: &Path, bytes: &[u8], record: &mut RunRecord) -> Result<()> {
    fsio::atomic_write(path, bytes)?;
    record.output(path);
    Ok(())
}

fn primary(record: &mut RunRecord, path: &Path) {
    record.manifest = Some(manifest::default_path(path));
}

pub fn synth(a: &SynthArgs, record: &mut RunRecord) -> Result<()> {
    let task = synth_task(a.pairs, a.templates, a.lexicon, a.seed).map_err(|e| CliError::usage(e.to_string()))?;
    record.seed = Some(a.seed);
    write(&a.out, formats::render_tsv(&task.pairs).as_bytes(), record)?;
    let tpl = a.templates_out.clone().unwrap_or_else(|| {
        let mut n = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        n.push(".templates.tsv");
        a.out.with_file_name(n)
    });
    write(&tpl, formats::render_template_manifest(&task.template_ids).as_bytes(), record)?;
    primary(record, &a.out);
    Ok(())
}

#[derive(Debug, Serialize)]
struct Stats {
    pairs: usize,
    source_tokens: usize,
    target_tokens: usize,
    source_types: usize,
    target_types: usize,
    mean_source_len: f64,
    mean_target_len: f64,
    max_source_len: usize,
    max_target_len: usize,
}

fn stats_of(pairs: &[RawPair]) -> Stats {
    let mut st = Stats {
        pairs: pairs.len(),
        source_tokens: 0,
        target_tokens: 0,
        source_types: 0,
        target_types: 0,
        mean_source_len: 0.0,
        mean_target_len: 0.0,
        max_source_len: 0,
        max_target_len: 0,
    };
    let mut src_types = BTreeSet::new();
    let mut tgt_types = BTreeSet::new();
    for p in pairs {
        let s = tokenize(&p.source);
        let t = tokenize(&p.target);
        st.source_tokens += s.len();
        st.target_tokens += t.len();
        st.max_source_len = st.max_source_len.max(s.len());
        st.max_target_len = st.max_target_len.max(t.len());
        src_types.extend(s);
        tgt_types.extend(t);
    }
    st.source_types = src_types.len();
    st.target_types = tgt_types.len();
    if !pairs.is_empty() {
        st.mean_source_len = st.source_tokens as f64 / pairs.len() as f64;
        st.mean_target_len = st.target_tokens as f64 / pairs.len() as f64;
    }
    st
}

/// Returns the text to print when no output file is given.
pub fn stats(a: &StatsArgs, record: &mut RunRecord) -> Result<Option<String>> {
    record.input(&a.input);
    let text = to_toml(&stats_of(&formats::load_tsv(&a.input)?))?;
    match &a.out {
        Some(out) => {
            write(out, text.as_bytes(), record)?;
            primary(record, out);
            Ok(None)
        }
        None => Ok(Some(text)),
    }
}

pub fn split(a: &SplitArgs, record: &mut RunRecord) -> Result<()> {
    positive("parts", a.parts)?;
    record.input(&a.input);
    record.seed = Some(a.seed);
    let raw = formats::load_tsv(&a.input)?;
    // Split by line number: encode against the corpus' own vocabulary so
    // pair ids are line indices, then map the parts back to the raw lines.
    let vocab = build_vocab(&raw, 1)?;
    let corpus = ParallelCorpus::from_raw(&raw, &vocab)?;
    let parts = split_equal(&corpus, a.parts, a.seed).map_err(|e| CliError::usage(e.to_string()))?;
    for (i, part) in parts.iter().enumerate() {
        let lines: Vec<RawPair> = part.pairs().iter().map(|p| raw[p.pair_id as usize].clone()).collect();
        let path = a.out_dir.join(format!("part{}.tsv", i + 1));
        write(&path, formats::render_tsv(&lines).as_bytes(), record)?;
    }
    primary(record, &a.out_dir.join("split"));
    Ok(())
}

pub fn vocab(a: &VocabArgs, record: &mut RunRecord) -> Result<()> {
    if a.min_freq == 0 {
        return Err(CliError::usage("--min-freq must be at least 1"));
    }
    let mut raw = Vec::new();
    for p in &a.input {
        record.input(p);
        raw.extend(formats::load_tsv(p)?);
    }
    let v = build_vocab(&raw, a.min_freq)?;
    write(&a.out, formats::render_vocab(&v).as_bytes(), record)?;
    primary(record, &a.out);
    Ok(())
}

pub fn index_build(a: &IndexBuildArgs, record: &mut RunRecord) -> Result<()> {
    let vocab = load_vocab(&a.vocab, record)?;
    let corpus = load_corpus(&a.corpus, &vocab, record)?;
    let index = RetrievalIndex::build(&corpus)?;
    write(&a.out, &indexfile::encode_index(&index, vocab.fingerprint()), record)?;
    primary(record, &a.out);
    Ok(())
}

pub fn retrieve(a: &RetrieveArgs, record: &mut RunRecord) -> Result<()> {
    positive("topk", a.topk)?;
    let vocab = load_vocab(&a.vocab, record)?;
    let index = load_index(&a.index, &vocab, record)?;
    record.input(&a.input);
    let queries = formats::load_sources(&a.input)?;
    let mut lines = Vec::with_capacity(queries.len());
    for (q, text) in queries.iter().enumerate() {
        let x = vocab.encode_text(text);
        let exclusion = if a.exclude_self {
            Exclusion {
                pair_id: Some(q as u32),
                identical_source: false,
            }
        } else {
            Exclusion::NONE
        };
        let hits = index.retrieve_topk(&x, a.topk, exclusion).context(format!("query {q}"))?;
        let mut line = q.to_string();
        for h in hits {
            line.push_str(&format!(
                "\t{}\t{:.6}\t{}\t{}",
                h.pair_id,
                h.similarity,
                vocab.decode(&h.source),
                vocab.decode(&h.target)
            ));
        }
        lines.push(line);
    }
    write(&a.out, lines_out(&lines).as_bytes(), record)?;
    primary(record, &a.out);
    Ok(())
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelOverrides,
    train: TrainConfig,
}

fn parse_train_mode(s: &str, topk: usize) -> Result<TrainMode> {
    match s {
        "none" => Ok(TrainMode::None),
        "topk" => Ok(TrainMode::Topk(topk)),
        "single_multi" => Ok(TrainMode::SingleMulti),
        other => Err(CliError::usage(format!("unknown mode {other:?} (expected none, topk or single_multi)"))),
    }
}

pub fn train_cmd(a: &TrainArgs, record: &mut RunRecord) -> Result<()> {
    let arch = Arch::parse(&a.arch).map_err(|e| CliError::usage(e.to_string()))?;
    positive("topk", a.topk)?;
    let (mut file, text) = match &a.config {
        Some(p) => toml_file::<TrainFile>(p, record)?,
        None => (TrainFile::default(), String::new()),
    };
    let m = &a.model;
    let mo = &mut file.model;
    mo.d_model = m.d_model.or(mo.d_model);
    mo.n_heads = m.n_heads.or(mo.n_heads);
    mo.ffn_dim = m.ffn_dim.or(mo.ffn_dim);
    mo.dropout = m.dropout.or(mo.dropout);
    mo.max_len = m.max_len.or(mo.max_len);
    if let Some(l) = m.layers {
        mo.src_layers = Some(l);
        mo.mem_layers = Some(l);
        mo.dec_layers = Some(l);
    }
    let tc = &mut file.train;
    tc.epochs = a.epochs.unwrap_or(tc.epochs);
    tc.lr = a.lr.unwrap_or(tc.lr);
    tc.batch_size = a.batch_size.unwrap_or(tc.batch_size);
    tc.warmup = a.warmup.unwrap_or(tc.warmup);
    tc.mode = match &a.mode {
        Some(s) => parse_train_mode(s, a.topk)?,
        None if arch == Arch::Vanilla => TrainMode::None,
        None => TrainMode::Topk(a.topk),
    };
    if arch == Arch::Vanilla && tc.mode != TrainMode::None {
        return Err(CliError::usage("the vanilla architecture trains without memories (--mode none)"));
    }
    let resolved = to_toml(&file)?;
    record.config_hash = Some(fsio::sha256_hex(format!("{text}\n--\n{resolved}").as_bytes()));
    record.seed = Some(a.seed);

    let vocab = load_vocab(&a.vocab, record)?;
    let config = file.model.config(arch, vocab.len());
    config.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let corpus = load_corpus(&a.train, &vocab, record)?;
    let index = match (&a.index, file.train.mode) {
        (_, TrainMode::None) => None,
        (Some(p), _) => Some(load_index(p, &vocab, record)?),
        (None, _) => Some(RetrievalIndex::build(&corpus)?),
    };
    let (ckpt, log) = train(config, &corpus, vocab.fingerprint(), index.as_ref(), &file.train, a.seed)?;
    write(&a.out, &checkpoint::encode_checkpoint(&ckpt)?, record)?;
    if let Some(p) = &a.log {
        let mut t = Table::new(&["epoch", "loss", "examples", "steps"]);
        for e in &log.epochs {
            t.push(vec![e.epoch.to_string(), num(e.loss, 6), e.examples.to_string(), e.steps.to_string()]);
        }
        write(p, t.render().as_bytes(), record)?;
    }
    primary(record, &a.out);
    Ok(())
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct FinetuneFile {
    finetune: FinetuneConfig,
}

pub fn finetune(a: &FinetuneArgs, record: &mut RunRecord) -> Result<()> {
    let (mut file, text) = match &a.config {
        Some(p) => toml_file::<FinetuneFile>(p, record)?,
        None => (FinetuneFile::default(), String::new()),
    };
    let fc = &mut file.finetune;
    fc.updates = a.updates.unwrap_or(fc.updates);
    fc.lr = a.lr.unwrap_or(fc.lr);
    fc.eval_every = a.eval_every.unwrap_or(fc.eval_every);
    fc.k = a.topk.unwrap_or(fc.k);
    positive("topk", fc.k)?;
    positive("eval-every", fc.eval_every)?;
    let resolved = to_toml(&file)?;
    record.config_hash = Some(fsio::sha256_hex(format!("{text}\n--\n{resolved}").as_bytes()));
    record.seed = Some(a.seed);

    record.input(&a.ckpt);
    let ckpt = checkpoint::load_checkpoint(&a.ckpt)?;
    let vocab = load_vocab(&a.vocab, record)?;
    ckpt.check_vocab(vocab.fingerprint())?;
    let valid = load_corpus(&a.valid, &vocab, record)?;
    let index = load_index(&a.index, &vocab, record)?;
    let r = finetune_weighted(&ckpt, &valid, &index, &file.finetune, a.seed)?;
    write(&a.out, &checkpoint::encode_checkpoint(&r.checkpoint)?, record)?;
    write(&a.weightnet_out, &checkpoint::encode_weightnet(&r.weightnet)?, record)?;
    if let Some(p) = &a.curve {
        let mut t = Table::new(&["update", "heldout_loss", "train_loss", "best"]);
        for c in &r.curve {
            t.push(vec![
                c.update.to_string(),
                num(c.heldout_loss, 6),
                c.train_loss.map(|l| num(l, 6)).unwrap_or_default(),
                u8::from(c.update == r.best_update).to_string(),
            ]);
        }
        write(p, t.render().as_bytes(), record)?;
    }
    primary(record, &a.out);
    Ok(())
}

struct Inference {
    vocab: Vocab,
    pred: Predictor,
    mode: Mode,
    index: Option<RetrievalIndex>,
    k: usize,
}

fn inference(f: &InferenceFlags, record: &mut RunRecord) -> Result<Inference> {
    let mode = Mode::parse(&f.mode).map_err(|e| CliError::usage(e.to_string()))?;
    positive("topk", f.topk)?;
    record.input(&f.ckpt);
    let ckpt = checkpoint::load_checkpoint(&f.ckpt)?;
    let vocab = load_vocab(&f.vocab, record)?;
    ckpt.check_vocab(vocab.fingerprint())?;
    let weightnet = match &f.weightnet {
        Some(p) => {
            record.input(p);
            Some(checkpoint::load_weightnet(p)?.cast())
        }
        None if mode == Mode::Weighted => return Err(CliError::usage("--mode weighted needs --weightnet")),
        None => None,
    };
    let index = match &f.index {
        Some(p) => Some(load_index(p, &vocab, record)?),
        None if matches!(mode, Mode::Average | Mode::Weighted) => {
            return Err(CliError::usage(format!("--mode {} needs --index", mode.as_str())))
        }
        None => None,
    };
    let vanilla = ckpt.model.config.arch == Arch::Vanilla;
    if vanilla && mode != Mode::Base {
        return Err(CliError::usage("a vanilla checkpoint only supports --mode base"));
    }
    let k = if vanilla || index.is_none() { 0 } else { f.topk };
    Ok(Inference {
        pred: Predictor::new(ckpt.model.cast(), weightnet)?,
        vocab,
        mode,
        index,
        k,
    })
}

pub fn translate_cmd(a: &TranslateArgs, record: &mut RunRecord) -> Result<()> {
    positive("beam", a.beam)?;
    let inf = inference(&a.inference, record)?;
    record.input(&a.input);
    let sources = formats::load_sources(&a.input)?;
    let strategy = if a.beam == 1 { Strategy::Greedy } else { Strategy::Beam(a.beam) };
    let encoded: Vec<Vec<u32>> = sources.iter().map(|s| inf.vocab.encode_text(s).0).collect();
    let out = threads::par_map(&encoded, threads::worker_count(), |x| {
        translate(&inf.pred, inf.mode, x, inf.index.as_ref(), inf.k, strategy)
    });
    let mut lines = Vec::with_capacity(out.len());
    for (i, h) in out.into_iter().enumerate() {
        let h = h.context(format!("line {}", i + 1))?;
        let text = inf.vocab.decode(&h.tokens);
        lines.push(if a.scores { format!("{text}\t{:.6}", h.score) } else { text });
    }
    write(&a.out, lines_out(&lines).as_bytes(), record)?;
    primary(record, &a.out);
    Ok(())
}

#[derive(Debug, Serialize)]
struct BleuReport {
    bleu: f64,
    precisions: Vec<f64>,
    matches: Vec<usize>,
    totals: Vec<usize>,
    brevity_penalty: f64,
    hyp_len: usize,
    ref_len: usize,
}

pub fn eval_bleu(a: &BleuArgs, record: &mut RunRecord) -> Result<Option<String>> {
    record.input(&a.hyp);
    record.input(&a.reference);
    let hyps: Vec<Vec<String>> = fsio::read_string(&a.hyp)?.lines().map(tokenize).collect();
    let refs: Vec<Vec<String>> = fsio::read_string(&a.reference)?
        .lines()
        .map(|l| tokenize(l.split_once('\t').map_or(l, |(_, t)| t)))
        .collect();
    if hyps.len() != refs.len() {
        return Err(CliError::data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let b = corpus_bleu(&hyps, &refs)?;
    let text = to_toml(&BleuReport {
        bleu: b.score,
        precisions: b.precisions.to_vec(),
        matches: b.matches.to_vec(),
        totals: b.totals.to_vec(),
        brevity_penalty: b.brevity_penalty,
        hyp_len: b.hyp_len,
        ref_len: b.ref_len,
    })?;
    match &a.out {
        Some(p) => {
            write(p, text.as_bytes(), record)?;
            primary(record, p);
            Ok(None)
        }
        None => Ok(Some(text)),
    }
}

#[derive(Debug, Serialize)]
struct PplReport {
    mode: String,
    memories: usize,
    tokens: usize,
    nats_per_token: f64,
    perplexity: f64,
}

pub fn eval_ppl(a: &PplArgs, record: &mut RunRecord) -> Result<Option<String>> {
    let inf = inference(&a.inference, record)?;
    let test = load_corpus(&a.test, &inf.vocab, record)?;
    let source = inf.index.as_ref().filter(|_| inf.k > 0).map(|index| MemorySource {
        index,
        k: inf.k,
        exclude_self: a.exclude_self,
    });
    let ce = token_ce(&inf.pred, inf.mode, &test, source)?;
    let text = to_toml(&PplReport {
        mode: inf.mode.as_str().into(),
        memories: inf.k,
        tokens: ce.tokens,
        nats_per_token: ce.nats,
        perplexity: ce.perplexity(),
    })?;
    match &a.out {
        Some(p) => {
            write(p, text.as_bytes(), record)?;
            primary(record, p);
            Ok(None)
        }
        None => Ok(Some(text)),
    }
}

#[derive(Debug, Serialize)]
struct BiasvarVariant {
    variant: String,
    loss: f64,
    variance: f64,
    bias2: f64,
    negative_bias: bool,
}

#[derive(Debug, Serialize)]
struct BiasvarDoc {
    system: String,
    splits: usize,
    reps: usize,
    truncation: usize,
    seed: u64,
    test_points: usize,
    /// Hex, since the derived seeds use all 64 bits.
    model_seeds: Vec<String>,
    variants: Vec<BiasvarVariant>,
}

pub fn biasvar(a: &BiasvarArgs, record: &mut RunRecord) -> Result<()> {
    let system = System::parse(&a.system)?;
    positive("splits", a.splits)?;
    positive("reps", a.reps)?;
    positive("truncate", a.truncate)?;
    let (mut settings, text) = match &a.config {
        Some(p) => toml_file::<SystemSettings>(p, record)?,
        None => (SystemSettings::default(), String::new()),
    };
    settings.train.epochs = a.epochs.unwrap_or(settings.train.epochs);
    let resolved = to_toml(&settings)?;
    record.config_hash = Some(fsio::sha256_hex(format!("{text}\n--\n{resolved}").as_bytes()));
    record.seed = Some(a.seed);

    let vocab = load_vocab(&a.vocab, record)?;
    settings.validate(vocab.len())?;
    let corpus = load_corpus(&a.train, &vocab, record)?;
    let test = load_corpus(&a.test, &vocab, record)?;
    let valid = match &a.valid {
        Some(p) => Some(load_corpus(p, &vocab, record)?),
        None if system == System::TmWeight => return Err(CliError::usage("tm_weight needs --valid")),
        None => None,
    };
    let es = EstimateSettings {
        k: a.splits,
        reps: a.reps,
        truncation: a.truncate,
        seed: a.seed,
    };
    let points = TestPoint::from_corpus(&test);
    let jobs = plan_splits(&corpus, &es).map_err(|e| CliError::usage(e.to_string()))?;
    // Split models train in parallel; each is single threaded inside.
    let preds = threads::par_map(&jobs, threads::worker_count(), |job| -> Result<Vec<Vec<f64>>> {
        // Every model's memories come from its own training subset.
        let part = job.corpus.renumbered();
        let index = RetrievalIndex::build(&part)?;
        let trained = systems::train_systems(&[system], &settings, &vocab, &part, &index, valid.as_ref(), job.seed, 1)?;
        systems::predictions(&trained[0], &settings, &test, &index)
    });
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let report = assemble_report(&jobs, &preds, &points, &es)?;

    let variants: Vec<BiasvarVariant> = KlOrder::ALL
        .iter()
        .map(|&o| BiasvarVariant {
            variant: o.as_str().into(),
            loss: report.loss(),
            variance: report.variance(o),
            bias2: report.bias2(o),
            negative_bias: report.negative_bias(o),
        })
        .collect();
    let mut csv = Table::new(&["model", "variant", "loss", "variance", "bias2"]);
    for v in &variants {
        csv.push(vec![system.as_str().into(), v.variant.clone(), num(v.loss, 6), num(v.variance, 6), num(v.bias2, 6)]);
    }
    let doc = BiasvarDoc {
        system: system.as_str().into(),
        splits: a.splits,
        reps: a.reps,
        truncation: a.truncate,
        seed: a.seed,
        test_points: report.points,
        model_seeds: report.model_seeds.iter().map(|s| format!("{s:016x}")).collect(),
        variants,
    };
    save_toml(&a.out, &doc)?;
    record.output(&a.out);
    write(&a.csv, csv.render().as_bytes(), record)?;
    primary(record, &a.csv);
    Ok(())
}

pub fn experiment_cmd(cmd: &ExperimentCmd, record: &mut RunRecord) -> Result<()> {
    let (scenario, a) = match cmd {
        ExperimentCmd::LowResource(a) => (Scenario::LowResource, a),
        ExperimentCmd::PlugAndPlay(a) => (Scenario::PlugAndPlay, a),
        ExperimentCmd::HighResource(a) => (Scenario::HighResource, a),
    };
    experiment::run(scenario, &a.config, &a.out_dir, record)?;
    primary(record, &a.out_dir.join("results.csv"));
    Ok(())
}

/// Paths are interpreted relative to the manifest's recorded directory.
pub fn rerun_target(m: &manifest::RunManifest) -> Result<PathBuf> {
    let cwd = PathBuf::from(&m.cwd);
    if !cwd.is_dir() {
        return Err(CliError::data(format!("recorded working directory {} does not exist", m.cwd)));
    }
    Ok(cwd)
}
