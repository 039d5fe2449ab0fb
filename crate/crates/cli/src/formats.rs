//! Text formats: parallel TSV, vocabulary files and synthetic-task manifests.

use std::path::Path;

use tmlab_core::corpus::{tokenize, ParallelCorpus, RawPair, Vocab};

use crate::error::{CliError, Result};
use crate::fsio;

/// Parses `source<TAB>target` lines. A trailing newline is allowed; every
/// other line must hold a TAB and two non-empty sides.
pub fn parse_tsv(text: &str, origin: &str) -> Result<Vec<RawPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (src, tgt) = line
            .split_once('\t')
            .ok_or_else(|| CliError::data(format!("{origin}: line {}: missing TAB", i + 1)))?;
        if tokenize(src).is_empty() || tokenize(tgt).is_empty() {
            return Err(CliError::data(format!("{origin}: line {}: empty side", i + 1)));
        }
        pairs.push(RawPair::new(src, tgt));
    }
    Ok(pairs)
}

pub fn render_tsv(pairs: &[RawPair]) -> String {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&p.source);
        out.push('\t');
        out.push_str(&p.target);
        out.push('\n');
    }
    out
}

pub fn load_tsv(path: &Path) -> Result<Vec<RawPair>> {
    parse_tsv(&fsio::read_string(path)?, &path.display().to_string())
}

pub fn save_tsv(path: &Path, pairs: &[RawPair]) -> Result<()> {
    fsio::atomic_write(path, render_tsv(pairs).as_bytes())
}

/// Loads a TSV file and encodes it; line `i` (from 0) becomes pair `i`.
pub fn load_corpus(path: &Path, vocab: &Vocab) -> Result<ParallelCorpus> {
    let raw = load_tsv(path)?;
    ParallelCorpus::from_raw(&raw, vocab).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

/// Source sentences, one per line; for TSV input the first column is used.
pub fn load_sources(path: &Path) -> Result<Vec<String>> {
    let text = fsio::read_string(path)?;
    Ok(text
        .lines()
        .map(|l| l.split('\t').next().unwrap_or("").to_string())
        .collect())
}

pub fn render_vocab(vocab: &Vocab) -> String {
    let mut out = String::new();
    for t in vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    out
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fsio::read_string(path)?;
    let tokens = text.lines().map(str::to_string).collect();
    Vocab::from_tokens(tokens).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    fsio::atomic_write(path, render_vocab(vocab).as_bytes())
}

/// `pair_id<TAB>template_id` records.
pub fn render_template_manifest(template_ids: &[u32]) -> String {
    let mut out = String::from("pair_id\ttemplate_id\n");
    for (i, t) in template_ids.iter().enumerate() {
        out.push_str(&format!("{i}\t{t}\n"));
    }
    out
}
