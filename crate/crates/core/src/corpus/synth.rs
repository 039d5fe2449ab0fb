//! Synthetic templated translation task.
//!
//! Each template is a source frame and a target frame with the same number of
//! slots. Frame words are drawn per template from shared pools, so a template's
//! target frame cannot be derived word by word from its source frame. Slots are
//! filled from a bilingual lexicon (`sl{i}` translates to `tl{i}`). Pairs that
//! share a template are fuzzy matches of each other.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::RawPair;
use crate::error::{Error, Result};
use crate::rng;

/// Upper bound on `lexicon_size`; larger lexicons would not fit a desk-scale vocabulary.
pub const MAX_LEXICON_SIZE: usize = 10_000;
const FRAME_POOL: usize = 48;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthCorpus {
    pub pairs: Vec<RawPair>,
    /// Template id of every pair, aligned with `pairs`.
    pub template_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Word(usize),
    Slot,
}

struct Template {
    source: Vec<Piece>,
    target: Vec<Piece>,
}

fn frame(rng: &mut rng::Rng, words: usize, slots: usize) -> Vec<Piece> {
    let mut pool: Vec<usize> = (0..FRAME_POOL).collect();
    pool.shuffle(rng);
    let mut pieces: Vec<Piece> = pool[..words].iter().map(|&w| Piece::Word(w)).collect();
    for _ in 0..slots {
        let at = rng.gen_range(0..=pieces.len());
        pieces.insert(at, Piece::Slot);
    }
    pieces
}

fn render(pieces: &[Piece], frame_prefix: &str, lex_prefix: &str, fillers: &[usize]) -> String {
    let mut out = String::new();
    let mut slot = 0;
    for (i, p) in pieces.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        match p {
            Piece::Word(w) => out.push_str(&format!("{frame_prefix}{w}")),
            Piece::Slot => {
                out.push_str(&format!("{lex_prefix}{}", fillers[slot]));
                slot += 1;
            }
        }
    }
    out
}

/// Generates `n_pairs` templated pairs over `n_templates` templates.
pub fn synth_task(n_pairs: usize, n_templates: usize, lexicon_size: usize, seed: u64) -> Result<SynthCorpus> {
    if n_pairs == 0 || n_templates == 0 || lexicon_size == 0 {
        return Err(Error::invalid("synth_task arguments must all be at least 1"));
    }
    if lexicon_size > MAX_LEXICON_SIZE {
        return Err(Error::invalid(format!(
            "lexicon_size {lexicon_size} exceeds the bound of {MAX_LEXICON_SIZE}"
        )));
    }
    let mut rng = rng::substream(seed, "synth");
    let templates: Vec<Template> = (0..n_templates)
        .map(|_| {
            let words = rng.gen_range(3..=6);
            let slots = rng.gen_range(1..=2);
            Template {
                source: frame(&mut rng, words, slots),
                target: frame(&mut rng, words, slots),
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..n_pairs).collect();
    order.shuffle(&mut rng);
    let mut pairs = Vec::with_capacity(n_pairs);
    let mut template_ids = Vec::with_capacity(n_pairs);
    for &slot in &order {
        let t = slot % n_templates;
        let tpl = &templates[t];
        let n_slots = tpl.source.iter().filter(|p| matches!(p, Piece::Slot)).count();
        let fillers: Vec<usize> = (0..n_slots).map(|_| rng.gen_range(0..lexicon_size)).collect();
        pairs.push(RawPair {
            source: render(&tpl.source, "sf", "sl", &fillers),
            target: render(&tpl.target, "tf", "tl", &fillers),
        });
        template_ids.push(t as u32);
    }
    Ok(SynthCorpus { pairs, template_ids })
}
