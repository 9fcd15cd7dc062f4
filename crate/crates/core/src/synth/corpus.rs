//! Parallel corpora: a tab-separated reader and a small rule-based
//! German→English generator for pilot runs and tests.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    /// Lines that were not `source<TAB>target` with both sides non-empty.
    pub skipped: usize,
}

/// Reads `source<TAB>target` lines, skipping malformed ones.
pub fn read_tsv(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_tsv(&text))
}

pub fn parse_tsv(text: &str) -> Corpus {
    let mut corpus = Corpus::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((s, t)) if !s.trim().is_empty() && !t.trim().is_empty() && !t.contains('\t') => {
                corpus.pairs.push(SentencePair { source: s.trim().to_string(), target: t.trim().to_string() })
            }
            _ => corpus.skipped += 1,
        }
    }
    corpus
}

pub fn write_tsv(pairs: &[SentencePair]) -> String {
    pairs.iter().map(|p| format!("{}\t{}\n", p.source, p.target)).collect()
}

#[derive(Clone, Copy)]
enum Gender {
    Masc,
    Fem,
    Neut,
}

const NOUNS: &[(Gender, &str, &str)] = &[
    (Gender::Masc, "hund", "dog"),
    (Gender::Fem, "katze", "cat"),
    (Gender::Neut, "haus", "house"),
    (Gender::Masc, "mann", "man"),
    (Gender::Fem, "frau", "woman"),
    (Gender::Neut, "kind", "child"),
    (Gender::Masc, "vogel", "bird"),
    (Gender::Fem, "blume", "flower"),
    (Gender::Neut, "buch", "book"),
    (Gender::Masc, "baum", "tree"),
    (Gender::Fem, "tür", "door"),
    (Gender::Neut, "boot", "boat"),
    (Gender::Masc, "fuß", "foot"),
    (Gender::Fem, "uhr", "clock"),
    (Gender::Neut, "brot", "bread"),
];

const VERBS: &[(&str, &str)] = &[
    ("sieht", "sees"),
    ("hat", "has"),
    ("mag", "likes"),
    ("hört", "hears"),
    ("malt", "paints"),
    ("kennt", "knows"),
    ("sucht", "seeks"),
    ("grüßt", "greets"),
];

const ADJECTIVES: &[(&str, &str)] = &[
    ("klein", "small"),
    ("groß", "big"),
    ("alt", "old"),
    ("neu", "new"),
    ("rot", "red"),
    ("schön", "nice"),
    ("müde", "tired"),
    ("laut", "loud"),
];

const ADVERBS: &[(&str, &str)] = &[("heute", "today"), ("oft", "often"), ("nun", "now")];

fn article(g: Gender, accusative: bool) -> &'static str {
    match (g, accusative) {
        (Gender::Masc, false) => "der",
        (Gender::Masc, true) => "den",
        (Gender::Fem, _) => "die",
        (Gender::Neut, _) => "das",
    }
}

/// Generates `n` sentence pairs from a fixed lexicon with German verb-second
/// word order, so the mapping involves both lexical choice and reordering.
pub fn toy_corpus(n: usize, seed: u64) -> Vec<SentencePair> {
    let mut r = rng::stream(seed, "toy-corpus");
    (0..n).map(|_| toy_sentence(&mut r)).collect()
}

fn toy_sentence(r: &mut impl Rng) -> SentencePair {
    let &(gs, ds, es) = NOUNS.choose(r).expect("lexicon is non-empty");
    let subject_de = format!("{} {ds}", article(gs, false));
    let subject_en = format!("the {es}");
    let (de, en) = match r.random_range(0..4) {
        0 => {
            let &(go, dobj, eobj) = NOUNS.choose(r).expect("lexicon is non-empty");
            let &(dv, ev) = VERBS.choose(r).expect("lexicon is non-empty");
            (
                format!("{subject_de} {dv} {} {dobj}", article(go, true)),
                format!("{subject_en} {ev} the {eobj}"),
            )
        }
        1 => {
            let &(da, ea) = ADJECTIVES.choose(r).expect("lexicon is non-empty");
            (format!("{subject_de} ist {da}"), format!("{subject_en} is {ea}"))
        }
        2 => {
            let &(da, ea) = ADJECTIVES.choose(r).expect("lexicon is non-empty");
            (format!("{subject_de} ist nicht {da}"), format!("{subject_en} is not {ea}"))
        }
        _ => {
            let &(dadv, eadv) = ADVERBS.choose(r).expect("lexicon is non-empty");
            let &(dv, ev) = VERBS.choose(r).expect("lexicon is non-empty");
            let &(go, dobj, eobj) = NOUNS.choose(r).expect("lexicon is non-empty");
            (
                format!("{dadv} {dv} {subject_de} {} {dobj}", article(go, true)),
                format!("{eadv} {subject_en} {ev} the {eobj}"),
            )
        }
    };
    SentencePair { source: de, target: en }
}
