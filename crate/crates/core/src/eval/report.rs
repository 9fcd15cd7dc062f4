//! Corpus evaluation of generated images against a dataset split.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{word_edits, BleuStats};
use super::ocr::oracle_ocr;
use super::ssim::ssim;
use super::structure::match_boxes;
use crate::error::{bail, Error, Result};
use crate::synth::atlas::GlyphAtlas;
use crate::synth::dataset::{load_rgb, ManifestRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Lower edges of the source-OCR WER buckets; the last bucket is open.
    pub wer_edges: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { wer_edges: vec![0.0, 0.1, 0.25, 0.5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    pub missing: bool,
    pub hyp_text: String,
    pub ref_text: String,
    pub bleu_stats: BleuStats,
    pub bleu: f64,
    pub structure_stats: BleuStats,
    pub structure_bleu: f64,
    pub matched: usize,
    pub unmatched: usize,
    pub ssim: f64,
    pub src_ocr_text: String,
    pub src_word_edits: usize,
    pub src_words: usize,
    pub src_wer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerBucket {
    pub lo: f64,
    /// `None` for the open-ended last bucket.
    pub hi: Option<f64>,
    pub count: usize,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: usize,
    pub bleu: f64,
    pub structure_bleu: f64,
    pub ssim: f64,
    pub wer: f64,
    pub matched: usize,
    pub unmatched: usize,
    pub images_without_match: usize,
    pub missing: Vec<String>,
    pub buckets: Vec<WerBucket>,
    pub per_example: Vec<ExampleMetrics>,
}

impl MetricReport {
    /// Corpus values recomputed from the per-example statistics.
    pub fn aggregate(per_example: Vec<ExampleMetrics>, cfg: &EvalConfig) -> Result<Self> {
        if per_example.is_empty() {
            bail!(UndefinedScore, "no examples to evaluate");
        }
        let n = per_example.len();
        let bleu = BleuStats::sum(per_example.iter().map(|e| &e.bleu_stats)).score();
        let structure_bleu = BleuStats::sum(per_example.iter().map(|e| &e.structure_stats)).score();
        let ssim = per_example.iter().map(|e| e.ssim).sum::<f64>() / n as f64;
        let words: usize = per_example.iter().map(|e| e.src_words).sum();
        let edits: usize = per_example.iter().map(|e| e.src_word_edits).sum();
        let wer = if words == 0 { 0.0 } else { edits as f64 / words as f64 };
        let mut edges = cfg.wer_edges.clone();
        if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "wer_edges must be non-empty and strictly increasing");
        }
        edges.dedup();
        let buckets = (0..edges.len())
            .map(|i| {
                let (lo, hi) = (edges[i], edges.get(i + 1).copied());
                let members: Vec<&ExampleMetrics> = per_example
                    .iter()
                    .filter(|e| {
                        let w = e.src_wer;
                        (i == 0 || w >= lo) && hi.is_none_or(|h| w < h)
                    })
                    .collect();
                WerBucket {
                    lo,
                    hi,
                    count: members.len(),
                    bleu: BleuStats::sum(members.iter().map(|e| &e.bleu_stats)).score(),
                }
            })
            .collect();
        Ok(MetricReport {
            examples: n,
            bleu,
            structure_bleu,
            ssim,
            wer,
            matched: per_example.iter().map(|e| e.matched).sum(),
            unmatched: per_example.iter().map(|e| e.unmatched).sum(),
            images_without_match: per_example.iter().filter(|e| e.matched == 0).count(),
            missing: per_example.iter().filter(|e| e.missing).map(|e| e.id.clone()).collect(),
            buckets,
            per_example,
        })
    }

    pub fn buckets_csv(&self) -> String {
        let mut s = String::from("wer_lo,wer_hi,count,bleu\n");
        for b in &self.buckets {
            let hi = b.hi.map(|h| h.to_string()).unwrap_or_else(|| "inf".into());
            writeln!(s, "{},{},{},{:.4}", b.lo, hi, b.count, b.bleu).expect("writing to a String");
        }
        s
    }

    /// Writes `report.json` and `wer_buckets.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("report.json");
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("wer_buckets.csv");
        fs::write(&p, self.buckets_csv()).map_err(|e| Error::io(&p, e))
    }
}

/// Metrics of one generated image against its manifest record.
pub fn evaluate_example(
    id: &str,
    generated: Option<&RgbImage>,
    reference: &RgbImage,
    source: &RgbImage,
    src_text: &str,
    atlas: &GlyphAtlas,
) -> Result<ExampleMetrics> {
    let blank = RgbImage::from_pixel(reference.width(), reference.height(), Rgb([255; 3]));
    let gen = generated.unwrap_or(&blank);
    let ref_ocr = oracle_ocr(reference, atlas);
    let hyp_ocr = if generated.is_some() { oracle_ocr(gen, atlas) } else { Default::default() };
    let src_ocr = oracle_ocr(source, atlas);
    let (hyp_text, ref_text) = (hyp_ocr.text(), ref_ocr.text());
    let bleu_stats = BleuStats::segment(&hyp_text, &ref_text);
    let m = match_boxes(&hyp_ocr.lines, &ref_ocr.lines);
    let structure_stats = m.stats();
    let src_text_ocr = src_ocr.text();
    let src_words = src_text.split_whitespace().count();
    let src_word_edits = word_edits(&src_text_ocr, src_text);
    Ok(ExampleMetrics {
        id: id.to_string(),
        missing: generated.is_none(),
        bleu: bleu_stats.score(),
        structure_bleu: structure_stats.score(),
        hyp_text,
        ref_text,
        bleu_stats,
        structure_stats,
        matched: m.pairs.len(),
        unmatched: m.unmatched,
        ssim: ssim(gen, reference)?,
        src_ocr_text: src_text_ocr,
        src_wer: if src_words == 0 { 0.0 } else { src_word_edits as f64 / src_words as f64 },
        src_word_edits,
        src_words,
    })
}

/// Scores `{outputs}/{id}.png` against every record of a dataset split.
/// Missing or unreadable outputs are listed and scored as blank images.
pub fn evaluate_corpus(
    outputs: &Path,
    dataset: &Path,
    records: &[ManifestRecord],
    atlas: &GlyphAtlas,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    let per: Vec<Result<ExampleMetrics>> = records
        .par_iter()
        .map(|r| {
            let reference = load_rgb(&dataset.join(&r.tgt_image_path))?;
            let source = load_rgb(&dataset.join(&r.src_image_path))?;
            let generated = load_rgb(&outputs.join(format!("{}.png", r.id))).ok();
            let generated = generated.filter(|g| g.dimensions() == reference.dimensions());
            evaluate_example(&r.id, generated.as_ref(), &reference, &source, &r.src_text, atlas)
        })
        .collect();
    MetricReport::aggregate(per.into_iter().collect::<Result<_>>()?, cfg)
}
