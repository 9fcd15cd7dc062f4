//! Dataset directories: rendered image pairs plus JSONL manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::atlas::GlyphAtlas;
use super::corpus::SentencePair;
use super::render::{synth_pair, RenderSpec, RigidTransform, TextBox};
use crate::error::{bail, Error, Result};
use crate::rng;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub src_image_path: String,
    pub tgt_image_path: String,
    pub src_text: String,
    pub tgt_text: String,
    /// Line boxes before the transform.
    pub src_boxes: Vec<TextBox>,
    pub tgt_boxes: Vec<TextBox>,
    pub rotation_deg: f64,
    pub translation_px: [i64; 2],
}

impl ManifestRecord {
    pub fn transform(&self) -> RigidTransform {
        RigidTransform { rotation_deg: self.rotation_deg, translation_px: self.translation_px }
    }

    fn transformed(&self, boxes: &[TextBox]) -> Vec<TextBox> {
        if boxes.is_empty() {
            return vec![];
        }
        let block = boxes.iter().skip(1).fold(boxes[0].bbox, |a, b| a.union(&b.bbox));
        let t = self.transform();
        boxes
            .iter()
            .map(|b| TextBox { text: b.text.clone(), bbox: t.map_box(block.center(), &b.bbox) })
            .collect()
    }

    pub fn src_boxes_transformed(&self) -> Vec<TextBox> {
        self.transformed(&self.src_boxes)
    }

    pub fn tgt_boxes_transformed(&self) -> Vec<TextBox> {
        self.transformed(&self.tgt_boxes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, valid: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    /// Split sizes for `n` items: valid and test are rounded, train takes the rest.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let total = self.train + self.valid + self.test;
        if [self.train, self.valid, self.test].iter().any(|&r| r < 0.0) || total <= 0.0 {
            bail!(Config, "split ratios must be non-negative with a positive sum");
        }
        let valid = ((n as f64) * self.valid / total).round() as usize;
        let test = (((n as f64) * self.test / total).round() as usize).min(n - valid.min(n));
        let valid = valid.min(n);
        Ok([n - valid - test, valid, test])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub render: RenderSpec,
    pub splits: SplitRatios,
    /// Fraction of pairs allowed to overflow before synthesis fails.
    pub max_rejection_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { render: RenderSpec::default(), splits: SplitRatios::default(), max_rejection_rate: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub pairs: usize,
    pub rejected: usize,
    pub rejection_rate: f64,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

pub fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
    image.save_with_format(path, image::ImageFormat::Png).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("manifest.{split}.jsonl"))
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<ManifestRecord>> {
    read_manifest(&manifest_path(dir, split))
}

/// Renders every pair, splits by a seeded shuffle and writes
/// `images/`, `manifest.{train,valid,test}.jsonl` and `summary.json` under `dir`.
pub fn build_dataset(pairs: &[SentencePair], config: &SynthConfig, seed: u64, dir: &Path) -> Result<SynthSummary> {
    config.render.validate()?;
    let atlas: GlyphAtlas = config.render.atlas()?;
    let counts = config.splits.counts(pairs.len())?;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng::stream(seed, "split"));
    }

    let rendered: Vec<_> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| synth_pair(&p.source, &p.target, &config.render, &atlas, rng::mix(seed, i as u64)))
        .collect();
    let mut rejected = 0;
    for r in &rendered {
        match r {
            Err(Error::Rejected(_)) => rejected += 1,
            Err(Error::Contract(_)) => rejected += 1,
            Err(e) => bail!(Rejected, "rendering failed: {e}"),
            Ok(_) => {}
        }
    }
    let rate = if pairs.is_empty() { 0.0 } else { rejected as f64 / pairs.len() as f64 };
    log::info!("rendered {} pairs, {rejected} rejected ({:.1}%)", pairs.len(), rate * 100.0);
    if rate > config.max_rejection_rate {
        bail!(
            Rejected,
            "rejection rate {rate:.3} exceeds the configured ceiling {}",
            config.max_rejection_rate
        );
    }

    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut summary = SynthSummary { pairs: pairs.len(), rejected, rejection_rate: rate, train: 0, valid: 0, test: 0 };
    let mut start = 0;
    for (split, &count) in SPLITS.iter().zip(&counts) {
        let mut records = Vec::new();
        for &i in &order[start..start + count] {
            let Ok(pair) = &rendered[i] else { continue };
            let id = format!("{split}-{i:06}");
            let src_rel = format!("images/{id}.src.png");
            let tgt_rel = format!("images/{id}.tgt.png");
            save_png(&pair.source.image, &dir.join(&src_rel))?;
            save_png(&pair.target.image, &dir.join(&tgt_rel))?;
            records.push(ManifestRecord {
                id,
                src_image_path: src_rel,
                tgt_image_path: tgt_rel,
                src_text: pair.source.line_text(),
                tgt_text: pair.target.line_text(),
                src_boxes: pair.source.lines.clone(),
                tgt_boxes: pair.target.lines.clone(),
                rotation_deg: pair.source.transform.rotation_deg,
                translation_px: pair.source.transform.translation_px,
            });
        }
        records.sort_by(|a, b| a.id.cmp(&b.id));
        match *split {
            "train" => summary.train = records.len(),
            "valid" => summary.valid = records.len(),
            _ => summary.test = records.len(),
        }
        write_manifest(&manifest_path(dir, split), &records)?;
        start += count;
    }
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
