//! Location-aware BLEU: OCR both images, keep each generated line's best-IoU
//! reference line when that IoU reaches 0.5, and score the kept pairs.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::metrics::{iou, BleuStats};
use super::ocr::oracle_ocr;
use crate::synth::atlas::GlyphAtlas;
use crate::synth::render::TextBox;

pub const MIN_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub hyp: TextBox,
    pub reference: TextBox,
    pub iou: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StructureMatch {
    pub pairs: Vec<MatchedPair>,
    /// Generated lines whose best IoU fell below the threshold.
    pub unmatched: usize,
}

impl StructureMatch {
    /// Kept hypothesis and reference texts, each concatenated in the
    /// reading order of the generated lines.
    pub fn segment(&self) -> (String, String) {
        let mut pairs: Vec<&MatchedPair> = self.pairs.iter().collect();
        pairs.sort_by(|a, b| {
            (a.hyp.bbox.y_min, a.hyp.bbox.x_min)
                .partial_cmp(&(b.hyp.bbox.y_min, b.hyp.bbox.x_min))
                .expect("box coordinates are finite")
        });
        let h: Vec<&str> = pairs.iter().map(|p| p.hyp.text.as_str()).collect();
        let r: Vec<&str> = pairs.iter().map(|p| p.reference.text.as_str()).collect();
        (h.join(" "), r.join(" "))
    }

    pub fn stats(&self) -> BleuStats {
        if self.pairs.is_empty() {
            return BleuStats::default();
        }
        let (h, r) = self.segment();
        BleuStats::segment(&h, &r)
    }
}

/// Matches every generated line to its single best-IoU reference line.
/// Strictly greater IoU wins, so the earliest reference keeps a tie, and a
/// reference may be matched by several generated lines.
pub fn match_boxes(generated: &[TextBox], reference: &[TextBox]) -> StructureMatch {
    let mut out = StructureMatch::default();
    for h in generated {
        let mut best: Option<(&TextBox, f64)> = None;
        let mut s = 0.0;
        for r in reference {
            let v = iou(&h.bbox, &r.bbox);
            if v > s {
                s = v;
                best = Some((r, v));
            }
        }
        match best {
            Some((r, v)) if s >= MIN_IOU => out.pairs.push(MatchedPair { hyp: h.clone(), reference: r.clone(), iou: v }),
            _ => out.unmatched += 1,
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureBleu {
    pub score: f64,
    pub matched: usize,
    pub unmatched: usize,
    /// No generated line matched any reference line.
    pub no_match: bool,
}

/// Structure-BLEU of a single generated/reference image pair.
pub fn structure_bleu(generated: &RgbImage, reference: &RgbImage, atlas: &GlyphAtlas) -> (StructureBleu, StructureMatch) {
    let r = oracle_ocr(reference, atlas);
    let h = oracle_ocr(generated, atlas);
    let m = match_boxes(&h.lines, &r.lines);
    let score = m.stats().score();
    (
        StructureBleu { score, matched: m.pairs.len(), unmatched: m.unmatched, no_match: m.pairs.is_empty() },
        m,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::render::BBox;

    fn tb(text: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> TextBox {
        TextBox { text: text.into(), bbox: BBox::new(x0, y0, x1, y1).unwrap() }
    }

    #[test]
    fn ties_keep_first_reference_and_references_can_repeat() {
        let refs = [tb("a", 0.0, 0.0, 10.0, 10.0), tb("b", 0.0, 0.0, 10.0, 10.0)];
        let gens = [tb("x", 0.0, 0.0, 10.0, 10.0), tb("y", 1.0, 0.0, 10.0, 10.0)];
        let m = match_boxes(&gens, &refs);
        assert_eq!(m.pairs.len(), 2);
        assert!(m.pairs.iter().all(|p| p.reference.text == "a"));
    }

    #[test]
    fn below_threshold_is_dropped() {
        let refs = [tb("a", 0.0, 0.0, 10.0, 10.0)];
        let gens = [tb("a", 6.0, 0.0, 16.0, 10.0)]; // IoU 4/16
        let m = match_boxes(&gens, &refs);
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched, 1);
        assert_eq!(m.stats().score(), 0.0);
    }
}
