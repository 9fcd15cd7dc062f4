//! IoU, corpus BLEU and word error rate.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::synth::render::BBox;

pub const MAX_ORDER: usize = 4;

/// Intersection over union of pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

fn ngram_counts<'t>(tokens: &'t [&'t str], n: usize) -> HashMap<&'t [&'t str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics for corpus BLEU; sums over segments.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    /// Statistics of one hypothesis/reference segment, whitespace tokenised.
    pub fn segment(hyp: &str, reference: &str) -> Self {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        let mut s = BleuStats { hyp_len: h.len(), ref_len: r.len(), ..Default::default() };
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            s.totals[n - 1] = h.len().saturating_sub(n - 1);
            s.matches[n - 1] = hc.iter().map(|(g, &c)| c.min(*rc.get(g).unwrap_or(&0))).sum();
        }
        s
    }

    pub fn add(&mut self, o: &BleuStats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    pub fn sum<'a>(it: impl IntoIterator<Item = &'a BleuStats>) -> BleuStats {
        let mut s = BleuStats::default();
        for x in it {
            s.add(x);
        }
        s
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        }
    }

    /// BLEU ×100 without smoothing: any order with zero matches gives 0.
    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.iter().any(|&m| m == 0) {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_ORDER)
            .map(|n| (self.matches[n] as f64 / self.totals[n] as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        (100.0 * self.brevity_penalty() * log_p.exp()).min(100.0)
    }
}

/// Corpus BLEU over aligned hypothesis/reference lists.
pub fn bleu(hypotheses: &[String], references: &[String]) -> Result<f64> {
    Ok(bleu_stats(hypotheses, references)?.score())
}

pub fn bleu_stats(hypotheses: &[String], references: &[String]) -> Result<BleuStats> {
    if hypotheses.len() != references.len() {
        bail!(
            Contract,
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        );
    }
    if hypotheses.is_empty() {
        bail!(UndefinedScore, "BLEU of an empty corpus");
    }
    let per: Vec<BleuStats> = hypotheses.iter().zip(references).map(|(h, r)| BleuStats::segment(h, r)).collect();
    Ok(BleuStats::sum(&per))
}

/// Word-level Levenshtein distance.
pub fn word_edits(hyp: &str, reference: &str) -> usize {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    let mut prev: Vec<usize> = (0..=r.len()).collect();
    for (i, hw) in h.iter().enumerate() {
        let mut cur = vec![i + 1; r.len() + 1];
        for (j, rw) in r.iter().enumerate() {
            let sub = prev[j] + (hw != rw) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[r.len()]
}

/// Word error rate: edits divided by the reference length.
pub fn wer(hyp: &str, reference: &str) -> Result<f64> {
    let n = reference.split_whitespace().count();
    if n == 0 {
        bail!(UndefinedScore, "WER against an empty reference");
    }
    Ok(word_edits(hyp, reference) as f64 / n as f64)
}
