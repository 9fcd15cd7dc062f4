//! Independent reference implementations used as test oracles.

use iimt::eval::ssim::{gaussian_taps, WINDOW};

/// Corpus BLEU by explicit n-gram enumeration: every hypothesis n-gram is
/// compared with every reference n-gram, no hashing.
pub fn bleu_oracle(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hl, mut rl) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hl += h.len();
        rl += r.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            totals[n - 1] += h.len() + 1 - n;
            let hg: Vec<&[String]> = h.windows(n).collect();
            let rg: Vec<&[String]> = if r.len() >= n { r.windows(n).collect() } else { vec![] };
            let mut seen: Vec<&[String]> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let ch = hg.iter().filter(|x| *x == g).count();
                let cr = rg.iter().filter(|x| *x == g).count();
                matches[n - 1] += ch.min(cr);
            }
        }
    }
    if hl == 0 || matches.iter().any(|&m| m == 0) {
        return 0.0;
    }
    let prod: f64 = (0..4).map(|i| matches[i] as f64 / totals[i] as f64).product();
    let bp = if hl < rl { (1.0 - rl as f64 / hl as f64).exp() } else { 1.0 };
    100.0 * bp * prod.powf(0.25)
}

pub fn edit_oracle(h: &[String], r: &[String]) -> usize {
    match (h.split_first(), r.split_first()) {
        (None, _) => r.len(),
        (_, None) => h.len(),
        (Some((a, hs)), Some((b, rs))) => {
            let sub = edit_oracle(hs, rs) + (a != b) as usize;
            sub.min(edit_oracle(hs, r) + 1).min(edit_oracle(h, rs) + 1)
        }
    }
}

/// Mean SSIM evaluated pixel by pixel with an explicit 2-D truncated
/// Gaussian window, renormalised over the in-image taps.
pub fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_taps();
    let r = (WINDOW / 2) as isize;
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut total = 0.0;
    for y in 0..h as isize {
        for x in 0..w as isize {
            let (mut sw, mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let wt = g[(dy + r) as usize] * g[(dx + r) as usize];
                    let i = yy as usize * w + xx as usize;
                    sw += wt;
                    ma += wt * a[i];
                    mb += wt * b[i];
                    saa += wt * a[i] * a[i];
                    sbb += wt * b[i] * b[i];
                    sab += wt * a[i] * b[i];
                }
            }
            let (ma, mb) = (ma / sw, mb / sw);
            let va = saa / sw - ma * ma;
            let vb = sbb / sw - mb * mb;
            let cov = sab / sw - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    total / (h * w) as f64
}
