//! Mean structural similarity with an 11×11 Gaussian window.

use image::RgbImage;

use crate::error::{bail, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const RANGE: f64 = 255.0;

pub fn gaussian_taps() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut g = [0.0; WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    g
}

/// Gaussian-weighted local mean along one axis; the window is truncated at
/// the borders and renormalised over the taps that fall inside.
fn blur_1d(src: &[f64], h: usize, w: usize, horizontal: bool) -> Vec<f64> {
    let g = gaussian_taps();
    let r = (WINDOW / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut norm) = (0.0, 0.0);
            for (k, &gk) in g.iter().enumerate() {
                let o = k as isize - r;
                let (xx, yy) = if horizontal { (x as isize + o, y as isize) } else { (x as isize, y as isize + o) };
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h {
                    acc += gk * src[yy as usize * w + xx as usize];
                    norm += gk;
                }
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

fn local_mean(src: &[f64], h: usize, w: usize) -> Vec<f64> {
    let t = blur_1d(src, h, w, true);
    blur_1d(&t, h, w, false)
}

/// Mean SSIM of one channel given as row-major intensities in [0,255].
pub fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let c1 = (K1 * RANGE).powi(2);
    let c2 = (K2 * RANGE).powi(2);
    let mu_a = local_mean(a, h, w);
    let mu_b = local_mean(b, h, w);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, e_bb, e_ab) = (local_mean(&aa, h, w), local_mean(&bb, h, w), local_mean(&ab, h, w));
    let mut total = 0.0;
    for i in 0..h * w {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (h * w) as f64
}

/// SSIM averaged over the three colour channels.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    if a.dimensions() != b.dimensions() {
        bail!(Contract, "SSIM needs equal sizes, got {:?} and {:?}", a.dimensions(), b.dimensions());
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    let mut sum = 0.0;
    for c in 0..3 {
        let ca: Vec<f64> = a.pixels().map(|p| p.0[c] as f64).collect();
        let cb: Vec<f64> = b.pixels().map(|p| p.0[c] as f64).collect();
        sum += ssim_channel(&ca, &cb, h, w);
    }
    Ok(sum / 3.0)
}
