//! Glyph-template OCR for images produced by the renderer.
//!
//! Pipeline: modal background colour, per-pixel ink coverage from the
//! luma ratio to the background, skew from the sharpest row-projection
//! profile, de-rotation, line grouping by row gaps, then a fixed-pitch grid
//! fitted per line. Each line's angle and sub-pixel origin are then refined
//! by synthesis: every glyph mask is resampled into the image exactly as the
//! renderer would place it, and each cell takes the glyph with the smallest
//! squared coverage error.

use std::collections::HashMap;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::synth::atlas::{decode, GlyphAtlas};
use crate::synth::render::{bilinear, join_lines, luma, BBox, TextBox};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OcrConfig {
    pub max_skew_deg: f64,
    pub coarse_step_deg: f64,
    pub fine_step_deg: f64,
    /// Coverage above which a pixel counts as ink.
    pub ink_threshold: f64,
}

impl Default for OcrConfig {
    fn default() -> Self {
        OcrConfig { max_skew_deg: 10.0, coarse_step_deg: 0.25, fine_step_deg: 0.025, ink_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OcrResult {
    pub lines: Vec<TextBox>,
    pub skew_deg: f64,
}

impl OcrResult {
    /// Line texts in reading order joined by single spaces.
    pub fn text(&self) -> String {
        join_lines(&self.lines)
    }
}

pub fn oracle_ocr(image: &RgbImage, atlas: &GlyphAtlas) -> OcrResult {
    oracle_ocr_with(image, atlas, &OcrConfig::default())
}

fn modal_color(image: &RgbImage) -> [u8; 3] {
    let mut counts: HashMap<[u8; 3], usize> = HashMap::new();
    for p in image.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    // ties broken towards the brightest colour for determinism
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(c, _)| c)
        .unwrap_or([255; 3])
}

/// Ink coverage in [0,1] per pixel, row-major.
pub fn ink_coverage(image: &RgbImage) -> Vec<f64> {
    let bg = luma(modal_color(image));
    if bg < 1.0 {
        return vec![0.0; (image.width() * image.height()) as usize];
    }
    image.pixels().map(|p| (1.0 - luma(p.0) / bg).clamp(0.0, 1.0)).collect()
}

struct Field {
    data: Vec<f64>,
    height: usize,
    width: usize,
}

/// Sharpness (sum of squares) of the row-projection profile at `angle_deg`.
/// The profile is sampled on quarter-pixel bins and smoothed with a
/// Gaussian of half a pixel, which keeps the score insensitive to how
/// pixel centres happen to fall on the bin grid.
fn profile_score(points: &[(f64, f64, f64)], angle_deg: f64, bins: &mut Vec<f64>) -> f64 {
    const PER_PX: f64 = 4.0;
    const SIGMA_BINS: f64 = 2.0;
    const RADIUS: i64 = 6;
    let (s, c) = angle_deg.to_radians().sin_cos();
    let proj = |x: f64, y: f64| (-s * x + c * y) * PER_PX;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y, _) in points {
        let v = proj(x, y);
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let base = lo.round() as i64 - RADIUS;
    bins.clear();
    bins.resize((hi.round() as i64 + RADIUS - base + 1) as usize, 0.0);
    for &(x, y, a) in points {
        let v = proj(x, y);
        let centre = v.round() as i64;
        for off in -RADIUS..=RADIUS {
            let d = (centre + off) as f64 - v;
            bins[(centre + off - base) as usize] += a * (-d * d / (2.0 * SIGMA_BINS * SIGMA_BINS)).exp();
        }
    }
    bins.iter().map(|v| v * v).sum()
}

fn estimate_skew(alpha: &Field, cfg: &OcrConfig) -> f64 {
    let mut points = Vec::new();
    for y in 0..alpha.height {
        for x in 0..alpha.width {
            let a = alpha.data[y * alpha.width + x];
            if a > 0.1 {
                points.push((x as f64, y as f64, a));
            }
        }
    }
    if points.is_empty() || cfg.max_skew_deg <= 0.0 {
        return 0.0;
    }
    let mut bins = Vec::new();
    let mut search = |lo: f64, hi: f64, step: f64, best: (f64, f64)| {
        let n = ((hi - lo) / step).round() as i64;
        (0..=n).map(|i| lo + i as f64 * step).fold(best, |best, a| {
            let s = profile_score(&points, a, &mut bins);
            // prefer the smaller angle on (near) ties
            if s > best.1 * (1.0 + 1e-12) || (s >= best.1 * (1.0 - 1e-12) && a.abs() < best.0.abs()) {
                (a, s)
            } else {
                best
            }
        })
    };
    let start = (0.0, profile_score(&points, 0.0, &mut Vec::new()));
    let coarse = search(-cfg.max_skew_deg, cfg.max_skew_deg, cfg.coarse_step_deg, start);
    let fine = search(coarse.0 - cfg.coarse_step_deg, coarse.0 + cfg.coarse_step_deg, cfg.fine_step_deg, coarse);
    fine.0
}

/// Canvas holding the de-rotated coverage plus the map back to the image.
struct Derotated {
    field: Field,
    angle_deg: f64,
    canvas_center: (f64, f64),
    image_center: (f64, f64),
}

impl Derotated {
    fn new(alpha: &Field, angle_deg: f64) -> Self {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let pad = 2 + (alpha.height.max(alpha.width) as f64 * s.abs()).ceil() as usize;
        let (h, w) = (alpha.height + 2 * pad, alpha.width + 2 * pad);
        let image_center = (alpha.width as f64 / 2.0, alpha.height as f64 / 2.0);
        let canvas_center = (image_center.0 + pad as f64, image_center.1 + pad as f64);
        let mut data = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (qx, qy) = (x as f64 + 0.5 - canvas_center.0, y as f64 + 0.5 - canvas_center.1);
                let px = c * qx - s * qy + image_center.0;
                let py = s * qx + c * qy + image_center.1;
                data[y * w + x] = bilinear(&alpha.data, alpha.height, alpha.width, px - 0.5, py - 0.5);
            }
        }
        Derotated { field: Field { data, height: h, width: w }, angle_deg, canvas_center, image_center }
    }

    fn to_image(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (qx, qy) = (x - self.canvas_center.0, y - self.canvas_center.1);
        (c * qx - s * qy + self.image_center.0, s * qx + c * qy + self.image_center.1)
    }
}

struct Templates {
    bytes: Vec<u8>,
    rows: Vec<Vec<u64>>,
    /// Row-major `ch × cw` masks as 0/1 coverage.
    masks: Vec<Vec<f64>>,
    /// Cell pixels inked by at least one glyph.
    inkable: Vec<bool>,
    /// Index of the all-blank glyph (space), if the atlas has one.
    blank: Option<usize>,
    scale: f64,
    cw: usize,
    ch: usize,
}

impl Templates {
    fn new(atlas: &GlyphAtlas) -> Self {
        let bytes: Vec<u8> = atlas.bytes().collect();
        let rows: Vec<Vec<u64>> = bytes.iter().map(|&b| atlas.row_bits(b)).collect();
        let (cw, ch) = (atlas.cell_width(), atlas.cell_height());
        let masks = bytes
            .iter()
            .map(|&b| (0..ch * cw).map(|i| if atlas.ink(b, i % cw, i / cw) { 1.0 } else { 0.0 }).collect())
            .collect::<Vec<Vec<f64>>>();
        let inkable = (0..ch * cw).map(|i| masks.iter().any(|m| m[i] > 0.0)).collect();
        let blank = rows.iter().position(|r| r.iter().all(|&c| c == 0));
        Templates { bytes, rows, masks, inkable, blank, scale: atlas.scale() as f64, cw, ch }
    }

    fn hamming(&self, g: usize, cell: &[u64]) -> u32 {
        self.rows[g].iter().zip(cell).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    fn best_distance(&self, cell: &[u64]) -> u32 {
        (0..self.bytes.len()).map(|g| self.hamming(g, cell)).min().unwrap_or(0)
    }
}

fn cell_bits(ink: &[bool], width: usize, height: usize, x0: isize, y0: isize, cw: usize, ch: usize) -> Vec<u64> {
    (0..ch)
        .map(|dy| {
            let y = y0 + dy as isize;
            if y < 0 || y >= height as isize {
                return 0;
            }
            (0..cw).fold(0u64, |acc, dx| {
                let x = x0 + dx as isize;
                if x >= 0 && x < width as isize && ink[y as usize * width + x as usize] {
                    acc | 1 << dx
                } else {
                    acc
                }
            })
        })
        .collect()
}

pub fn oracle_ocr_with(image: &RgbImage, atlas: &GlyphAtlas, cfg: &OcrConfig) -> OcrResult {
    let alpha = Field {
        data: ink_coverage(image),
        height: image.height() as usize,
        width: image.width() as usize,
    };
    if !alpha.data.iter().any(|&a| a > cfg.ink_threshold) {
        return OcrResult::default();
    }
    let tpl = Templates::new(atlas);
    let skew = estimate_skew(&alpha, cfg);
    let (mut lines, cost) = read_lines(&alpha, skew, cfg, &tpl);
    let mut skew_deg = skew;
    // the profile peak can sit a fraction of a degree off for level text;
    // keep the level reading when its templates fit at least as well
    if skew != 0.0 && skew.abs() <= SNAP_DEG {
        let (level, c0) = read_lines(&alpha, 0.0, cfg, &tpl);
        if c0 <= cost {
            lines = level;
            skew_deg = 0.0;
        }
    }
    OcrResult { lines, skew_deg }
}

const SNAP_DEG: f64 = 1.0;

/// Reads every line after undoing `skew`; also returns the summed template
/// distance of the chosen cells.
fn read_lines(alpha: &Field, skew: f64, cfg: &OcrConfig, tpl: &Templates) -> (Vec<TextBox>, f64) {
    let rot = Derotated::new(alpha, skew);
    let f = &rot.field;
    let ink: Vec<bool> = f.data.iter().map(|&a| a > cfg.ink_threshold).collect();
    let (cw, ch) = (tpl.cw, tpl.ch);
    let mut total = 0.0;

    // row runs of ink, grouped into lines no taller than one cell
    let row_has_ink: Vec<bool> = (0..f.height).map(|y| ink[y * f.width..(y + 1) * f.width].iter().any(|&b| b)).collect();
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut y = 0;
    while y < f.height {
        if !row_has_ink[y] {
            y += 1;
            continue;
        }
        let start = y;
        while y < f.height && row_has_ink[y] {
            y += 1;
        }
        let end = y - 1;
        match groups.last_mut() {
            Some(g) if end + 1 - g.0 <= ch => g.1 = end,
            _ => groups.push((start, end)),
        }
    }

    let mut lines = Vec::new();
    for (top, bottom) in groups {
        let cols: Vec<usize> = (0..f.width)
            .filter(|&x| (top..=bottom).any(|y| ink[y * f.width + x]))
            .collect();
        let (first, last) = (cols[0], cols[cols.len() - 1]);
        let y_lo = (bottom + 1).saturating_sub(ch).min(top) as isize;
        let y_hi = (bottom + 1).saturating_sub(ch).max(top) as isize;
        let mut best: Option<(u32, isize, isize)> = None;
        for y0 in y_lo..=y_hi {
            for x0 in (first as isize - cw as isize + 1)..=(first as isize) {
                let n = (last as isize + 1 - x0 + cw as isize - 1) / cw as isize;
                let cost: u32 = (0..n)
                    .map(|k| tpl.best_distance(&cell_bits(&ink, f.width, f.height, x0 + k * cw as isize, y0, cw, ch)))
                    .sum();
                if best.is_none_or(|b| cost < b.0) {
                    best = Some((cost, x0, y0));
                }
            }
        }
        let (_, x0, y0) = best.expect("at least one offset is searched");
        // one spare cell each side catches faint end glyphs; blank cells
        // are trimmed below
        let x0 = x0 - cw as isize;
        let n = ((last as isize + 1 - x0 + cw as isize - 1) / cw as isize) as usize + 1;
        let start = LinePose::new(&rot, skew, (x0 as f64, y0 as f64), n, cw, ch);
        let (pose, glyphs, cost) = refine_line(alpha, tpl, start, n, tpl.scale);
        total += cost;
        let bytes: Vec<u8> = glyphs.iter().map(|&g| tpl.bytes[g]).collect();
        let lead = bytes.iter().take_while(|&&b| b == b' ').count();
        let trail = bytes.iter().rev().take_while(|&&b| b == b' ').count();
        if lead == bytes.len() {
            continue;
        }
        let text = decode(&bytes[lead..bytes.len() - trail]);
        let (bx0, bx1) = ((lead * cw) as f64, ((n - trail) * cw) as f64);
        let corners = [(bx0, 0.0), (bx1, 0.0), (bx0, ch as f64), (bx1, ch as f64)];
        let mapped: Vec<_> = corners.iter().map(|&p| pose.to_image(p)).collect();
        let mut b = BBox::enclosing(&mapped);
        b.x_min = b.x_min.max(0.0);
        b.y_min = b.y_min.max(0.0);
        b.x_max = b.x_max.min(alpha.width as f64);
        b.y_max = b.y_max.min(alpha.height as f64);
        if b.x_min < b.x_max && b.y_min < b.y_max {
            lines.push(TextBox { text, bbox: b });
        }
    }
    (lines, total)
}

/// Placement of one text line: line-local coordinates `(u, v)` with the
/// first cell's top-left mask corner at the origin, rotated by `angle_deg`
/// about `anchor` (line-local) which sits at `anchor_img` in the image.
#[derive(Clone, Copy, Debug)]
struct LinePose {
    angle_deg: f64,
    anchor: (f64, f64),
    anchor_img: (f64, f64),
}

impl LinePose {
    /// Starts from the grid fitted on the de-rotated canvas.
    fn new(rot: &Derotated, angle_deg: f64, origin: (f64, f64), n: usize, cw: usize, ch: usize) -> Self {
        let anchor = ((n * cw) as f64 / 2.0, ch as f64 / 2.0);
        let anchor_img = rot.to_image((origin.0 + anchor.0, origin.1 + anchor.1));
        LinePose { angle_deg, anchor, anchor_img }
    }

    fn to_image(&self, (u, v): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (du, dv) = (u - self.anchor.0, v - self.anchor.1);
        (self.anchor_img.0 + c * du - s * dv, self.anchor_img.1 + s * du + c * dv)
    }

    fn to_line(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.anchor_img.0, y - self.anchor_img.1);
        (self.anchor.0 + c * dx + s * dy, self.anchor.1 - s * dx + c * dy)
    }

    /// Same placement with the line content shifted by `(du, dv)` and the
    /// angle changed by `dtheta`.
    fn moved(&self, du: f64, dv: f64, dtheta: f64) -> Self {
        LinePose { angle_deg: self.angle_deg + dtheta, anchor: (self.anchor.0 - du, self.anchor.1 - dv), anchor_img: self.anchor_img }
    }
}

/// Image pixels whose bilinear footprint lies inside one cell, with the
/// mask taps and weights that reproduce the renderer's resampling.
struct CellSamples {
    taps: Vec<[(usize, f64); 4]>,
    observed: Vec<f64>,
    /// Sum of squared observations: the cost of an empty cell.
    blank: f64,
}

impl CellSamples {
    fn new(alpha: &Field, pose: &LinePose, k: usize, cw: usize, ch: usize) -> Self {
        let left = (k * cw) as f64;
        let corners = [(left - 1.5, -1.5), (left + cw as f64 + 0.5, -1.5), (left - 1.5, ch as f64 + 0.5), (left + cw as f64 + 0.5, ch as f64 + 0.5)];
        let b = BBox::enclosing(&corners.map(|p| pose.to_image(p)));
        let (xs, xe) = ((b.x_min.floor() as isize).max(0), (b.x_max.ceil() as isize).min(alpha.width as isize));
        let (ys, ye) = ((b.y_min.floor() as isize).max(0), (b.y_max.ceil() as isize).min(alpha.height as isize));
        let (mut taps, mut observed) = (Vec::new(), Vec::new());
        for y in ys..ye {
            for x in xs..xe {
                let (u, v) = pose.to_line((x as f64 + 0.5, y as f64 + 0.5));
                let (sx, sy) = (u - 0.5 - left, v - 0.5);
                // taps from -1 to cw-1 (and ch) only touch this cell's blank
                // margins, never a neighbouring glyph
                if !(-1.0..(cw - 1) as f64).contains(&sx) || !(-1.0..ch as f64).contains(&sy) {
                    continue;
                }
                let (fx, fy) = (sx.floor(), sy.floor());
                let (tx, ty) = (sx - fx, sy - fy);
                let mut t = [(0, 0.0); 4];
                for (i, (dx, dy, w)) in [(0, 0, (1.0 - tx) * (1.0 - ty)), (1, 0, tx * (1.0 - ty)), (0, 1, (1.0 - tx) * ty), (1, 1, tx * ty)]
                    .into_iter()
                    .enumerate()
                {
                    let (mx, my) = (fx as isize + dx, fy as isize + dy);
                    t[i] = if mx >= 0 && my >= 0 && (mx as usize) < cw && (my as usize) < ch {
                        (my as usize * cw + mx as usize, w)
                    } else {
                        (0, 0.0)
                    };
                }
                taps.push(t);
                observed.push(alpha.data[y as usize * alpha.width + x as usize]);
            }
        }
        let blank = observed.iter().map(|o| o * o).sum();
        CellSamples { taps, observed, blank }
    }

    fn cost(&self, mask: &[f64]) -> f64 {
        self.taps
            .iter()
            .zip(&self.observed)
            .map(|(t, o)| {
                let p: f64 = t.iter().map(|&(i, w)| w * mask[i]).sum();
                (p - o) * (p - o)
            })
            .sum()
    }
}

/// Per cell, the candidate glyphs sorted by cost (all glyphs when
/// `shortlist` is `None`); returns the best glyph of each cell and the
/// summed cost.
fn classify_line(alpha: &Field, tpl: &Templates, pose: &LinePose, n: usize, shortlist: Option<&[Vec<usize>]>, keep: usize) -> (Vec<Vec<usize>>, f64) {
    let all: Vec<usize> = (0..tpl.bytes.len()).collect();
    let mut ranked = Vec::with_capacity(n);
    let mut total = 0.0;
    for k in 0..n {
        let cell = CellSamples::new(alpha, pose, k, tpl.cw, tpl.ch);
        let cands = shortlist.map_or(&all[..], |s| &s[k][..]);
        let mut scored: Vec<(f64, usize)> = cands
            .iter()
            .map(|&g| (if Some(g) == tpl.blank { cell.blank } else { cell.cost(&tpl.masks[g]) }, g))
            .collect();
        // lowest cost first; equal costs keep the lower byte
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        // a glyph must explain at least half the cell's ink and half a
        // pixel's worth; anything less is bleed or falls off the image
        if let Some(blank) = tpl.blank {
            if scored[0].1 != blank && cell.blank - scored[0].0 < (0.5 * cell.blank).max(0.5) {
                scored.retain(|&(_, g)| g != blank);
                scored.insert(0, (cell.blank, blank));
            }
        }
        total += scored[0].0;
        ranked.push(scored.into_iter().take(keep).map(|(_, g)| g).collect());
    }
    (ranked, total)
}

const SHORTLIST: usize = 6;

/// Share of the ink near the line that the pose puts where no glyph can
/// draw: the spacing column of every cell and the row above and below the
/// line. Needs no glyph
/// hypothesis, so it is cheap enough for a wide search.
fn stray_ink(alpha: &Field, tpl: &Templates, pose: &LinePose, n: usize) -> f64 {
    let (cw, ch) = (tpl.cw as isize, tpl.ch as isize);
    let corners = [(-2.0, -2.0), ((n * tpl.cw) as f64 + 2.0, -2.0), (-2.0, ch as f64 + 2.0), ((n * tpl.cw) as f64 + 2.0, ch as f64 + 2.0)];
    let b = BBox::enclosing(&corners.map(|p| pose.to_image(p)));
    let (xs, xe) = ((b.x_min.floor() as isize).max(0), (b.x_max.ceil() as isize).min(alpha.width as isize));
    let (ys, ye) = ((b.y_min.floor() as isize).max(0), (b.y_max.ceil() as isize).min(alpha.height as isize));
    let span = (n as isize) * cw;
    let (mut stray, mut kept) = (0.0, 0.0);
    for y in ys..ye {
        for x in xs..xe {
            let a = alpha.data[y as usize * alpha.width + x as usize];
            if a == 0.0 {
                continue;
            }
            let (u, v) = pose.to_line((x as f64 + 0.5, y as f64 + 0.5));
            let (sx, sy) = (u - 0.5, v - 0.5);
            let (fx, fy) = (sx.floor() as isize, sy.floor() as isize);
            if fx < -2 || fx > span || fy < -2 || fy > ch {
                continue;
            }
            let (tx, ty) = (sx - fx as f64, sy - fy as f64);
            let mut bound = 0.0;
            for (dx, dy, w) in [(0, 0, (1.0 - tx) * (1.0 - ty)), (1, 0, tx * (1.0 - ty)), (0, 1, (1.0 - tx) * ty), (1, 1, tx * ty)] {
                let (mx, my) = (fx + dx, fy + dy);
                if mx >= 0 && mx < span && my >= 0 && my < ch && tpl.inkable[(my * cw + mx.rem_euclid(cw)) as usize] {
                    bound += w;
                }
            }
            let over = (a - bound).max(0.0);
            stray += over;
            kept += a - over;
        }
    }
    if kept > 0.0 {
        stray / kept
    } else {
        f64::INFINITY
    }
}

/// Wide search for the line origin by [`stray_ink`]; the few best distinct
/// placements are then compared by full glyph classification.
fn align_line(alpha: &Field, tpl: &Templates, start: LinePose, n: usize, scale: f64) -> LinePose {
    const CANDIDATES: usize = 4;
    let step = 0.25 * scale;
    let (mu, mv) = ((tpl.cw as f64 / 2.0 / step).round() as i64, (tpl.ch as f64 / 2.0 / step).round() as i64);
    let mut scored: Vec<(f64, f64, f64)> = (-mu..=mu)
        .flat_map(|i| (-mv..=mv).map(move |j| (i as f64 * step, j as f64 * step)))
        .map(|(du, dv)| (stray_ink(alpha, tpl, &start.moved(du, dv, 0.0), n), du, dv))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut picked: Vec<(f64, f64)> = Vec::new();
    for &(_, du, dv) in &scored {
        if picked.iter().all(|&(pu, pv)| (pu - du).abs().max((pv - dv).abs()) > 0.75 * scale) {
            picked.push((du, dv));
            if picked.len() == CANDIDATES {
                break;
            }
        }
    }
    picked
        .into_iter()
        .map(|(du, dv)| {
            let p = start.moved(du, dv, 0.0);
            (classify_line(alpha, tpl, &p, n, None, 1).1, p)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .map_or(start, |(_, p)| p)
}

/// Coordinate search over sub-pixel shift and angle, scoring each pose by
/// the summed best-glyph cost over a per-cell shortlist.
fn refine_line(alpha: &Field, tpl: &Templates, start: LinePose, n: usize, scale: f64) -> (LinePose, Vec<usize>, f64) {
    let mut pose = align_line(alpha, tpl, start, n, scale);
    let (mut short, mut best) = classify_line(alpha, tpl, &pose, n, None, SHORTLIST);
    let try_all = |pose: &mut LinePose, best: &mut f64, short: &[Vec<usize>], moves: &[(f64, f64, f64)]| {
        let base = *pose;
        for &(du, dv, dt) in moves {
            let p = base.moved(du, dv, dt);
            let (_, c) = classify_line(alpha, tpl, &p, n, Some(short), 1);
            if c < *best {
                *best = c;
                *pose = p;
            }
        }
    };
    let grid = |r: f64, step: f64| -> Vec<(f64, f64, f64)> {
        let m = (r / step).round() as i64;
        (-m..=m).flat_map(|i| (-m..=m).map(move |j| (i as f64 * step, j as f64 * step, 0.0))).collect()
    };
    let angles = |r: f64, step: f64| -> Vec<(f64, f64, f64)> {
        let m = (r / step).round() as i64;
        (-m..=m).map(|i| (0.0, 0.0, i as f64 * step)).collect()
    };
    try_all(&mut pose, &mut best, &short, &grid(0.5, 0.25));
    (short, best) = classify_line(alpha, tpl, &pose, n, None, SHORTLIST);
    try_all(&mut pose, &mut best, &short, &angles(0.6, 0.1));
    try_all(&mut pose, &mut best, &short, &grid(0.25, 0.125));
    (short, best) = classify_line(alpha, tpl, &pose, n, None, SHORTLIST);
    try_all(&mut pose, &mut best, &short, &angles(0.1, 0.025));
    try_all(&mut pose, &mut best, &short, &grid(0.125, 0.0625));
    let (ranked, cost) = classify_line(alpha, tpl, &pose, n, None, 1);
    (pose, ranked.into_iter().map(|r| r[0]).collect(), cost)
}
