//! Text rendering onto coloured raster images with a random rigid transform.

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::atlas::{decode, GlyphAtlas};
use crate::error::{bail, Result};
use crate::rng;

/// Axis-aligned box in pixel coordinates, `[x_min, y_min, x_max, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox { x_min: a[0], y_min: a[1], x_max: a[2], y_max: a[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_min < x_max && y_min < y_max) {
            bail!(Contract, "degenerate box ({x_min}, {y_min}, {x_max}, {y_max})");
        }
        Ok(BBox { x_min, y_min, x_max, y_max })
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        [
            (self.x_min, self.y_min),
            (self.x_max, self.y_min),
            (self.x_min, self.y_max),
            (self.x_max, self.y_max),
        ]
    }

    /// Bounding box of a point set.
    pub fn enclosing(points: &[(f64, f64)]) -> Self {
        let mut b = BBox {
            x_min: f64::INFINITY,
            y_min: f64::INFINITY,
            x_max: f64::NEG_INFINITY,
            y_max: f64::NEG_INFINITY,
        };
        for &(x, y) in points {
            b.x_min = b.x_min.min(x);
            b.y_min = b.y_min.min(y);
            b.x_max = b.x_max.max(x);
            b.y_max = b.y_max.max(y);
        }
        b
    }

    pub fn union(&self, o: &BBox) -> BBox {
        BBox {
            x_min: self.x_min.min(o.x_min),
            y_min: self.y_min.min(o.y_min),
            x_max: self.x_max.max(o.x_max),
            y_max: self.y_max.max(o.y_max),
        }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }
}

/// One line of text and its box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextBox {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Rotation about the text-block centre followed by an integer shift.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation_deg: f64,
    pub translation_px: [i64; 2],
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform { rotation_deg: 0.0, translation_px: [0, 0] };

    /// Maps a pre-transform point given the rotation centre.
    pub fn apply(&self, center: (f64, f64), (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let (dx, dy) = (x - center.0, y - center.1);
        (
            center.0 + c * dx - s * dy + self.translation_px[0] as f64,
            center.1 + s * dx + c * dy + self.translation_px[1] as f64,
        )
    }

    pub fn invert(&self, center: (f64, f64), (x, y): (f64, f64)) -> (f64, f64) {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let dx = x - self.translation_px[0] as f64 - center.0;
        let dy = y - self.translation_px[1] as f64 - center.1;
        (center.0 + c * dx + s * dy, center.1 - s * dx + c * dy)
    }

    pub fn map_box(&self, center: (f64, f64), b: &BBox) -> BBox {
        let pts: Vec<_> = b.corners().iter().map(|&p| self.apply(center, p)).collect();
        BBox::enclosing(&pts)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSpec {
    pub height: usize,
    pub width: usize,
    pub margin: usize,
    pub line_spacing: usize,
    pub max_rotation_deg: f64,
    pub max_translation_px: i64,
    /// Backgrounds darker than this luma (0..255) are resampled, so text
    /// pixels stay separable from the background.
    pub min_background_luma: f64,
    /// Sample separate background colours for the two sides of a pair.
    pub independent_backgrounds: bool,
    pub atlas_scale: usize,
}

impl Default for RenderSpec {
    fn default() -> Self {
        RenderSpec {
            height: 64,
            width: 64,
            margin: 4,
            line_spacing: 2,
            max_rotation_deg: 8.0,
            max_translation_px: 4,
            min_background_luma: 100.0,
            independent_backgrounds: false,
            atlas_scale: 1,
        }
    }
}

impl RenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_rotation_deg < 0.0 || self.max_translation_px < 0 {
            bail!(Config, "rotation and translation ranges must be non-negative");
        }
        if !(0.0..255.0).contains(&self.min_background_luma) {
            bail!(Config, "min_background_luma {} outside [0,255)", self.min_background_luma);
        }
        if self.width <= 2 * self.margin || self.height <= 2 * self.margin {
            bail!(Config, "{}x{} image leaves no room inside margin {}", self.height, self.width, self.margin);
        }
        Ok(())
    }

    pub fn atlas(&self) -> Result<GlyphAtlas> {
        GlyphAtlas::new(self.atlas_scale)
    }
}

pub fn luma(c: [u8; 3]) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}

#[derive(Clone, Debug)]
pub struct RenderedSample {
    pub image: RgbImage,
    pub text: String,
    /// Line boxes before the transform.
    pub lines: Vec<TextBox>,
    pub transform: RigidTransform,
    pub background: [u8; 3],
}

impl RenderedSample {
    /// Rotation centre: the centre of the untransformed text block.
    pub fn center(&self) -> (f64, f64) {
        block_box(&self.lines).center()
    }

    /// Line boxes after the transform, re-axis-aligned.
    pub fn transformed_boxes(&self) -> Vec<TextBox> {
        let c = self.center();
        self.lines
            .iter()
            .map(|l| TextBox { text: l.text.clone(), bbox: self.transform.map_box(c, &l.bbox) })
            .collect()
    }

    /// Space-joined line texts, i.e. the text with whitespace normalised.
    pub fn line_text(&self) -> String {
        join_lines(&self.lines)
    }
}

pub fn join_lines(lines: &[TextBox]) -> String {
    lines.iter().map(|l| l.text.as_str()).collect::<Vec<_>>().join(" ")
}

fn block_box(lines: &[TextBox]) -> BBox {
    lines.iter().skip(1).fold(lines[0].bbox, |acc, l| acc.union(&l.bbox))
}

/// Greedy word-wrapped layout anchored at the top-left margin.
#[derive(Clone, Debug)]
pub struct Layout {
    pub lines: Vec<Vec<u8>>,
    pub boxes: Vec<TextBox>,
}

impl Layout {
    pub fn new(text: &str, spec: &RenderSpec, atlas: &GlyphAtlas) -> Result<Self> {
        let bytes = atlas.encode(text)?;
        let words: Vec<&[u8]> = bytes.split(|&b| b == b' ').filter(|w| !w.is_empty()).collect();
        if words.is_empty() {
            bail!(Contract, "cannot render empty text");
        }
        let (cw, ch) = (atlas.cell_width(), atlas.cell_height());
        let pitch = ch + spacing(spec, atlas);
        let max_cols = (spec.width - 2 * spec.margin) / cw;
        let max_lines = (spec.height - 2 * spec.margin + spacing(spec, atlas)) / pitch;
        let mut lines: Vec<Vec<u8>> = Vec::new();
        for w in words {
            if w.len() > max_cols {
                bail!(Rejected, "word of {} characters overflows a {max_cols}-column line", w.len());
            }
            match lines.last_mut() {
                Some(l) if l.len() + 1 + w.len() <= max_cols => {
                    l.push(b' ');
                    l.extend_from_slice(w);
                }
                _ => lines.push(w.to_vec()),
            }
        }
        if lines.len() > max_lines {
            bail!(Rejected, "{} lines overflow the {max_lines}-line image", lines.len());
        }
        let boxes = lines
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (x, y) = (spec.margin, spec.margin + i * pitch);
                TextBox {
                    text: decode(l),
                    bbox: BBox {
                        x_min: x as f64,
                        y_min: y as f64,
                        x_max: (x + l.len() * cw) as f64,
                        y_max: (y + ch) as f64,
                    },
                }
            })
            .collect();
        Ok(Layout { lines, boxes })
    }

    pub fn block(&self) -> BBox {
        block_box(&self.boxes)
    }

    /// Coverage in [0,1] of the untransformed glyphs, row-major `height × width`.
    fn alpha(&self, spec: &RenderSpec, atlas: &GlyphAtlas) -> Vec<f64> {
        let mut a = vec![0.0; spec.height * spec.width];
        let (cw, ch) = (atlas.cell_width(), atlas.cell_height());
        for (line, b) in self.lines.iter().zip(&self.boxes) {
            let (x0, y0) = (b.bbox.x_min as usize, b.bbox.y_min as usize);
            for (k, &byte) in line.iter().enumerate() {
                for y in 0..ch {
                    for x in 0..cw {
                        if atlas.ink(byte, x, y) {
                            a[(y0 + y) * spec.width + x0 + k * cw + x] = 1.0;
                        }
                    }
                }
            }
        }
        a
    }
}

fn spacing(spec: &RenderSpec, atlas: &GlyphAtlas) -> usize {
    spec.line_spacing * atlas.scale()
}

/// Bilinear sample of a row-major field at continuous pixel-centre
/// coordinates; outside the field reads as zero.
pub fn bilinear(field: &[f64], height: usize, width: usize, x: f64, y: f64) -> f64 {
    let (fx, fy) = (x.floor(), y.floor());
    let (tx, ty) = (x - fx, y - fy);
    let (x0, y0) = (fx as isize, fy as isize);
    let at = |xi: isize, yi: isize| {
        if xi < 0 || yi < 0 || xi >= width as isize || yi >= height as isize {
            0.0
        } else {
            field[yi as usize * width + xi as usize]
        }
    };
    let mut v = 0.0;
    for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            let w = wx * wy;
            if w != 0.0 {
                v += w * at(x0 + dx, y0 + dy);
            }
        }
    }
    v
}

fn sample_background(spec: &RenderSpec, r: &mut impl Rng) -> [u8; 3] {
    loop {
        let c = [r.random::<u8>(), r.random::<u8>(), r.random::<u8>()];
        if luma(c) >= spec.min_background_luma {
            return c;
        }
    }
}

/// Samples a rotation, then an integer translation within `±max_translation_px`
/// that keeps every block inside the image.
fn sample_transform(layouts: &[&Layout], spec: &RenderSpec, r: &mut impl Rng) -> Result<RigidTransform> {
    let theta = if spec.max_rotation_deg > 0.0 {
        r.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg)
    } else {
        0.0
    };
    let d = spec.max_translation_px;
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (-d, d, -d, d);
    let rot = RigidTransform { rotation_deg: theta, translation_px: [0, 0] };
    for l in layouts {
        let block = l.block();
        let b = rot.map_box(block.center(), &block);
        lo_x = lo_x.max((-b.x_min - 1e-9).ceil() as i64);
        hi_x = hi_x.min((spec.width as f64 - b.x_max + 1e-9).floor() as i64);
        lo_y = lo_y.max((-b.y_min - 1e-9).ceil() as i64);
        hi_y = hi_y.min((spec.height as f64 - b.y_max + 1e-9).floor() as i64);
    }
    if lo_x > hi_x || lo_y > hi_y {
        bail!(Rejected, "text block rotated by {theta:.2} degrees overflows the image");
    }
    let dx = r.random_range(lo_x..=hi_x);
    let dy = r.random_range(lo_y..=hi_y);
    Ok(RigidTransform { rotation_deg: theta, translation_px: [dx, dy] })
}

/// Renders a laid-out text under a fixed transform and background.
pub fn render_layout(
    text: &str,
    layout: &Layout,
    transform: RigidTransform,
    background: [u8; 3],
    spec: &RenderSpec,
    atlas: &GlyphAtlas,
) -> RenderedSample {
    let (h, w) = (spec.height, spec.width);
    let src = layout.alpha(spec, atlas);
    let center = layout.block().center();
    let mut image = RgbImage::from_pixel(w as u32, h as u32, Rgb(background));
    let bounds = transform.map_box(center, &layout.block());
    let (ys, ye) = ((bounds.y_min.floor() as isize - 1).max(0), (bounds.y_max.ceil() as isize + 1).min(h as isize));
    let (xs, xe) = ((bounds.x_min.floor() as isize - 1).max(0), (bounds.x_max.ceil() as isize + 1).min(w as isize));
    let exact = transform.rotation_deg == 0.0;
    for y in ys..ye {
        for x in xs..xe {
            let a = if exact {
                let (sx, sy) = (x - transform.translation_px[0] as isize, y - transform.translation_px[1] as isize);
                if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                    0.0
                } else {
                    src[sy as usize * w + sx as usize]
                }
            } else {
                let (px, py) = transform.invert(center, (x as f64 + 0.5, y as f64 + 0.5));
                bilinear(&src, h, w, px - 0.5, py - 0.5)
            };
            if a > 0.0 {
                let px = Rgb(background.map(|c| (c as f64 * (1.0 - a)).round() as u8));
                image.put_pixel(x as u32, y as u32, px);
            }
        }
    }
    RenderedSample {
        image,
        text: text.to_string(),
        lines: layout.boxes.clone(),
        transform,
        background,
    }
}

/// Renders `text` with a transform and background drawn from `seed`.
pub fn render(text: &str, spec: &RenderSpec, atlas: &GlyphAtlas, seed: u64) -> Result<RenderedSample> {
    spec.validate()?;
    let layout = Layout::new(text, spec, atlas)?;
    let mut r = rng::stream(seed, "render");
    let background = sample_background(spec, &mut r);
    let transform = sample_transform(&[&layout], spec, &mut r)?;
    Ok(render_layout(text, &layout, transform, background, spec, atlas))
}

#[derive(Clone, Debug)]
pub struct SynthPair {
    pub source: RenderedSample,
    pub target: RenderedSample,
}

/// Renders a sentence pair under one shared transform. Either side
/// overflowing rejects the pair.
pub fn synth_pair(source: &str, target: &str, spec: &RenderSpec, atlas: &GlyphAtlas, seed: u64) -> Result<SynthPair> {
    spec.validate()?;
    let ls = Layout::new(source, spec, atlas)?;
    let lt = Layout::new(target, spec, atlas)?;
    let mut r = rng::stream(seed, "pair");
    let bg_src = sample_background(spec, &mut r);
    let bg_tgt = if spec.independent_backgrounds { sample_background(spec, &mut r) } else { bg_src };
    let transform = sample_transform(&[&ls, &lt], spec, &mut r)?;
    Ok(SynthPair {
        source: render_layout(source, &ls, transform, bg_src, spec, atlas),
        target: render_layout(target, &lt, transform, bg_tgt, spec, atlas),
    })
}
