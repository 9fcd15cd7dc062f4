//! Monospaced bitmap glyph atlas.
//!
//! Glyphs are 5 columns by 8 rows, column-encoded with bit `r` set when row
//! `r` is inked. Each glyph sits in a 6×8 cell (one blank column of pitch);
//! a scale factor blows every glyph pixel up to an `s×s` block.

use crate::error::{bail, Result};

pub const GLYPH_COLS: usize = 5;
pub const CELL_W: usize = 6;
pub const CELL_H: usize = 8;

/// Printable ASCII, 0x20..=0x7E.
#[rustfmt::skip]
const ASCII: [[u8; 5]; 95] = [
    [0x00, 0x00, 0x00, 0x00, 0x00], [0x00, 0x00, 0x5F, 0x00, 0x00], [0x00, 0x07, 0x00, 0x07, 0x00],
    [0x14, 0x7F, 0x14, 0x7F, 0x14], [0x24, 0x2A, 0x7F, 0x2A, 0x12], [0x23, 0x13, 0x08, 0x64, 0x62],
    [0x36, 0x49, 0x56, 0x20, 0x50], [0x00, 0x08, 0x07, 0x03, 0x00], [0x00, 0x1C, 0x22, 0x41, 0x00],
    [0x00, 0x41, 0x22, 0x1C, 0x00], [0x2A, 0x1C, 0x7F, 0x1C, 0x2A], [0x08, 0x08, 0x3E, 0x08, 0x08],
    [0x00, 0x50, 0x30, 0x00, 0x00], [0x08, 0x08, 0x08, 0x08, 0x08], [0x00, 0x60, 0x60, 0x00, 0x00],
    [0x20, 0x10, 0x08, 0x04, 0x02], [0x3E, 0x51, 0x49, 0x45, 0x3E], [0x00, 0x42, 0x7F, 0x40, 0x00],
    [0x42, 0x61, 0x51, 0x49, 0x46], [0x21, 0x41, 0x45, 0x4B, 0x31], [0x18, 0x14, 0x12, 0x7F, 0x10],
    [0x27, 0x45, 0x45, 0x45, 0x39], [0x3C, 0x4A, 0x49, 0x49, 0x30], [0x01, 0x71, 0x09, 0x05, 0x03],
    [0x36, 0x49, 0x49, 0x49, 0x36], [0x06, 0x49, 0x49, 0x29, 0x1E], [0x00, 0x36, 0x36, 0x00, 0x00],
    [0x00, 0x56, 0x36, 0x00, 0x00], [0x08, 0x14, 0x22, 0x41, 0x00], [0x14, 0x14, 0x14, 0x14, 0x14],
    [0x00, 0x41, 0x22, 0x14, 0x08], [0x02, 0x01, 0x51, 0x09, 0x06], [0x32, 0x49, 0x79, 0x41, 0x3E],
    [0x7E, 0x11, 0x11, 0x11, 0x7E], [0x7F, 0x49, 0x49, 0x49, 0x36], [0x3E, 0x41, 0x41, 0x41, 0x22],
    [0x7F, 0x41, 0x41, 0x22, 0x1C], [0x7F, 0x49, 0x49, 0x49, 0x41], [0x7F, 0x09, 0x09, 0x09, 0x01],
    [0x3E, 0x41, 0x49, 0x49, 0x7A], [0x7F, 0x08, 0x08, 0x08, 0x7F], [0x00, 0x41, 0x7F, 0x41, 0x00],
    [0x20, 0x40, 0x41, 0x3F, 0x01], [0x7F, 0x08, 0x14, 0x22, 0x41], [0x7F, 0x40, 0x40, 0x40, 0x40],
    [0x7F, 0x02, 0x0C, 0x02, 0x7F], [0x7F, 0x04, 0x08, 0x10, 0x7F], [0x3E, 0x41, 0x41, 0x41, 0x3E],
    [0x7F, 0x09, 0x09, 0x09, 0x06], [0x3E, 0x41, 0x51, 0x21, 0x5E], [0x7F, 0x09, 0x19, 0x29, 0x46],
    [0x46, 0x49, 0x49, 0x49, 0x31], [0x01, 0x01, 0x7F, 0x01, 0x01], [0x3F, 0x40, 0x40, 0x40, 0x3F],
    [0x1F, 0x20, 0x40, 0x20, 0x1F], [0x3F, 0x40, 0x38, 0x40, 0x3F], [0x63, 0x14, 0x08, 0x14, 0x63],
    [0x07, 0x08, 0x70, 0x08, 0x07], [0x61, 0x51, 0x49, 0x45, 0x43], [0x00, 0x7F, 0x41, 0x41, 0x00],
    [0x02, 0x04, 0x08, 0x10, 0x20], [0x00, 0x41, 0x41, 0x7F, 0x00], [0x04, 0x02, 0x01, 0x02, 0x04],
    [0x40, 0x40, 0x40, 0x40, 0x40], [0x00, 0x01, 0x02, 0x04, 0x00], [0x20, 0x54, 0x54, 0x54, 0x78],
    [0x7F, 0x48, 0x44, 0x44, 0x38], [0x38, 0x44, 0x44, 0x44, 0x20], [0x38, 0x44, 0x44, 0x48, 0x7F],
    [0x38, 0x54, 0x54, 0x54, 0x18], [0x08, 0x7E, 0x09, 0x01, 0x02], [0x0C, 0x52, 0x52, 0x52, 0x3E],
    [0x7F, 0x08, 0x04, 0x04, 0x78], [0x00, 0x44, 0x7D, 0x40, 0x00], [0x20, 0x40, 0x44, 0x3D, 0x00],
    [0x7F, 0x10, 0x28, 0x44, 0x00], [0x00, 0x41, 0x7F, 0x40, 0x00], [0x7C, 0x04, 0x18, 0x04, 0x78],
    [0x7C, 0x08, 0x04, 0x04, 0x78], [0x38, 0x44, 0x44, 0x44, 0x38], [0x7C, 0x14, 0x14, 0x14, 0x08],
    [0x08, 0x14, 0x14, 0x18, 0x7C], [0x7C, 0x08, 0x04, 0x04, 0x08], [0x48, 0x54, 0x54, 0x54, 0x20],
    [0x04, 0x3F, 0x44, 0x40, 0x20], [0x3C, 0x40, 0x40, 0x20, 0x7C], [0x1C, 0x20, 0x40, 0x20, 0x1C],
    [0x3C, 0x40, 0x30, 0x40, 0x3C], [0x44, 0x28, 0x10, 0x28, 0x44], [0x0C, 0x50, 0x50, 0x50, 0x3C],
    [0x44, 0x64, 0x54, 0x4C, 0x44], [0x00, 0x08, 0x36, 0x41, 0x00], [0x00, 0x00, 0x7F, 0x00, 0x00],
    [0x00, 0x41, 0x36, 0x08, 0x00], [0x10, 0x08, 0x08, 0x10, 0x08],
];

#[derive(Clone, Copy)]
enum Accent {
    Grave,
    Acute,
    Circumflex,
    Tilde,
    Diaeresis,
    Ring,
    Cedilla,
}

impl Accent {
    /// Two-row mark over rows 0 and 1, for lowercase bases that start at row 2.
    fn small(self) -> [u8; 5] {
        match self {
            Accent::Grave => [0x00, 0x01, 0x02, 0x00, 0x00],
            Accent::Acute => [0x00, 0x00, 0x02, 0x01, 0x00],
            Accent::Circumflex => [0x00, 0x02, 0x01, 0x02, 0x00],
            Accent::Tilde => [0x00, 0x02, 0x01, 0x02, 0x01],
            Accent::Diaeresis => [0x00, 0x01, 0x00, 0x01, 0x00],
            Accent::Ring => [0x00, 0x01, 0x02, 0x01, 0x00],
            Accent::Cedilla => [0x00, 0x00, 0x80, 0x00, 0x00],
        }
    }

    /// One-row mark above a capital.
    fn capital(self) -> [u8; 5] {
        let cols: &[usize] = match self {
            Accent::Grave => &[1],
            Accent::Acute => &[3],
            Accent::Circumflex => &[2],
            Accent::Tilde => &[0, 1, 3, 4],
            Accent::Diaeresis => &[1, 3],
            Accent::Ring => &[0, 4],
            Accent::Cedilla => &[],
        };
        let mut out = [0u8; 5];
        for &c in cols {
            out[c] = 0x01;
        }
        out
    }
}

fn ascii(c: u8) -> [u8; 5] {
    ASCII[(c - 0x20) as usize]
}

fn accented(base: u8, accent: Accent) -> [u8; 5] {
    let mut cols = if base == b'i' {
        // dotless i
        ascii(b'i').map(|c| c & !0x01)
    } else {
        ascii(base)
    };
    if matches!(accent, Accent::Cedilla) {
        for (c, m) in cols.iter_mut().zip(accent.small()) {
            *c |= m;
        }
    } else if base.is_ascii_uppercase() {
        // capitals fill rows 0..7, so drop the glyph one row to make room
        for (c, m) in cols.iter_mut().zip(accent.capital()) {
            *c = (*c << 1) | m;
        }
    } else {
        for (c, m) in cols.iter_mut().zip(accent.small()) {
            *c |= m;
        }
    }
    cols
}

fn latin1_glyph(byte: u8) -> Option<[u8; 5]> {
    use Accent::*;
    const VOWEL_ACCENTS: [Accent; 6] = [Grave, Acute, Circumflex, Tilde, Diaeresis, Ring];
    const E_ACCENTS: [Accent; 4] = [Grave, Acute, Circumflex, Diaeresis];
    let lower = byte >= 0xE0;
    let b = if lower { byte - 0x20 } else { byte };
    let case = |c: u8| if lower { c.to_ascii_lowercase() } else { c };
    let g = match b {
        0xC0..=0xC5 => accented(case(b'A'), VOWEL_ACCENTS[(b - 0xC0) as usize]),
        0xC7 => accented(case(b'C'), Cedilla),
        0xC8..=0xCB => accented(case(b'E'), E_ACCENTS[(b - 0xC8) as usize]),
        0xCC..=0xCF => accented(case(b'I'), E_ACCENTS[(b - 0xCC) as usize]),
        0xD1 => accented(case(b'N'), Tilde),
        0xD2..=0xD6 => accented(case(b'O'), VOWEL_ACCENTS[(b - 0xD2) as usize]),
        0xD9..=0xDC => accented(case(b'U'), E_ACCENTS[(b - 0xD9) as usize]),
        0xDD => accented(case(b'Y'), Acute),
        0xC6 if lower => [0x20, 0x54, 0x78, 0x54, 0x58], // æ
        0xC6 => [0x7E, 0x09, 0x7F, 0x49, 0x49],          // Æ
        0xD8 if lower => [0x58, 0x64, 0x54, 0x4C, 0x34], // ø
        0xD8 => [0x5E, 0x31, 0x49, 0x46, 0x3D],          // Ø
        0xDF if !lower => [0x7E, 0x01, 0x49, 0x4E, 0x30], // ß
        _ => match byte {
            0xAB => [0x08, 0x14, 0x2A, 0x14, 0x22], // «
            0xBB => [0x22, 0x14, 0x2A, 0x14, 0x08], // »
            0xB0 => [0x00, 0x06, 0x09, 0x09, 0x06], // °
            _ => return None,
        },
    };
    Some(g)
}

/// Bitmap glyphs for printable ASCII plus the Latin-1 letters used by
/// German, French and Romanian. Bytes 254 and 255 are never renderable so
/// they stay free as special token ids.
#[derive(Clone, Debug)]
pub struct GlyphAtlas {
    scale: usize,
    columns: Vec<Option<[u8; 5]>>,
}

impl Default for GlyphAtlas {
    fn default() -> Self {
        GlyphAtlas::new(1).expect("scale 1 is valid")
    }
}

impl GlyphAtlas {
    pub fn new(scale: usize) -> Result<Self> {
        if scale == 0 || CELL_W * scale > 64 {
            bail!(Config, "atlas scale {scale} outside 1..=10");
        }
        let columns = (0..=255u8)
            .map(|b| match b {
                0x20..=0x7E => Some(ascii(b)),
                0xA0..=0xFD => latin1_glyph(b),
                _ => None,
            })
            .collect();
        Ok(GlyphAtlas { scale, columns })
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn cell_width(&self) -> usize {
        CELL_W * self.scale
    }

    pub fn cell_height(&self) -> usize {
        CELL_H * self.scale
    }

    pub fn has_glyph(&self, byte: u8) -> bool {
        self.columns[byte as usize].is_some()
    }

    pub fn bytes(&self) -> impl Iterator<Item = u8> + '_ {
        (0..=255u8).filter(|&b| self.has_glyph(b))
    }

    /// Whether cell pixel `(x, y)` of `byte` is inked.
    pub fn ink(&self, byte: u8, x: usize, y: usize) -> bool {
        let (gx, gy) = (x / self.scale, y / self.scale);
        match self.columns[byte as usize] {
            Some(cols) if gx < GLYPH_COLS && gy < CELL_H => cols[gx] >> gy & 1 == 1,
            _ => false,
        }
    }

    /// Cell rows of `byte` as bit masks, bit `x` set for an inked column.
    pub fn row_bits(&self, byte: u8) -> Vec<u64> {
        (0..self.cell_height())
            .map(|y| {
                (0..self.cell_width())
                    .filter(|&x| self.ink(byte, x, y))
                    .fold(0u64, |acc, x| acc | 1 << x)
            })
            .collect()
    }

    /// Latin-1 bytes for `text`, rejecting characters without a glyph.
    pub fn encode(&self, text: &str) -> Result<Vec<u8>> {
        text.chars()
            .map(|c| {
                let code = c as u32;
                if code <= 0xFF && self.has_glyph(code as u8) {
                    Ok(code as u8)
                } else {
                    bail!(Rejected, "no glyph for character {c:?} (U+{code:04X})")
                }
            })
            .collect()
    }
}

/// Latin-1 decoding of a byte string.
pub fn decode(bytes: &[u8]) -> String {
    bytes.iter().map(|&b| b as char).collect()
}
