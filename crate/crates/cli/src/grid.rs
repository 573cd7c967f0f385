//! Labelled image grids.

use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use latent_relight::{Error, ImageBuffer, Result};

pub const SEPARATOR: usize = 2;
pub const LABEL_BAND: usize = 12;
const GLYPH: usize = 8;
const BACKGROUND: f32 = 1.0;
const BAND: f32 = 0.0;
const INK: f32 = 1.0;

/// Tiles equally sized images row-major, `columns` per row, each under a
/// text label band, with separators between tiles.
pub fn compose_grid(images: &[ImageBuffer<f32>], labels: &[String], columns: usize) -> Result<ImageBuffer<f32>> {
    let first = images.first().ok_or_else(|| Error::InvalidInput("grid needs at least one image".into()))?;
    if labels.len() != images.len() {
        return Err(Error::InvalidInput(format!("{} labels for {} images", labels.len(), images.len())));
    }
    for img in images {
        first.ensure_same_dims(img)?;
    }
    let cols = columns.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let (h, w) = (first.height(), first.width());
    let cell_h = LABEL_BAND + h;
    let out_w = cols * w + (cols - 1) * SEPARATOR;
    let out_h = rows * cell_h + (rows - 1) * SEPARATOR;
    let mut out = ImageBuffer::filled(out_h, out_w, [BACKGROUND; 3]);
    for (i, (img, label)) in images.iter().zip(labels).enumerate() {
        let y0 = (i / cols) * (cell_h + SEPARATOR);
        let x0 = (i % cols) * (w + SEPARATOR);
        for y in 0..LABEL_BAND {
            for x in 0..w {
                for c in 0..3 {
                    out.set(y0 + y, x0 + x, c, BAND);
                }
            }
        }
        draw_text(&mut out, label, y0 + (LABEL_BAND - GLYPH) / 2, x0 + 2, x0 + w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.set(y0 + LABEL_BAND + y, x0 + x, c, img.get(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
    }
    Ok(out)
}

/// Draws `text` with its top-left corner at `(y0, x0)`, clipped at `x_end`.
fn draw_text(out: &mut ImageBuffer<f32>, text: &str, y0: usize, x0: usize, x_end: usize) {
    for (k, ch) in text.chars().enumerate() {
        let gx = x0 + k * GLYPH;
        if gx + GLYPH > x_end {
            break;
        }
        let glyph = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8]);
        for (dy, bits) in glyph.iter().enumerate() {
            for dx in 0..GLYPH {
                if bits & (1 << dx) != 0 {
                    for c in 0..3 {
                        out.set(y0 + dy, gx + dx, c, INK);
                    }
                }
            }
        }
    }
}

/// Composes a single-row grid and writes it as a PNG.
pub fn render_grid(images: &[ImageBuffer<f32>], labels: &[String], out_path: impl AsRef<Path>) -> Result<()> {
    compose_grid(images, labels, images.len())?.save_png(out_path)
}
