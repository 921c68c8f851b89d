//! Confusion-matrix rendering: a 5×5 grid with true grade down the side and
//! predicted grade across the top, cells shaded by row-normalized frequency
//! and labelled with their counts in a built-in bitmap font.

use std::path::Path;

use image::{Rgb, RgbImage};
use kneegrade_core::backbone::NUM_GRADES;
use kneegrade_core::metrics::ConfusionMatrix;
use kneegrade_core::{Error, Result};

const CELL: u32 = 56;
const MARGIN: u32 = 28;
const SCALE: u32 = 3;
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

/// 3×5 digit glyphs, one row per byte, most significant of the low 3 bits
/// on the left.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GRID: Rgb<u8> = Rgb([160, 160, 160]);

/// White at 0, deep blue at 1.
fn shade(frac: f64) -> Rgb<u8> {
    let f = frac.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * f).round() as u8;
    Rgb([lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0)])
}

/// Draws `text` (digits only) centered on `(cx, cy)`, shrinking the glyph
/// scale until it fits in `max_w`.
fn draw_number(img: &mut RgbImage, text: &str, cx: u32, cy: u32, max_w: u32, color: Rgb<u8>) {
    let n = text.len() as u32;
    let mut scale = SCALE;
    while scale > 1 && n * (GLYPH_W + 1) * scale > max_w {
        scale -= 1;
    }
    let width = n * (GLYPH_W + 1) * scale - scale;
    let x0 = cx.saturating_sub(width / 2);
    let y0 = cy.saturating_sub(GLYPH_H * scale / 2);
    for (k, ch) in text.bytes().enumerate() {
        let glyph = &DIGITS[(ch - b'0') as usize];
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits >> (GLYPH_W - 1 - col) & 1 == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let x = x0 + (k as u32 * (GLYPH_W + 1) + col) * scale + dx;
                        let y = y0 + row as u32 * scale + dy;
                        if x < img.width() && y < img.height() {
                            img.put_pixel(x, y, color);
                        }
                    }
                }
            }
        }
    }
}

/// Renders `cm` to an image. Row `t`, column `p` holds the count of true
/// grade `t` predicted as `p`; its shade is that count over the row total.
pub fn confusion_image(cm: &ConfusionMatrix) -> RgbImage {
    let side = MARGIN + NUM_GRADES as u32 * CELL + 1;
    let mut img = RgbImage::from_pixel(side, side, WHITE);
    let rows = cm.true_counts();
    for t in 0..NUM_GRADES {
        for p in 0..NUM_GRADES {
            let count = cm.get(p, t);
            let frac = if rows[t] == 0 { 0.0 } else { count as f64 / rows[t] as f64 };
            let (x0, y0) = (MARGIN + p as u32 * CELL, MARGIN + t as u32 * CELL);
            let fill = shade(frac);
            for y in y0..y0 + CELL {
                for x in x0..x0 + CELL {
                    let edge = x == x0 || y == y0;
                    img.put_pixel(x, y, if edge { GRID } else { fill });
                }
            }
            let ink = if frac > 0.5 { WHITE } else { BLACK };
            draw_number(&mut img, &count.to_string(), x0 + CELL / 2, y0 + CELL / 2, CELL - 6, ink);
        }
    }
    for x in MARGIN..side {
        img.put_pixel(x, side - 1, GRID);
    }
    for y in MARGIN..side {
        img.put_pixel(side - 1, y, GRID);
    }
    for g in 0..NUM_GRADES as u32 {
        let label = g.to_string();
        let centre = MARGIN + g * CELL + CELL / 2;
        draw_number(&mut img, &label, centre, MARGIN / 2, MARGIN, BLACK);
        draw_number(&mut img, &label, MARGIN / 2, centre, MARGIN, BLACK);
    }
    img
}

pub fn render_confusion(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    confusion_image(cm)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell_color(img: &RgbImage, t: u32, p: u32) -> Rgb<u8> {
        // A corner pixel just inside the grid lines, clear of the digits.
        *img.get_pixel(MARGIN + p * CELL + 2, MARGIN + t * CELL + 2)
    }

    #[test]
    fn identity_darkens_only_the_diagonal() {
        let mut counts = [[0u64; 5]; 5];
        for (g, row) in counts.iter_mut().enumerate() {
            row[g] = 10 + g as u64;
        }
        let img = confusion_image(&ConfusionMatrix::from_counts(counts));
        for t in 0..5 {
            for p in 0..5 {
                let c = cell_color(&img, t, p);
                if t == p {
                    assert_eq!(c, shade(1.0));
                } else {
                    assert_eq!(c, WHITE);
                }
            }
        }
    }

    #[test]
    fn rows_are_true_grades() {
        // Everything of true grade 1 predicted as 3.
        let mut counts = [[0u64; 5]; 5];
        counts[3][1] = 7;
        let img = confusion_image(&ConfusionMatrix::from_counts(counts));
        assert_eq!(cell_color(&img, 1, 3), shade(1.0));
        assert_eq!(cell_color(&img, 3, 1), WHITE);
    }

    #[test]
    fn encoding_is_byte_stable() {
        let cm = ConfusionMatrix::from_counts([[5, 1, 0, 0, 0], [2, 30, 4, 0, 0], [0, 3, 99, 2, 1], [0, 0, 1, 12, 3], [0, 0, 0, 1, 1234]]);
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        render_confusion(&cm, &a).unwrap();
        render_confusion(&cm, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let cm = ConfusionMatrix::default();
        assert!(render_confusion(&cm, Path::new("/nonexistent/dir/cm.png")).is_err());
    }
}
