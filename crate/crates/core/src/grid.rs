//! Labeled image grids with a tiny built-in bitmap font.

use crate::error::{Error, Result};
use crate::image::Image;

const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;
const STRIP: usize = GLYPH_H + 2;

// 3×5 glyphs, rows top to bottom, '1' = ink.
const GLYPHS: &[(char, &str)] = &[
    ('a', "010101111101101"),
    ('b', "110101110101110"),
    ('c', "011100100100011"),
    ('d', "110101101101110"),
    ('e', "111100110100111"),
    ('f', "111100110100100"),
    ('g', "011100101101011"),
    ('h', "101101111101101"),
    ('i', "111010010010111"),
    ('j', "001001001101010"),
    ('k', "101101110101101"),
    ('l', "100100100100111"),
    ('m', "101111111101101"),
    ('n', "110101101101101"),
    ('o', "010101101101010"),
    ('p', "110101110100100"),
    ('q', "010101101110011"),
    ('r', "110101110101101"),
    ('s', "011100010001110"),
    ('t', "111010010010010"),
    ('u', "101101101101111"),
    ('v', "101101101101010"),
    ('w', "101101111111101"),
    ('x', "101101010101101"),
    ('y', "101101010010010"),
    ('z', "111001010100111"),
    ('0', "111101101101111"),
    ('1', "010110010010111"),
    ('2', "110001010100111"),
    ('3', "110001010001110"),
    ('4', "101101111001001"),
    ('5', "111100110001110"),
    ('6', "011100111101111"),
    ('7', "111001010010010"),
    ('8', "111101111101111"),
    ('9', "111101111001110"),
    ('.', "000000000000010"),
    ('-', "000000111000000"),
    ('=', "000111000111000"),
    (':', "000010000010000"),
    ('/', "001001010100100"),
    ('_', "000000000000111"),
];

fn glyph(c: char) -> Option<&'static str> {
    let c = c.to_ascii_lowercase();
    GLYPHS.iter().find(|(g, _)| *g == c).map(|(_, b)| *b)
}

/// Draws `text` in black starting at (x, y); characters past the right edge
/// are dropped.
pub fn draw_text(img: &mut Image, x: usize, y: usize, text: &str) {
    let mut cx = x;
    for ch in text.chars() {
        if cx + GLYPH_W > img.width {
            break;
        }
        if let Some(bits) = glyph(ch) {
            for (i, b) in bits.bytes().enumerate() {
                let (gx, gy) = (i % GLYPH_W, i / GLYPH_W);
                if b == b'1' && y + gy < img.height {
                    img.set(cx + gx, y + gy, [0.0, 0.0, 0.0]);
                }
            }
        }
        cx += GLYPH_W + 1;
    }
}

/// Tiles images into `ceil(sqrt(N))` columns, each with a label strip below.
pub fn render_grid(images: &[Image], labels: &[String]) -> Result<Image> {
    if images.is_empty() {
        return Err(Error::Config("render_grid needs at least one image".into()));
    }
    if labels.len() != images.len() {
        return Err(Error::Config(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    let n = images.len();
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let cw = images.iter().map(|i| i.width).max().unwrap_or(0);
    let ch = images.iter().map(|i| i.height).max().unwrap_or(0) + STRIP;
    let gap = 1;
    let mut out = Image::filled(cols * cw + (cols - 1) * gap, rows * ch + (rows - 1) * gap, [1.0, 1.0, 1.0]);
    for (k, (img, label)) in images.iter().zip(labels).enumerate() {
        let ox = (k % cols) * (cw + gap);
        let oy = (k / cols) * (ch + gap);
        for y in 0..img.height {
            for x in 0..img.width {
                out.set(ox + x, oy + y, img.get(x, y));
            }
        }
        let mut cell = Image::filled(cw, STRIP, [1.0, 1.0, 1.0]);
        draw_text(&mut cell, 1, 1, label);
        for y in 0..STRIP {
            for x in 0..cw {
                out.set(ox + x, oy + img.height + y, cell.get(x, y));
            }
        }
    }
    Ok(out)
}

/// Number of columns `render_grid` uses for `n` images.
pub fn grid_columns(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_image_gets_label_strip() {
        let img = Image::filled(8, 8, [0.2, 0.4, 0.6]);
        let g = render_grid(std::slice::from_ref(&img), &["ab".into()]).unwrap();
        assert_eq!((g.width, g.height), (8, 8 + STRIP));
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(g.get(x, y), img.get(x, y));
            }
        }
        // some ink in the strip
        assert!((0..8).any(|x| (8..8 + STRIP).any(|y| g.get(x, y) == [0.0, 0.0, 0.0])));
    }

    #[test]
    fn layout_uses_ceil_sqrt_columns() {
        for n in 1..=10 {
            let imgs = vec![Image::new(4, 4); n];
            let labels = vec![String::new(); n];
            let g = render_grid(&imgs, &labels).unwrap();
            let cols = grid_columns(n);
            assert_eq!(g.width, cols * 4 + cols - 1);
            let rows = n.div_ceil(cols);
            assert_eq!(g.height, rows * (4 + STRIP) + rows - 1);
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let imgs = vec![Image::filled(6, 6, [0.5, 0.1, 0.9]); 3];
        let labels: Vec<String> = ["no adapter", "late", "full"].iter().map(|s| s.to_string()).collect();
        assert_eq!(render_grid(&imgs, &labels).unwrap(), render_grid(&imgs, &labels).unwrap());
        assert!(render_grid(&[], &[]).is_err());
    }
}
