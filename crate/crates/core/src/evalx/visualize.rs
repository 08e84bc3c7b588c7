use std::path::Path;

use font8x8::{UnicodeFonts, BASIC_FONTS};
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::data::{prepare_input, InferConfig};
use crate::corpus::{extract_noun_phrases, ImageSample};
use crate::encoder::{decode_boxes, Model};
use crate::error::{Error, Result};

/// Box colors, assigned by concept order and cycled.
pub const PALETTE: [[u8; 3]; 8] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

/// Smallest rendered side; small inputs are upscaled by an integer factor.
const MIN_RENDER_SIDE: usize = 256;

/// Best-matching region of one caption concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatch {
    pub concept: String,
    pub region: usize,
    /// Box in original image coordinates.
    pub bbox: [f64; 4],
    pub similarity: f64,
    pub color: [u8; 3],
}

/// Matches each noun phrase of `caption` to its most similar region.
pub fn align_caption(image: &ImageSample, caption: &str, model: &Model, cfg: &InferConfig) -> Result<Vec<AlignmentMatch>> {
    let concepts = extract_noun_phrases(caption);
    if concepts.is_empty() {
        return Err(Error::InvalidInput(format!("caption {caption:?} yields no concepts")));
    }
    let (input, scale) = prepare_input(image, cfg.resolution, model.config().max_stride());
    let regions = model.encode_image(&input)?;
    let boxes = decode_boxes(&regions);
    let refs: Vec<&str> = concepts.iter().map(String::as_str).collect();
    let text = model.encode_text_strs(&refs)?;
    Ok(concepts
        .iter()
        .zip(&text.embeddings)
        .enumerate()
        .map(|(i, (c, t))| {
            let (region, similarity) = regions
                .features
                .iter()
                .map(|f| f.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, s)| if s > best.1 { (k, s) } else { best });
            AlignmentMatch {
                concept: c.clone(),
                region,
                bbox: boxes[region].map(|v| v / scale),
                similarity,
                color: PALETTE[i % PALETTE.len()],
            }
        })
        .collect())
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, Rgb(c));
    }
}

fn draw_rect(img: &mut RgbImage, b: [i64; 4], thickness: i64, c: [u8; 3]) {
    for t in 0..thickness {
        for x in b[0]..=b[2] {
            put(img, x, b[1] + t, c);
            put(img, x, b[3] - t, c);
        }
        for y in b[1]..=b[3] {
            put(img, b[0] + t, y, c);
            put(img, b[2] - t, y, c);
        }
    }
}

fn draw_label(img: &mut RgbImage, x: i64, y: i64, text: &str, bg: [u8; 3]) {
    let w = 8 * text.chars().count() as i64 + 2;
    let x = x.min(img.width() as i64 - w).max(0);
    let y = y.min(img.height() as i64 - 10).max(0);
    for yy in y..y + 10 {
        for xx in x..x + w {
            put(img, xx, yy, bg);
        }
    }
    let luma = 0.299 * bg[0] as f64 + 0.587 * bg[1] as f64 + 0.114 * bg[2] as f64;
    let fg = if luma > 140.0 { [0, 0, 0] } else { [255, 255, 255] };
    for (i, ch) in text.chars().enumerate() {
        let glyph = BASIC_FONTS.get(ch).or_else(|| BASIC_FONTS.get('?')).unwrap_or([0; 8]);
        for (row, bits) in glyph.iter().enumerate() {
            for bit in 0..8 {
                if bits & (1 << bit) != 0 {
                    put(img, x + 1 + 8 * i as i64 + bit, y + 1 + row as i64, fg);
                }
            }
        }
    }
}

/// Renders the matches onto an upscaled copy of `image`.
pub fn render_alignment(image: &ImageSample, matches: &[AlignmentMatch]) -> RgbImage {
    let min_side = image.height().min(image.width());
    let f = MIN_RENDER_SIDE.div_ceil(min_side).max(1) as u32;
    let src = image.to_rgb8();
    let mut out = RgbImage::from_fn(src.width() * f, src.height() * f, |x, y| *src.get_pixel(x / f, y / f));
    let f = f as f64;
    for m in matches {
        let b = m.bbox.map(|v| (v * f).round() as i64);
        draw_rect(&mut out, [b[0], b[1], b[2] - 1, b[3] - 1], 2, m.color);
    }
    for m in matches {
        let b = m.bbox.map(|v| (v * f).round() as i64);
        draw_label(&mut out, b[0], b[1] - 10, &m.concept, m.color);
    }
    out
}

/// Draws each caption concept's best-matching region box and label, and
/// writes the result as PNG.
pub fn visualize_alignment(
    image: &ImageSample,
    caption: &str,
    model: &Model,
    cfg: &InferConfig,
    out_path: &Path,
) -> Result<Vec<AlignmentMatch>> {
    let matches = align_caption(image, caption, model, cfg)?;
    render_alignment(image, &matches).save_with_format(out_path, image::ImageFormat::Png)?;
    Ok(matches)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn two_concepts_two_boxes_and_stable_bytes() {
        let model = Model::new(EncoderConfig::default(), 1).unwrap();
        let img = ImageSample::filled("v", 64, 64, [0.4, 0.4, 0.4]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.png"), dir.path().join("b.png"));
        let m = visualize_alignment(&img, "a red circle and a blue star", &model, &InferConfig::default(), &a).unwrap();
        visualize_alignment(&img, "a red circle and a blue star", &model, &InferConfig::default(), &b).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].color, PALETTE[0]);
        assert_eq!(m[1].color, PALETTE[1]);
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let out = image::open(&a).unwrap().to_rgb8();
        assert_eq!(out.width(), 256);
        let count = |c: [u8; 3]| out.pixels().filter(|p| p.0 == c).count();
        assert!(count(PALETTE[0]) > 0 && count(PALETTE[1]) > 0);
    }

    #[test]
    fn errors() {
        let model = Model::new(EncoderConfig::default(), 1).unwrap();
        let img = ImageSample::filled("v", 64, 64, [0.4; 3]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        assert!(visualize_alignment(&img, "the and of", &model, &InferConfig::default(), &p).is_err());
        let bad = dir.path().join("missing").join("x.png");
        assert!(visualize_alignment(&img, "red circle", &model, &InferConfig::default(), &bad).is_err());
    }
}
