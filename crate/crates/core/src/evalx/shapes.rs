//! Synthetic "shapes world": colored shapes on noisy backgrounds with a
//! seen/unseen category split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::EvalSet;
use super::metrics::{GroundTruthBox, ImageAnnotations};
use crate::corpus::io::{write_jsonl, AnnotationEntry, CategoryEntry, DetectionFile, ImageEntry, ImageId, PairLine};
use crate::corpus::{build_image_text_triplet, Concept, ConceptDictionary, DataKind, Dataset, DetectionRecord, ImageSample};
use crate::error::{IoContext, Result};
use crate::rng::{stream_rng, Stream};
use crate::trainer::Corpora;

pub const COLORS: [(&str, [f32; 3]); 4] = [
    ("red", [0.9, 0.15, 0.15]),
    ("green", [0.15, 0.8, 0.2]),
    ("blue", [0.2, 0.3, 0.95]),
    ("yellow", [0.95, 0.9, 0.15]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Star,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Star];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
            Shape::Star => "star",
        }
    }

    /// Whether the unit-box point `(u, v)` in `[0, 1]²` lies inside the shape.
    fn contains(&self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v),
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => v <= 1.0 && (u - 0.5).abs() <= 0.5 * v,
            Shape::Star => point_in_polygon(u, v, &star_polygon()),
        }
    }
}

fn star_polygon() -> Vec<(f64, f64)> {
    (0..10)
        .map(|i| {
            let r = if i % 2 == 0 { 0.5 } else { 0.2 };
            let a = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            (0.5 + r * a.cos(), 0.5 + r * a.sin())
        })
        .collect()
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let ((xi, yi), (xj, yj)) = (poly[i], poly[j]);
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Words of negative-only dictionary entries; none of them is ever drawn.
pub const DISTRACTOR_COLORS: [&str; 8] = ["purple", "orange", "white", "black", "pink", "brown", "gray", "cyan"];
pub const DISTRACTOR_SHAPES: [&str; 8] = ["hexagon", "heart", "ring", "cross", "diamond", "arrow", "moon", "pentagon"];

/// The first `n` distractor names, color-major.
pub fn distractor_names(n: usize) -> Vec<String> {
    DISTRACTOR_COLORS
        .iter()
        .flat_map(|c| DISTRACTOR_SHAPES.iter().map(move |s| format!("{c} {s}")))
        .take(n)
        .collect()
}

/// A category: color index into [`COLORS`] and a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ShapeCategory {
    pub color: usize,
    pub shape: Shape,
}

impl ShapeCategory {
    pub fn name(&self) -> String {
        format!("{} {}", COLORS[self.color].0, self.shape.name())
    }
}

fn categories(pairs: [(usize, Shape); 4]) -> Vec<ShapeCategory> {
    pairs.into_iter().map(|(color, shape)| ShapeCategory { color, shape }).collect()
}

/// Red and green, each shape once. Every shape word occurs among seen names.
pub fn seen_categories() -> Vec<ShapeCategory> {
    categories([(0, Shape::Circle), (1, Shape::Square), (0, Shape::Triangle), (1, Shape::Star)])
}

/// Yellow and blue, each shape once. The color words never occur in
/// detection data.
pub fn unseen_categories() -> Vec<ShapeCategory> {
    categories([(3, Shape::Circle), (2, Shape::Square), (3, Shape::Triangle), (2, Shape::Star)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapesWorldConfig {
    pub seed: u64,
    pub image_size: usize,
    pub detection_images: usize,
    pub pair_images: usize,
    pub eval_images: usize,
    pub max_objects: usize,
    pub min_object: usize,
    pub max_object: usize,
    /// Per-pixel uniform noise amplitude.
    pub noise: f32,
    /// Negative-only names added to the detection dictionary.
    pub distractors: usize,
}

impl Default for ShapesWorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 64,
            detection_images: 96,
            pair_images: 96,
            eval_images: 48,
            max_objects: 3,
            min_object: 14,
            max_object: 28,
            noise: 0.08,
            distractors: 24,
        }
    }
}

/// One rendered object.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedShape {
    pub category: ShapeCategory,
    pub bbox: [f64; 4],
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], gap: f64) -> bool {
    a[0] < b[2] + gap && b[0] < a[2] + gap && a[1] < b[3] + gap && b[1] < a[3] + gap
}

/// Renders one image holding up to `max_objects` non-overlapping shapes drawn
/// from `pool`. Pixels are quantized to 8 bits so PNG round trips are exact.
pub fn render_image(
    id: &str,
    cfg: &ShapesWorldConfig,
    pool: &[ShapeCategory],
    rng: &mut ChaCha8Rng,
) -> Result<(ImageSample, Vec<PlacedShape>)> {
    let s = cfg.image_size;
    let n = rng.random_range(1..=cfg.max_objects.max(1));
    let mut placed: Vec<PlacedShape> = Vec::new();
    for _ in 0..n {
        let category = pool[rng.random_range(0..pool.len())];
        for _attempt in 0..30 {
            let side = rng.random_range(cfg.min_object..=cfg.max_object.min(s)) as f64;
            let x = rng.random_range(0..=(s - side as usize)) as f64;
            let y = rng.random_range(0..=(s - side as usize)) as f64;
            let bbox = [x, y, x + side, y + side];
            if placed.iter().all(|p| !overlaps(&p.bbox, &bbox, 2.0)) {
                placed.push(PlacedShape { category, bbox });
                break;
            }
        }
    }
    let base: f32 = rng.random_range(0.3..0.55);
    let mut px = vec![0f32; s * s * 3];
    for v in px.iter_mut() {
        *v = base + rng.random_range(-cfg.noise..=cfg.noise);
    }
    for p in &placed {
        let [x1, y1, x2, y2] = p.bbox;
        let color = COLORS[p.category.color].1;
        for yy in y1 as usize..y2 as usize {
            for xx in x1 as usize..x2 as usize {
                let u = (xx as f64 + 0.5 - x1) / (x2 - x1);
                let v = (yy as f64 + 0.5 - y1) / (y2 - y1);
                if p.category.shape.contains(u, v) {
                    for c in 0..3 {
                        px[(yy * s + xx) * 3 + c] = color[c] + rng.random_range(-0.04..=0.04);
                    }
                }
            }
        }
    }
    let px = px.into_iter().map(quantize).collect();
    Ok((ImageSample::new(id, s, s, px)?, placed))
}

/// Caption listing every object in placement order.
pub fn caption(placed: &[PlacedShape], rng: &mut ChaCha8Rng) -> String {
    const JOINERS: [&str; 3] = [" and ", " next to ", " near "];
    const OPENERS: [&str; 3] = ["a ", "there is a ", "here is a "];
    let mut out = OPENERS[rng.random_range(0..OPENERS.len())].to_string();
    for (i, p) in placed.iter().enumerate() {
        if i > 0 {
            out.push_str(JOINERS[rng.random_range(0..JOINERS.len())]);
            out.push_str("a ");
        }
        out.push_str(&p.category.name());
    }
    out
}

/// Generated benchmark held in memory.
#[derive(Debug, Clone)]
pub struct ShapesWorld {
    pub config: ShapesWorldConfig,
    /// Detection images with seen categories only.
    pub detection: Vec<DetectionRecord>,
    /// Seen category names and distractors.
    pub dictionary: ConceptDictionary,
    /// Caption-only images mixing seen and unseen categories.
    pub pairs: Vec<(ImageSample, String)>,
    pub eval: EvalSet,
}

impl ShapesWorld {
    pub fn generate(cfg: &ShapesWorldConfig) -> Result<Self> {
        let seen = seen_categories();
        let unseen = unseen_categories();
        let all: Vec<ShapeCategory> = seen.iter().chain(&unseen).copied().collect();
        let mut detection = Vec::new();
        for i in 0..cfg.detection_images {
            let mut rng = stream_rng(cfg.seed, Stream::Synthetic, i as u64);
            let (image, placed) = render_image(&format!("det_{i}"), cfg, &seen, &mut rng)?;
            detection.push(DetectionRecord {
                image,
                annotations: placed.iter().map(|p| (p.bbox, p.category.name())).collect(),
            });
        }
        let mut pairs = Vec::new();
        for i in 0..cfg.pair_images {
            let mut rng = stream_rng(cfg.seed, Stream::Synthetic, (1 << 32) + i as u64);
            let (image, placed) = render_image(&format!("pair_{i}"), cfg, &all, &mut rng)?;
            pairs.push((image, caption(&placed, &mut rng)));
        }
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        for i in 0..cfg.eval_images {
            let mut rng = stream_rng(cfg.seed, Stream::Synthetic, (2 << 32) + i as u64);
            let id = format!("eval_{i}");
            let (image, placed) = render_image(&id, cfg, &all, &mut rng)?;
            images.push(image);
            annotations.push(ImageAnnotations {
                image_id: id,
                boxes: placed
                    .iter()
                    .map(|p| GroundTruthBox {
                        bbox: p.bbox,
                        concept_index: all.iter().position(|c| *c == p.category).expect("known category"),
                    })
                    .collect(),
            });
        }
        let groups = BTreeMap::from([
            ("seen".to_string(), (0..seen.len()).collect()),
            ("unseen".to_string(), (seen.len()..all.len()).collect()),
        ]);
        let names: Vec<String> = seen
            .iter()
            .map(ShapeCategory::name)
            .chain(distractor_names(cfg.distractors))
            .collect();
        let dictionary = ConceptDictionary::from_pairs(names.iter().map(|n| (n.as_str(), None)))?;
        Ok(Self {
            config: cfg.clone(),
            detection,
            dictionary,
            pairs,
            eval: EvalSet {
                images,
                annotations,
                vocabulary: all.iter().map(|c| Concept::plain(c.name())).collect(),
                groups,
            },
        })
    }

    /// Training corpora: detection always, image-text pairs on request.
    pub fn corpora(&self, with_pairs: bool) -> Result<Corpora> {
        let mut c = Corpora::new();
        c.insert(Dataset::Detection {
            records: self.detection.clone(),
            dictionary: self.dictionary.clone(),
            concepts_per_sample: self.dictionary.len(),
        });
        if with_pairs {
            let triplets = self
                .pairs
                .iter()
                .map(|(img, cap)| build_image_text_triplet(img.clone(), cap))
                .collect::<Result<Vec<_>>>()?;
            c.insert(Dataset::Triplets {
                kind: DataKind::ImageText,
                triplets,
            });
        }
        Ok(c)
    }

    /// Writes images and split files under `dir`.
    pub fn write(&self, dir: &Path) -> Result<ShapesWorldPaths> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).at(&img_dir)?;
        let save = |img: &ImageSample| -> Result<ImageEntry> {
            let rel = format!("images/{}.png", img.id);
            img.save_png(&dir.join(&rel))?;
            Ok(ImageEntry {
                id: ImageId::Str(img.id.clone()),
                file: rel,
                h: img.height(),
                w: img.width(),
                caption: None,
            })
        };
        let category = |name: String, group: &str| CategoryEntry {
            name,
            definition: None,
            group: Some(group.to_string()),
        };

        let mut det = DetectionFile::default();
        for r in &self.detection {
            det.images.push(save(&r.image)?);
            for (bbox, name) in &r.annotations {
                det.annotations.push(AnnotationEntry {
                    image_id: ImageId::Str(r.image.id.clone()),
                    bbox: *bbox,
                    category: name.clone(),
                });
            }
        }
        det.categories = seen_categories().iter().map(|c| category(c.name(), "seen")).collect();
        det.categories
            .extend(distractor_names(self.config.distractors).into_iter().map(|n| category(n, "distractor")));
        let paths = ShapesWorldPaths {
            detection: dir.join("det.json"),
            pairs: dir.join("pairs.jsonl"),
            eval: dir.join("eval.json"),
        };
        det.save(&paths.detection)?;

        let mut lines = Vec::new();
        for (img, cap) in &self.pairs {
            let e = save(img)?;
            lines.push(PairLine {
                image: e.file,
                caption: cap.clone(),
            });
        }
        write_jsonl(&paths.pairs, &lines)?;

        let mut ev = DetectionFile::default();
        let group_of = |i: usize| {
            self.eval
                .groups
                .iter()
                .find(|(_, v)| v.contains(&i))
                .map_or("other", |(k, _)| k.as_str())
        };
        ev.categories = self
            .eval
            .vocabulary
            .iter()
            .enumerate()
            .map(|(i, c)| category(c.name.clone(), group_of(i)))
            .collect();
        for (img, ann) in self.eval.images.iter().zip(&self.eval.annotations) {
            ev.images.push(save(img)?);
            for b in &ann.boxes {
                ev.annotations.push(AnnotationEntry {
                    image_id: ImageId::Str(img.id.clone()),
                    bbox: b.bbox,
                    category: self.eval.vocabulary[b.concept_index].name.clone(),
                });
            }
        }
        ev.save(&paths.eval)?;
        Ok(paths)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesWorldPaths {
    pub detection: PathBuf,
    pub pairs: PathBuf,
    pub eval: PathBuf,
}
