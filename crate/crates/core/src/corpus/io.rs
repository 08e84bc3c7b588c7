//! On-disk formats: detection/grounding JSON, image-text and classification
//! JSON-lines, concept dictionaries, and converted triplet JSON-lines.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::concept::{Concept, ConceptDictionary};
use super::image::ImageSample;
use super::triplet::{
    build_classification_triplet, build_detection_triplet, build_grounding_triplet,
    build_image_text_triplet, BoxAnnotation, DataKind, DetectionRecord, GroundingRecord, Triplet,
};
use crate::error::{Error, IoContext, Result};

/// Image ids may be written as strings or integers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageId {
    Int(u64),
    Str(String),
}

impl ImageId {
    pub fn as_string(&self) -> String {
        match self {
            ImageId::Int(i) => i.to_string(),
            ImageId::Str(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: ImageId,
    pub file: String,
    pub h: usize,
    pub w: usize,
    /// Grounding splits carry the source caption.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationEntry {
    pub image_id: ImageId,
    pub bbox: [f64; 4],
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    /// Evaluation grouping such as `seen` / `unseen`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
}

/// Detection or grounding split: one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub images: Vec<ImageEntry>,
    pub annotations: Vec<AnnotationEntry>,
    #[serde(default)]
    pub categories: Vec<CategoryEntry>,
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_image_checked(path: &Path, id: &str, h: usize, w: usize) -> Result<ImageSample> {
    let img = ImageSample::load(path, id)?;
    if img.height() != h || img.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "image {id} is {}x{} but the split declares {h}x{w}",
            img.height(),
            img.width()
        )));
    }
    Ok(img)
}

impl DetectionFile {
    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).at(path)?;
        Ok(serde_json::from_reader(BufReader::new(f))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).at(path)?;
        serde_json::to_writer(BufWriter::new(f), self)?;
        Ok(())
    }

    /// Dictionary built from the split's category list.
    pub fn dictionary(&self) -> Result<ConceptDictionary> {
        ConceptDictionary::from_pairs(
            self.categories
                .iter()
                .map(|c| (c.name.as_str(), c.definition.as_deref())),
        )
    }

    fn annotations_by_image(&self) -> HashMap<String, Vec<([f64; 4], String)>> {
        let mut by_image: HashMap<String, Vec<([f64; 4], String)>> = HashMap::new();
        for a in &self.annotations {
            by_image
                .entry(a.image_id.as_string())
                .or_default()
                .push((a.bbox, a.category.clone()));
        }
        by_image
    }

    fn check_ids(&self) -> Result<()> {
        let ids: std::collections::HashSet<String> = self.images.iter().map(|i| i.id.as_string()).collect();
        for a in &self.annotations {
            if !ids.contains(&a.image_id.as_string()) {
                return Err(Error::UnknownImage(a.image_id.as_string()));
            }
        }
        Ok(())
    }

    /// Loads every image that has at least one annotation. `dir` resolves
    /// relative `file` entries.
    pub fn detection_records(&self, dir: &Path) -> Result<Vec<DetectionRecord>> {
        self.check_ids()?;
        let mut by_image = self.annotations_by_image();
        let mut out = Vec::new();
        for im in &self.images {
            let id = im.id.as_string();
            let Some(annotations) = by_image.remove(&id) else { continue };
            let image = load_image_checked(&resolve(dir, &im.file), &id, im.h, im.w)?;
            out.push(DetectionRecord { image, annotations });
        }
        Ok(out)
    }

    pub fn grounding_records(&self, dir: &Path) -> Result<Vec<GroundingRecord>> {
        self.check_ids()?;
        let mut by_image = self.annotations_by_image();
        let mut out = Vec::new();
        for im in &self.images {
            let id = im.id.as_string();
            let Some(phrases) = by_image.remove(&id) else { continue };
            let image = load_image_checked(&resolve(dir, &im.file), &id, im.h, im.w)?;
            let caption = im
                .caption
                .clone()
                .unwrap_or_else(|| phrases.iter().map(|(_, p)| p.as_str()).collect::<Vec<_>>().join(". "));
            out.push(GroundingRecord { image, caption, phrases });
        }
        Ok(out)
    }

    /// Loads every listed image, including ones without annotations.
    pub fn all_images(&self, dir: &Path) -> Result<Vec<ImageSample>> {
        self.images
            .iter()
            .map(|im| load_image_checked(&resolve(dir, &im.file), &im.id.as_string(), im.h, im.w))
            .collect()
    }

    pub fn load_detection_records(path: &Path) -> Result<(Self, Vec<DetectionRecord>)> {
        let f = Self::load(path)?;
        let recs = f.detection_records(&base_dir(path))?;
        Ok((f, recs))
    }
}

/// One line of an image-text JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLine {
    pub image: String,
    pub caption: String,
}

/// One line of a classification JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationLine {
    pub image: String,
    pub category: String,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).at(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.at(path)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let f = File::create(path).at(path)?;
    let mut w = BufWriter::new(f);
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n").at(path)?;
    }
    w.flush().at(path)?;
    Ok(())
}

fn image_stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Image-text triplets from a JSON-lines pair file.
pub fn load_pairs(path: &Path) -> Result<Vec<Triplet>> {
    let base = base_dir(path);
    read_jsonl::<PairLine>(path)?
        .into_iter()
        .map(|l| {
            let img = ImageSample::load(&resolve(&base, &l.image), image_stem(&l.image))?;
            build_image_text_triplet(img, &l.caption)
        })
        .collect()
}

/// Classification triplets from a JSON-lines file.
pub fn load_classification(path: &Path) -> Result<Vec<Triplet>> {
    let base = base_dir(path);
    read_jsonl::<ClassificationLine>(path)?
        .into_iter()
        .map(|l| {
            let img = ImageSample::load(&resolve(&base, &l.image), image_stem(&l.image))?;
            build_classification_triplet(img, &l.category)
        })
        .collect()
}

/// Serialized triplet; pixels stay in the referenced image file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletLine {
    pub id: String,
    pub image: String,
    pub h: usize,
    pub w: usize,
    pub kind: DataKind,
    pub boxes: Vec<BoxAnnotation>,
    pub concepts: Vec<Concept>,
}

impl TripletLine {
    pub fn from_triplet(t: &Triplet, image_path: &str) -> Self {
        Self {
            id: t.image.id.clone(),
            image: image_path.to_string(),
            h: t.image.height(),
            w: t.image.width(),
            kind: t.kind,
            boxes: t.boxes.clone(),
            concepts: t.concepts.clone(),
        }
    }
}

/// Reads converted triplets back, loading the referenced images.
pub fn load_triplets(path: &Path) -> Result<Vec<Triplet>> {
    let base = base_dir(path);
    read_jsonl::<TripletLine>(path)?
        .into_iter()
        .map(|l| {
            let image = load_image_checked(&resolve(&base, &l.image), &l.id, l.h, l.w)?;
            let t = Triplet {
                image,
                boxes: l.boxes,
                concepts: l.concepts,
                kind: l.kind,
            };
            t.validate()?;
            Ok(t)
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct ConvertOptions {
    /// Concepts per detection/grounding triplet; defaults to 150 / 100.
    pub concepts_per_sample: Option<usize>,
    pub seed: u64,
    /// Extra dictionary merged after the split's own categories.
    pub dictionary: Option<PathBuf>,
}

pub const DEFAULT_DETECTION_CONCEPTS: usize = 150;
pub const DEFAULT_GROUNDING_CONCEPTS: usize = 100;

/// Converts a raw split into triplet JSON-lines. Image paths in the output
/// are absolute. Returns the number of triplets written.
pub fn convert(kind: DataKind, input: &Path, output: &Path, opts: &ConvertOptions) -> Result<usize> {
    let base = base_dir(input);
    let abs = |file: &str| -> String {
        let p = resolve(&base, file);
        std::fs::canonicalize(&p).unwrap_or(p).to_string_lossy().into_owned()
    };
    let lines: Vec<TripletLine> = match kind {
        DataKind::Detection | DataKind::Grounding => {
            let file = DetectionFile::load(input)?;
            let mut dict = file.dictionary()?;
            if let Some(extra) = &opts.dictionary {
                let more = ConceptDictionary::load(extra)?;
                for name in more.names() {
                    if !dict.contains(name) {
                        dict.insert(name, more.definition(name))?;
                    }
                }
            }
            let files: HashMap<String, String> = file
                .images
                .iter()
                .map(|im| (im.id.as_string(), abs(&im.file)))
                .collect();
            let mut out = Vec::new();
            if kind == DataKind::Detection {
                let m = opts.concepts_per_sample.unwrap_or(DEFAULT_DETECTION_CONCEPTS);
                for (i, rec) in file.detection_records(&base)?.iter().enumerate() {
                    let t = build_detection_triplet(rec, &dict, m, crate::rng::derive_seed(&[opts.seed, i as u64]))?;
                    out.push(TripletLine::from_triplet(&t, &files[&t.image.id]));
                }
            } else {
                let m = opts.concepts_per_sample.unwrap_or(DEFAULT_GROUNDING_CONCEPTS);
                for (i, rec) in file.grounding_records(&base)?.iter().enumerate() {
                    let t = build_grounding_triplet(rec, &dict, m, crate::rng::derive_seed(&[opts.seed, i as u64]))?;
                    out.push(TripletLine::from_triplet(&t, &files[&t.image.id]));
                }
            }
            out
        }
        DataKind::ImageText => {
            let lines = read_jsonl::<PairLine>(input)?;
            let triplets = load_pairs(input)?;
            triplets
                .iter()
                .zip(&lines)
                .map(|(t, l)| TripletLine::from_triplet(t, &abs(&l.image)))
                .collect()
        }
        DataKind::Classification => {
            let lines = read_jsonl::<ClassificationLine>(input)?;
            let triplets = load_classification(input)?;
            triplets
                .iter()
                .zip(&lines)
                .map(|(t, l)| TripletLine::from_triplet(t, &abs(&l.image)))
                .collect()
        }
    };
    write_jsonl(output, &lines)?;
    Ok(lines.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_file_schema() {
        let json = r#"{"images":[{"id":1,"file":"a.png","h":16,"w":16}],
            "annotations":[{"image_id":1,"bbox":[1,2,3,4],"category":"dog"}],
            "categories":[{"name":"dog","definition":"a pet"},{"name":"cat"}]}"#;
        let f: DetectionFile = serde_json::from_str(json).unwrap();
        assert_eq!(f.images[0].id, ImageId::Int(1));
        let d = f.dictionary().unwrap();
        assert_eq!(d.definition("dog"), Some("a pet"));
        assert!(d.contains("cat"));
    }

    #[test]
    fn unknown_image_reference_is_an_error() {
        let f = DetectionFile {
            images: vec![],
            annotations: vec![AnnotationEntry {
                image_id: ImageId::Str("x".into()),
                bbox: [0.0, 0.0, 1.0, 1.0],
                category: "dog".into(),
            }],
            categories: vec![],
        };
        assert!(matches!(f.detection_records(Path::new(".")), Err(Error::UnknownImage(_))));
    }

    #[test]
    fn convert_pairs_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageSample::filled("p0", 16, 16, [0.5, 0.1, 0.9]).unwrap();
        img.save_png(&dir.path().join("p0.png")).unwrap();
        std::fs::write(
            dir.path().join("pairs.jsonl"),
            "{\"image\":\"p0.png\",\"caption\":\"a red cube on the table\"}\n",
        )
        .unwrap();
        let out = dir.path().join("out.jsonl");
        let n = convert(DataKind::ImageText, &dir.path().join("pairs.jsonl"), &out, &ConvertOptions::default()).unwrap();
        assert_eq!(n, 1);
        let back = load_triplets(&out).unwrap();
        assert_eq!(back[0].concept_texts(), vec!["a red cube on the table", "red cube", "table"]);
        assert_eq!(back[0].kind, DataKind::ImageText);
    }
}
