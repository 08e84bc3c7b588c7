use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::metrics::{
    coco_thresholds, evaluate_ap, Detection, EvalOptions, EvalReport, GroundTruthBox, ImageAnnotations,
    ImagePredictions,
};
use crate::corpus::io::DetectionFile;
use crate::corpus::{normalize_name, Concept, ImageSample};
use crate::encoder::{decode_boxes, ConceptEmbeddings, Model};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use crate::wra::nms;

/// Inference settings.
#[derive(Debug, Clone, PartialEq)]
pub struct InferConfig {
    /// Images are fit into this `(h, w)` canvas before encoding.
    pub resolution: Option<(usize, usize)>,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            resolution: None,
            nms_iou: 0.6,
            max_detections: 300,
        }
    }
}

impl InferConfig {
    /// Settings of the `[eval]` section at the configured evaluation size.
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            resolution: Some(cfg.eval_resolution()),
            nms_iou: cfg.eval.nms_iou,
            max_detections: cfg.eval.max_detections,
        }
    }
}

/// Fits `image` into `resolution`, or zero-pads it to a multiple of
/// `stride` when no resolution is set. Returns the image and its scale.
pub(crate) fn prepare_input(image: &ImageSample, resolution: Option<(usize, usize)>, stride: usize) -> (ImageSample, f64) {
    let (h, w) = resolution.unwrap_or((image.height().div_ceil(stride) * stride, image.width().div_ceil(stride) * stride));
    if resolution.is_none() {
        let mut px = vec![0f32; h * w * 3];
        let src = image.pixels();
        let row = image.width() * 3;
        for y in 0..image.height() {
            px[y * w * 3..y * w * 3 + row].copy_from_slice(&src[y * row..(y + 1) * row]);
        }
        let img = ImageSample::new(image.id.clone(), h, w, px).expect("padded image is larger");
        return (img, 1.0);
    }
    let (img, info) = image.resize_fit(h, w);
    (img, info.scale)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Detections of `image` against precomputed vocabulary embeddings, in the
/// original image coordinates.
pub fn infer_with_embeddings(
    image: &ImageSample,
    text: &ConceptEmbeddings,
    model: &Model,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    if text.is_empty() {
        return Err(Error::InvalidInput("empty vocabulary".into()));
    }
    let (input, scale) = prepare_input(image, cfg.resolution, model.config().max_stride());
    let regions = model.encode_image(&input)?;
    let boxes: Vec<[f64; 4]> = decode_boxes(&regions)
        .into_iter()
        .map(|b| {
            let (h, w) = (image.height() as f64, image.width() as f64);
            [
                (b[0] / scale).clamp(0.0, w),
                (b[1] / scale).clamp(0.0, h),
                (b[2] / scale).clamp(0.0, w),
                (b[3] / scale).clamp(0.0, h),
            ]
        })
        .collect();
    let (ls, lb) = model.logit_scale();
    let mut out = Vec::new();
    for (m, t) in text.embeddings.iter().enumerate() {
        let scores: Vec<f64> = regions
            .features
            .iter()
            .zip(&regions.centerness)
            .map(|(f, c)| sigmoid(ls * f.iter().zip(t).map(|(a, b)| a * b).sum::<f64>() + lb) * c)
            .collect();
        for k in nms(&boxes, &scores, cfg.nms_iou) {
            out.push((
                k,
                Detection {
                    bbox: boxes[k],
                    concept_index: m,
                    score: scores[k],
                },
            ));
        }
    }
    out.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then(a.1.concept_index.cmp(&b.1.concept_index))
            .then(a.0.cmp(&b.0))
    });
    out.truncate(cfg.max_detections);
    Ok(out.into_iter().map(|(_, d)| d).collect())
}

/// Scores every anchor against every vocabulary concept
/// (`sigmoid(scale * sim + bias) * centerness`), applies per-class NMS and
/// keeps the best `max_detections`, sorted by score.
pub fn infer(image: &ImageSample, vocabulary: &[Concept], model: &Model, cfg: &InferConfig) -> Result<Vec<Detection>> {
    if vocabulary.is_empty() {
        return Err(Error::InvalidInput("empty vocabulary".into()));
    }
    infer_with_embeddings(image, &model.encode_texts(vocabulary)?, model, cfg)
}

/// Images, annotations and vocabulary of an evaluation split.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub images: Vec<ImageSample>,
    pub annotations: Vec<ImageAnnotations>,
    pub vocabulary: Vec<Concept>,
    /// Group name to vocabulary indices.
    pub groups: BTreeMap<String, Vec<usize>>,
}

impl EvalSet {
    /// Builds the split from a detection file; categories give the
    /// vocabulary (enriched with their definitions) and their groups.
    pub fn from_file(file: &DetectionFile, dir: &Path) -> Result<Self> {
        let vocabulary: Vec<Concept> = file
            .categories
            .iter()
            .map(|c| match &c.definition {
                Some(d) => Concept::with_definition(c.name.clone(), d.clone()),
                None => Concept::plain(c.name.clone()),
            })
            .collect();
        if vocabulary.is_empty() {
            return Err(Error::InvalidInput("evaluation split lists no categories".into()));
        }
        let index: HashMap<String, usize> = file
            .categories
            .iter()
            .enumerate()
            .map(|(i, c)| (normalize_name(&c.name), i))
            .collect();
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, c) in file.categories.iter().enumerate() {
            if let Some(g) = &c.group {
                groups.entry(g.clone()).or_default().push(i);
            }
        }
        let images = file.all_images(dir)?;
        let mut by_id: HashMap<String, Vec<GroundTruthBox>> = HashMap::new();
        let ids: std::collections::HashSet<String> = images.iter().map(|i| i.id.clone()).collect();
        for a in &file.annotations {
            let id = a.image_id.as_string();
            if !ids.contains(&id) {
                return Err(Error::UnknownImage(id));
            }
            let concept_index = *index
                .get(&normalize_name(&a.category))
                .ok_or_else(|| Error::InvalidInput(format!("annotation category {:?} is not listed", a.category)))?;
            by_id.entry(id).or_default().push(GroundTruthBox { bbox: a.bbox, concept_index });
        }
        let annotations = images
            .iter()
            .map(|im| ImageAnnotations {
                image_id: im.id.clone(),
                boxes: by_id.remove(&im.id).unwrap_or_default(),
            })
            .collect();
        Ok(Self {
            images,
            annotations,
            vocabulary,
            groups,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = DetectionFile::load(path)?;
        Self::from_file(&file, path.parent().unwrap_or(Path::new("")))
    }
}

/// Runs `f` on every item with up to `available_parallelism` threads,
/// keeping input order.
pub(crate) fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Predictions of `model` on every image of `set`.
pub fn predict(model: &Model, set: &EvalSet, cfg: &InferConfig) -> Result<Vec<ImagePredictions>> {
    let text = model.encode_texts(&set.vocabulary)?;
    par_map(&set.images, |img| {
        Ok(ImagePredictions {
            image_id: img.id.clone(),
            detections: infer_with_embeddings(img, &text, model, cfg)?,
        })
    })
    .into_iter()
    .collect()
}

/// Zero-shot evaluation of `model` on `set` at IoU 0.5:0.95.
pub fn evaluate(model: &Model, set: &EvalSet, cfg: &TrainConfig) -> Result<EvalReport> {
    let section = &cfg.eval;
    let cfg = InferConfig::from_config(cfg);
    let preds = predict(model, set, &cfg)?;
    let opts = EvalOptions {
        groups: set.groups.clone(),
        size_scale: section.size_scale,
        max_detections: section.max_detections,
    };
    evaluate_ap(&preds, &set.annotations, &coco_thresholds(), &opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> Model {
        Model::new(EncoderConfig::default(), 3).unwrap()
    }

    fn image() -> ImageSample {
        let px = (0..40 * 48 * 3).map(|i| ((i * 37) % 255) as f32 / 255.0).collect();
        ImageSample::new("x", 40, 48, px).unwrap()
    }

    #[test]
    fn output_is_sorted_capped_and_in_bounds() {
        let vocab: Vec<Concept> = ["red circle", "blue star", "dog"].map(Concept::plain).to_vec();
        let cfg = InferConfig { max_detections: 25, resolution: Some((64, 64)), ..Default::default() };
        let d = infer(&image(), &vocab, &model(), &cfg).unwrap();
        assert_eq!(d.len(), 25);
        assert!(d.windows(2).all(|w| w[0].score >= w[1].score));
        for x in &d {
            assert!(x.bbox[0] >= 0.0 && x.bbox[2] <= 48.0 && x.bbox[3] <= 40.0);
            assert!((0.0..=1.0).contains(&x.score) && x.concept_index < 3);
        }
        assert!(infer(&image(), &[], &model(), &cfg).is_err());
    }

    #[test]
    fn vocabulary_permutation_relabels() {
        let vocab: Vec<Concept> = ["red circle", "blue star", "dog"].map(Concept::plain).to_vec();
        let perm = [2usize, 0, 1];
        let pv: Vec<Concept> = perm.iter().map(|&i| vocab[i].clone()).collect();
        let cfg = InferConfig::default();
        let m = model();
        let a = infer(&image(), &vocab, &m, &cfg).unwrap();
        let b = infer(&image(), &pv, &m, &cfg).unwrap();
        let key = |d: &Detection, map: &dyn Fn(usize) -> usize| {
            (d.bbox.map(f64::to_bits), map(d.concept_index), d.score.to_bits())
        };
        let mut ka: Vec<_> = a.iter().map(|d| key(d, &|c| c)).collect();
        let mut kb: Vec<_> = b.iter().map(|d| key(d, &|c| perm[c])).collect();
        ka.sort();
        kb.sort();
        assert_eq!(ka, kb);
    }

    #[test]
    fn zero_model_is_uniform_and_deterministic() {
        let m = Model::zeros(EncoderConfig::default()).unwrap();
        let vocab: Vec<Concept> = ["a", "b"].map(Concept::plain).to_vec();
        let a = infer(&image(), &vocab, &m, &InferConfig::default()).unwrap();
        assert!(a.iter().all(|d| d.score == a[0].score));
        assert_eq!(a, infer(&image(), &vocab, &m, &InferConfig::default()).unwrap());
    }
}
