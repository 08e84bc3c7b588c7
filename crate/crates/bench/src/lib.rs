//! Seeded inputs shared by the kernel benchmarks.

use ovdkit::corpus::{BoxAnnotation, Concept, DataKind, ImageSample, Triplet};
use ovdkit::evalx::{Detection, GroundTruthBox, ImageAnnotations, ImagePredictions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_box(r: &mut ChaCha8Rng, extent: f64) -> [f64; 4] {
    let (x, y) = (r.random_range(0.0..extent * 0.75), r.random_range(0.0..extent * 0.75));
    let (w, h) = (r.random_range(4.0..extent * 0.25), r.random_range(4.0..extent * 0.25));
    [x, y, x + w, y + h]
}

/// `n` boxes with uniform scores.
pub fn scored_boxes(seed: u64, n: usize) -> (Vec<[f64; 4]>, Vec<f64>) {
    let mut r = rng(seed);
    let boxes = (0..n).map(|_| random_box(&mut r, 256.0)).collect();
    let scores = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    (boxes, scores)
}

pub fn noise_image(id: &str, seed: u64, size: usize) -> ImageSample {
    let mut r = rng(seed);
    let px = (0..size * size * 3).map(|_| r.random_range(0.0..1.0f32)).collect();
    ImageSample::new(id, size, size, px).expect("valid image")
}

/// Detection batch of `n` 64×64 images with two boxes and `m` concepts each.
pub fn detection_batch(n: usize, m: usize) -> Vec<Triplet> {
    (0..n)
        .map(|i| Triplet {
            image: noise_image(&format!("b{i}"), i as u64, 64),
            boxes: vec![
                BoxAnnotation { bbox: [4.0, 6.0, 30.0, 34.0], concept: 0 },
                BoxAnnotation { bbox: [30.0, 28.0, 60.0, 58.0], concept: 1 },
            ],
            concepts: (0..m).map(|c| Concept::plain(format!("concept {c}"))).collect(),
            kind: DataKind::Detection,
        })
        .collect()
}

/// Predictions and annotations over `images` images and `classes` classes.
pub fn eval_instance(seed: u64, images: usize, classes: usize) -> (Vec<ImagePredictions>, Vec<ImageAnnotations>) {
    let mut r = rng(seed);
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for i in 0..images {
        let boxes: Vec<GroundTruthBox> = (0..5)
            .map(|_| GroundTruthBox { bbox: random_box(&mut r, 128.0), concept_index: r.random_range(0..classes) })
            .collect();
        let detections = (0..100)
            .map(|_| Detection {
                bbox: random_box(&mut r, 128.0),
                concept_index: r.random_range(0..classes),
                score: r.random_range(0.0..1.0),
            })
            .collect();
        preds.push(ImagePredictions { image_id: format!("i{i}"), detections });
        gts.push(ImageAnnotations { image_id: format!("i{i}"), boxes });
    }
    (preds, gts)
}
