use std::path::Path;

use super::*;
use crate::corpus::{build_classification_triplet, BoxAnnotation, Concept, DataKind, ImageSample, Triplet};
use crate::encoder::{Checkpoint, Model};
use crate::error::Error;
use crate::evalx::{ShapesWorld, ShapesWorldConfig};

fn world(det: usize, pairs: usize) -> ShapesWorld {
    ShapesWorld::generate(&ShapesWorldConfig {
        detection_images: det,
        pair_images: pairs,
        eval_images: 2,
        distractors: 8,
        ..Default::default()
    })
    .unwrap()
}

fn small_cfg(epochs: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.train.epochs = epochs;
    c.wra.k = 20;
    c
}

fn model() -> Model {
    Model::new(crate::encoder::EncoderConfig::default(), 5).unwrap()
}

fn boxed(kind: DataKind) -> Triplet {
    let image = ImageSample::filled("g", 64, 64, [0.3, 0.5, 0.2]).unwrap();
    Triplet {
        image,
        boxes: vec![BoxAnnotation { bbox: [8.0, 8.0, 40.0, 36.0], concept: 0 }],
        concepts: vec![Concept::plain("red circle"), Concept::plain("blue star")],
        kind,
    }
}

fn image_text() -> Vec<Triplet> {
    world(0, 4).corpora(true).unwrap().get(DataKind::ImageText).unwrap().triplet(0, 0).map(|t| vec![t]).unwrap()
}

#[test]
fn detection_reports_three_terms_that_rebuild_total() {
    let mut cfg = small_cfg(1);
    cfg.loss.alpha = 3.0;
    cfg.loss.beta = 0.5;
    let r = step_loss(&model(), &[boxed(DataKind::Detection)], &cfg).unwrap();
    let keys: Vec<&str> = r.loss_terms.keys().map(String::as_str).collect();
    assert_eq!(keys, [TERM_ALIGN, TERM_CENTER, TERM_REG]);
    assert!((r.reconstruct_total(&cfg) - r.loss_total).abs() < 1e-6);
}

#[test]
fn grounding_image_text_and_classification_terms() {
    let cfg = small_cfg(1);
    let g = step_loss(&model(), &[boxed(DataKind::Grounding)], &cfg).unwrap();
    assert_eq!(g.loss_terms.keys().collect::<Vec<_>>(), [TERM_ALIGN]);
    assert!((g.reconstruct_total(&cfg) - g.loss_total).abs() < 1e-6);

    let mut batch = image_text();
    let mut other = batch[0].clone();
    other.image.id = "other".into();
    other.concepts.reverse();
    batch.push(other);
    let it = step_loss(&model(), &batch, &cfg).unwrap();
    assert_eq!(it.loss_terms.keys().collect::<Vec<_>>(), [TERM_CTS]);
    assert!((it.reconstruct_total(&cfg) - it.loss_total).abs() < 1e-6);

    let img = ImageSample::filled("c", 32, 32, [0.1; 3]).unwrap();
    let cls = vec![
        build_classification_triplet(img.clone(), "cat").unwrap(),
        build_classification_triplet(img, "dog").unwrap(),
    ];
    let c = step_loss(&model(), &cls, &cfg).unwrap();
    assert_eq!(c.loss_terms.keys().collect::<Vec<_>>(), [TERM_CLS]);
}

#[test]
fn mixed_or_empty_batches_are_rejected() {
    let cfg = small_cfg(1);
    let mixed = [boxed(DataKind::Detection), boxed(DataKind::Grounding)];
    assert!(matches!(step_loss(&model(), &mixed, &cfg), Err(Error::MixedKinds(..))));
    assert!(step_loss(&model(), &[], &cfg).is_err());
}

#[test]
fn zero_epochs_and_empty_corpora_are_rejected() {
    let w = world(4, 0);
    let c = w.corpora(false).unwrap();
    assert!(matches!(Trainer::new(small_cfg(0), &c), Err(Error::Config(_))));
    assert!(Trainer::new(small_cfg(1), &Corpora::new()).is_err());
}

#[test]
fn fit_triplet_rescales_and_drops_slivers() {
    let image = ImageSample::filled("f", 32, 64, [0.0; 3]).unwrap();
    let t = Triplet {
        image,
        boxes: vec![
            BoxAnnotation { bbox: [0.0, 0.0, 32.0, 16.0], concept: 0 },
            BoxAnnotation { bbox: [10.0, 10.0, 11.5, 20.0], concept: 0 },
        ],
        concepts: vec![Concept::plain("a")],
        kind: DataKind::Detection,
    };
    let f = fit_triplet(&t, (16, 16));
    assert_eq!((f.image.height(), f.image.width()), (16, 16));
    assert_eq!(f.boxes.len(), 1);
    assert_eq!(f.boxes[0].bbox, [0.0, 0.0, 8.0, 4.0]);
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn runs_are_deterministic_and_logs_exclude_timing() {
    let w = world(8, 8);
    let c = w.corpora(true).unwrap();
    let cfg = small_cfg(1);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ma, oa) = train(&c, &cfg, a.path()).unwrap();
    let (mb, _) = train(&c, &cfg, b.path()).unwrap();
    let (la, lb) = (read(&oa.metrics), read(&b.path().join(METRICS_FILE)));
    assert_eq!(la, lb);
    assert!(!la.contains("iter_time"));
    assert_eq!(read(&a.path().join(TIMING_FILE)).lines().count(), oa.reports.len());
    assert_eq!(oa.reports.len(), 2 + 1);
    assert!(oa.reports.iter().any(|r| r.kind == DataKind::ImageText));
    assert_eq!(ma.params(), mb.params());
    assert!(a.path().join("epoch_1.ckpt").exists() && a.path().join(LAST_CHECKPOINT).exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let w = world(8, 8);
    let c = w.corpora(true).unwrap();
    let cfg = small_cfg(4);
    let full = tempfile::tempdir().unwrap();
    let (mf, of) = train(&c, &cfg, full.path()).unwrap();
    assert_eq!(of.reports.len(), 12);

    let split = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.train.max_steps = Some(5);
    let (_, o1) = train(&c, &first, split.path()).unwrap();
    assert_eq!(o1.reports.len(), 5);
    let (mr, _) = resume(&o1.checkpoint, &cfg, &c, split.path()).unwrap();
    assert_eq!(read(&of.metrics), read(&split.path().join(METRICS_FILE)));
    assert_eq!(mf.params(), mr.params());
}

#[test]
fn resume_rejects_bad_checkpoints() {
    let w = world(4, 0);
    let c = w.corpora(false).unwrap();
    let cfg = small_cfg(1);
    let dir = tempfile::tempdir().unwrap();
    let (_, o) = train(&c, &cfg, dir.path()).unwrap();

    let mut other = cfg.clone();
    other.train.lr *= 2.0;
    other.loss.alpha = 1.0;
    match Trainer::resume(&o.checkpoint, other, &c) {
        Err(Error::ConfigMismatch(keys)) => assert_eq!(keys, ["loss.alpha", "train.lr"]),
        r => panic!("expected mismatch, got {:?}", r.err()),
    }

    let bytes = std::fs::read(&o.checkpoint).unwrap();
    let corrupt = dir.path().join("corrupt.ckpt");
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0xff;
    std::fs::write(&corrupt, &flipped).unwrap();
    assert!(matches!(Trainer::resume(&corrupt, cfg.clone(), &c), Err(Error::CorruptCheckpoint(_))));
    std::fs::write(&corrupt, &bytes[..bytes.len() / 3]).unwrap();
    assert!(Trainer::resume(&corrupt, cfg.clone(), &c).is_err());

    let mut versioned = bytes.clone();
    versioned[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&corrupt, &versioned).unwrap();
    assert!(matches!(
        Trainer::resume(&corrupt, cfg.clone(), &c),
        Err(Error::CheckpointVersion { found: 99, .. })
    ));

    let ck = Checkpoint::load(&o.checkpoint).unwrap();
    assert_eq!(ck.meta["step"], 1);
    let (m, stored) = load_trained(&o.checkpoint).unwrap();
    assert_eq!(stored.unwrap(), cfg);
    assert_eq!(m.config(), &cfg.encoder);
}

#[test]
fn non_finite_loss_aborts_with_report() {
    let w = world(4, 0);
    let c = w.corpora(false).unwrap();
    let mut t = Trainer::new(small_cfg(1), &c).unwrap();
    let p = t.model().params();
    let id = p.ids().find(|&i| p.group(i) == crate::autograd::ParamGroup::LogitScale).unwrap();
    t.model_mut().params_mut().get_mut(id).data_mut()[0] = f64::NAN;
    match t.train_step() {
        Err(Error::NonFiniteLoss { step, report }) => {
            assert_eq!(step, 1);
            assert!(report.contains("loss_total"));
        }
        r => panic!("expected non-finite loss, got {r:?}"),
    }
}

#[test]
fn overfits_four_detection_samples() {
    let w = world(4, 0);
    let c = w.corpora(false).unwrap();
    let mut cfg = small_cfg(200);
    cfg.train.lr = 3e-3;
    let mut t = Trainer::new(cfg, &c).unwrap();
    assert_eq!(t.steps_per_epoch(), 1);
    let first = t.train_step().unwrap().loss_total;
    let mut last = first;
    for _ in 1..200 {
        last = t.train_step().unwrap().loss_total;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn text_group_uses_reduced_learning_rate() {
    let w = world(4, 0);
    let c = w.corpora(false).unwrap();
    let mut cfg = small_cfg(1);
    cfg.train.text_lr_mult = 0.0;
    let mut t = Trainer::new(cfg, &c).unwrap();
    let before = t.model().params().clone();
    t.train_step().unwrap();
    let p = t.model().params();
    for id in p.ids() {
        let same = p.get(id) == before.get(id);
        assert_eq!(same, p.group(id) == crate::autograd::ParamGroup::Text, "{}", p.name(id));
    }
}
