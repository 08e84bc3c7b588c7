//! Unified triplet construction from detection, grounding, image-text and
//! classification sources, plus the alternating batch schedule.

mod concept;
mod dataset;
mod image;
pub mod io;
mod phrases;
mod schedule;
mod triplet;

pub use concept::{enrich_concept, normalize_name, Concept, ConceptDictionary};
pub use dataset::Dataset;
pub use image::{ImageSample, ResizeInfo};
pub use phrases::{extract_noun_phrases, PhraseExtractor, StopwordChunker, STOPWORDS};
pub use schedule::{make_batch_schedule, make_batch_schedule_with_repeats, BatchGroup, ScheduledBatch};
pub use triplet::{
    build_classification_triplet, build_detection_triplet, build_grounding_triplet,
    build_image_text_triplet, dedup_concepts, validate_box, BoxAnnotation, DataKind,
    DetectionRecord, GroundingRecord, Triplet,
};
