use super::concept::ConceptDictionary;
use super::triplet::{
    build_detection_triplet, build_grounding_triplet, DataKind, DetectionRecord, GroundingRecord,
    Triplet,
};
use crate::error::Result;

/// Samples of one kind. Detection and grounding samples are materialized into
/// triplets on demand so negatives can be resampled every epoch.
#[derive(Debug, Clone)]
pub enum Dataset {
    Detection {
        records: Vec<DetectionRecord>,
        dictionary: ConceptDictionary,
        concepts_per_sample: usize,
    },
    Grounding {
        records: Vec<GroundingRecord>,
        dictionary: ConceptDictionary,
        concepts_per_sample: usize,
    },
    /// Prebuilt triplets (image-text, classification, or converted files).
    Triplets { kind: DataKind, triplets: Vec<Triplet> },
}

impl Dataset {
    pub fn kind(&self) -> DataKind {
        match self {
            Dataset::Detection { .. } => DataKind::Detection,
            Dataset::Grounding { .. } => DataKind::Grounding,
            Dataset::Triplets { kind, .. } => *kind,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Detection { records, .. } => records.len(),
            Dataset::Grounding { records, .. } => records.len(),
            Dataset::Triplets { triplets, .. } => triplets.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Triplet for sample `index`; `seed` drives negative sampling.
    pub fn triplet(&self, index: usize, seed: u64) -> Result<Triplet> {
        match self {
            Dataset::Detection {
                records,
                dictionary,
                concepts_per_sample,
            } => build_detection_triplet(&records[index], dictionary, *concepts_per_sample, seed),
            Dataset::Grounding {
                records,
                dictionary,
                concepts_per_sample,
            } => build_grounding_triplet(&records[index], dictionary, *concepts_per_sample, seed),
            Dataset::Triplets { triplets, .. } => Ok(triplets[index].clone()),
        }
    }
}
