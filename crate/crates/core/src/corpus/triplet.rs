use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::concept::{enrich_concept, normalize_name, Concept, ConceptDictionary};
use super::image::ImageSample;
use super::phrases::extract_noun_phrases;
use crate::error::{Error, Result};

/// Source type of a training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Detection,
    Grounding,
    ImageText,
    Classification,
}

impl DataKind {
    pub const ALL: [DataKind; 4] = [
        DataKind::Detection,
        DataKind::Grounding,
        DataKind::ImageText,
        DataKind::Classification,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DataKind::Detection => "detection",
            DataKind::Grounding => "grounding",
            DataKind::ImageText => "image_text",
            DataKind::Classification => "classification",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "detection" => Some(DataKind::Detection),
            "grounding" => Some(DataKind::Grounding),
            "image_text" | "pairs" => Some(DataKind::ImageText),
            "classification" => Some(DataKind::Classification),
            _ => None,
        }
    }

    /// Whether samples of this kind carry box annotations.
    pub fn has_boxes(&self) -> bool {
        matches!(self, DataKind::Detection | DataKind::Grounding)
    }
}

impl fmt::Display for DataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxAnnotation {
    /// `(x1, y1, x2, y2)` in pixels.
    pub bbox: [f64; 4],
    /// Index into the owning triplet's concept list.
    pub concept: usize,
}

/// One training sample in the unified format: image, boxes, concept set.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub image: ImageSample,
    pub boxes: Vec<BoxAnnotation>,
    pub concepts: Vec<Concept>,
    pub kind: DataKind,
}

impl Triplet {
    /// Checks box/concept consistency for the triplet's kind.
    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(Error::InvalidInput(format!("triplet {} has no concepts", self.image.id)));
        }
        if !self.kind.has_boxes() && !self.boxes.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} triplet {} must not carry boxes",
                self.kind, self.image.id
            )));
        }
        for b in &self.boxes {
            validate_box(b.bbox, self.image.width(), self.image.height())?;
            if b.concept >= self.concepts.len() {
                return Err(Error::InvalidInput(format!(
                    "box concept index {} out of range for {} concepts",
                    b.concept,
                    self.concepts.len()
                )));
            }
        }
        Ok(())
    }

    pub fn concept_texts(&self) -> Vec<&str> {
        self.concepts.iter().map(|c| c.enriched.as_str()).collect()
    }
}

pub fn validate_box(bbox: [f64; 4], w: usize, h: usize) -> Result<()> {
    let [x1, y1, x2, y2] = bbox;
    let ok = bbox.iter().all(|v| v.is_finite())
        && x1 < x2
        && y1 < y2
        && x1 >= 0.0
        && y1 >= 0.0
        && x2 <= w as f64
        && y2 <= h as f64;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidBox { bbox, w, h })
    }
}

/// A detection image with category-labelled boxes.
#[derive(Debug, Clone)]
pub struct DetectionRecord {
    pub image: ImageSample,
    pub annotations: Vec<([f64; 4], String)>,
}

/// A grounding image: caption plus noun phrases linked to boxes.
#[derive(Debug, Clone)]
pub struct GroundingRecord {
    pub image: ImageSample,
    pub caption: String,
    pub phrases: Vec<([f64; 4], String)>,
}

/// Distinct names in first-occurrence order, compared after normalization.
fn distinct_names<'a>(names: impl Iterator<Item = &'a String>) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for n in names {
        let key = normalize_name(n);
        if !key.is_empty() && seen.insert(key) {
            out.push(n.trim().to_string());
        }
    }
    out
}

/// Positives followed by `m - |positives|` negatives drawn uniformly without
/// replacement from the dictionary entries that are not positives.
fn concept_set(positives: &[String], dictionary: &ConceptDictionary, m: usize, seed: u64) -> Result<Vec<Concept>> {
    if m < positives.len() {
        return Err(Error::InvalidInput(format!(
            "{} positive concepts exceed the concept budget M = {m}",
            positives.len()
        )));
    }
    let mut concepts: Vec<Concept> = positives.iter().map(|p| enrich_concept(p, dictionary)).collect();
    let pos_keys: HashSet<String> = positives.iter().map(|p| normalize_name(p)).collect();
    let pos_texts: HashSet<String> = concepts.iter().map(|c| c.enriched.clone()).collect();
    let mut pool: Vec<Concept> = dictionary
        .names()
        .filter(|n| !pos_keys.contains(&normalize_name(n)))
        .map(|n| enrich_concept(n, dictionary))
        .filter(|c| !pos_texts.contains(&c.enriched))
        .collect();
    let needed = m - positives.len();
    if pool.len() < needed {
        return Err(Error::DictionaryTooSmall {
            needed,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = pool.partial_shuffle(&mut rng, needed);
    concepts.extend(chosen.iter().cloned());
    Ok(concepts)
}

fn boxed_triplet(
    image: ImageSample,
    links: &[([f64; 4], String)],
    dictionary: &ConceptDictionary,
    m: usize,
    seed: u64,
    kind: DataKind,
) -> Result<Triplet> {
    if links.is_empty() {
        return Err(Error::InvalidInput(format!("{kind} record {} has no boxes", image.id)));
    }
    let positives = distinct_names(links.iter().map(|(_, n)| n));
    let concepts = concept_set(&positives, dictionary, m, seed)?;
    let boxes = links
        .iter()
        .map(|(bbox, name)| {
            let key = normalize_name(name);
            let concept = positives
                .iter()
                .position(|p| normalize_name(p) == key)
                .expect("every linked name is a positive");
            BoxAnnotation { bbox: *bbox, concept }
        })
        .collect();
    let t = Triplet {
        image,
        boxes,
        concepts,
        kind,
    };
    t.validate()?;
    Ok(t)
}

/// Detection triplet: the image's categories plus sampled negative
/// categories, `m` concepts in total, all enriched with definitions.
pub fn build_detection_triplet(
    record: &DetectionRecord,
    dictionary: &ConceptDictionary,
    m: usize,
    rng_seed: u64,
) -> Result<Triplet> {
    boxed_triplet(
        record.image.clone(),
        &record.annotations,
        dictionary,
        m,
        rng_seed,
        DataKind::Detection,
    )
}

/// Grounding triplet: linked noun phrases as positives plus negatives that
/// are disjoint from them.
pub fn build_grounding_triplet(
    record: &GroundingRecord,
    dictionary: &ConceptDictionary,
    m: usize,
    rng_seed: u64,
) -> Result<Triplet> {
    boxed_triplet(
        record.image.clone(),
        &record.phrases,
        dictionary,
        m,
        rng_seed,
        DataKind::Grounding,
    )
}

/// Merges concepts with identical enriched text, keeping first occurrences.
pub fn dedup_concepts(concepts: Vec<Concept>) -> Vec<Concept> {
    let mut seen = HashSet::new();
    concepts
        .into_iter()
        .filter(|c| seen.insert(c.enriched.clone()))
        .collect()
}

/// Image-text triplet: the caption itself followed by its noun phrases.
pub fn build_image_text_triplet(image: ImageSample, caption: &str) -> Result<Triplet> {
    let caption = caption.trim();
    if caption.is_empty() {
        return Err(Error::InvalidInput(format!("empty caption for image {}", image.id)));
    }
    let mut concepts = vec![Concept::plain(caption)];
    concepts.extend(extract_noun_phrases(caption).into_iter().map(Concept::plain));
    Ok(Triplet {
        image,
        boxes: Vec::new(),
        concepts: dedup_concepts(concepts),
        kind: DataKind::ImageText,
    })
}

/// Classification triplet: the category name serves as the caption.
pub fn build_classification_triplet(image: ImageSample, category: &str) -> Result<Triplet> {
    let category = category.trim();
    if category.is_empty() {
        return Err(Error::InvalidInput(format!("empty category for image {}", image.id)));
    }
    Ok(Triplet {
        image,
        boxes: Vec::new(),
        concepts: vec![Concept::plain(category)],
        kind: DataKind::Classification,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img() -> ImageSample {
        ImageSample::filled("img", 32, 32, [0.2; 3]).unwrap()
    }

    fn big_dict(n: usize) -> ConceptDictionary {
        let mut d = ConceptDictionary::new();
        d.insert("dog", Some("a domesticated carnivorous mammal")).unwrap();
        for i in 0..n {
            d.insert(&format!("thing{i}"), Some(&format!("definition {i}"))).unwrap();
        }
        d
    }

    #[test]
    fn detection_fills_to_m() {
        let rec = DetectionRecord {
            image: img(),
            annotations: vec![([1.0, 1.0, 10.0, 10.0], "dog".into())],
        };
        let t = build_detection_triplet(&rec, &big_dict(200), 150, 3).unwrap();
        assert_eq!(t.concepts.len(), 150);
        assert_eq!(t.concepts[0].enriched, "dog, a domesticated carnivorous mammal");
        assert_eq!(t.boxes[0].concept, 0);
        assert!(t.concepts[1..].iter().all(|c| c.name != "dog"));
        assert_eq!(t.kind, DataKind::Detection);
    }

    #[test]
    fn detection_without_room_for_negatives() {
        let d = ConceptDictionary::from_pairs([("a", None), ("b", None), ("c", None)]).unwrap();
        let rec = DetectionRecord {
            image: img(),
            annotations: vec![([0.0, 0.0, 4.0, 4.0], "a".into()), ([4.0, 4.0, 9.0, 9.0], "b".into())],
        };
        let t = build_detection_triplet(&rec, &d, 2, 0).unwrap();
        assert_eq!(t.concept_texts(), vec!["a", "b"]);
    }

    #[test]
    fn detection_is_deterministic_per_seed() {
        let rec = DetectionRecord {
            image: img(),
            annotations: vec![([1.0, 1.0, 10.0, 10.0], "dog".into())],
        };
        let d = big_dict(50);
        let a = build_detection_triplet(&rec, &d, 20, 9).unwrap();
        let b = build_detection_triplet(&rec, &d, 20, 9).unwrap();
        let c = build_detection_triplet(&rec, &d, 20, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.concepts, c.concepts);
    }

    #[test]
    fn dictionary_shortfall_is_reported() {
        let rec = DetectionRecord {
            image: img(),
            annotations: vec![([1.0, 1.0, 10.0, 10.0], "dog".into())],
        };
        let err = build_detection_triplet(&rec, &big_dict(3), 10, 0).unwrap_err();
        match err {
            Error::DictionaryTooSmall { needed, available } => {
                assert_eq!((needed, available), (9, 3));
            }
            e => panic!("unexpected {e}"),
        }
        assert!(err_text(&big_dict(3)).contains("short by 6"));
    }

    fn err_text(d: &ConceptDictionary) -> String {
        let rec = DetectionRecord {
            image: img(),
            annotations: vec![([1.0, 1.0, 10.0, 10.0], "dog".into())],
        };
        build_detection_triplet(&rec, d, 10, 0).unwrap_err().to_string()
    }

    #[test]
    fn grounding_positives_and_negatives_are_disjoint() {
        let mut d = big_dict(120);
        d.insert("red cube", None).unwrap();
        let rec = GroundingRecord {
            image: img(),
            caption: "a red cube near a blue ball and a dog".into(),
            phrases: vec![
                ([0.0, 0.0, 5.0, 5.0], "red cube".into()),
                ([5.0, 5.0, 9.0, 9.0], "blue ball".into()),
                ([9.0, 9.0, 20.0, 20.0], "dog".into()),
            ],
        };
        let t = build_grounding_triplet(&rec, &d, 100, 1).unwrap();
        assert_eq!(t.concepts.len(), 100);
        let pos: HashSet<_> = t.concepts[..3].iter().map(|c| c.enriched.clone()).collect();
        assert!(t.concepts[3..].iter().all(|c| !pos.contains(&c.enriched)));
        assert!(t.concepts[3..].iter().all(|c| c.name != "red cube"));
        assert_eq!(t.kind, DataKind::Grounding);

        let small = GroundingRecord {
            phrases: vec![
                ([0.0, 0.0, 5.0, 5.0], "a".into()),
                ([0.0, 0.0, 5.0, 5.0], "b".into()),
                ([0.0, 0.0, 5.0, 5.0], "c".into()),
            ],
            ..rec
        };
        let t = build_grounding_triplet(&small, &d, 3, 1).unwrap();
        assert_eq!(t.concepts.len(), 3);
    }

    #[test]
    fn boxes_outside_image_rejected() {
        let rec = DetectionRecord {
            image: img(),
            annotations: vec![([1.0, 1.0, 40.0, 10.0], "dog".into())],
        };
        assert!(matches!(
            build_detection_triplet(&rec, &big_dict(5), 2, 0),
            Err(Error::InvalidBox { .. })
        ));
    }

    #[test]
    fn image_text_examples() {
        let t = build_image_text_triplet(img(), "a red cube").unwrap();
        assert_eq!(t.concept_texts(), vec!["a red cube", "red cube"]);
        assert!(t.boxes.is_empty());
        assert_eq!(t.kind, DataKind::ImageText);
        let t = build_image_text_triplet(img(), "sky").unwrap();
        assert_eq!(t.concept_texts(), vec!["sky"]);
        assert!(build_image_text_triplet(img(), "  ").is_err());
    }

    #[test]
    fn classification_examples() {
        let t = build_classification_triplet(img(), "goldfish").unwrap();
        assert_eq!(t.concept_texts(), vec!["goldfish"]);
        assert!(t.boxes.is_empty());
        assert_eq!(t.kind, DataKind::Classification);
        t.validate().unwrap();
    }

    proptest! {
        #[test]
        fn detection_triplets_have_exactly_m_valid_concepts(
            n_pos in 1usize..5, extra in 0usize..20, seed in 0u64..1000,
        ) {
            let d = big_dict(30);
            let names: Vec<String> = (0..n_pos).map(|i| format!("thing{i}")).collect();
            let rec = DetectionRecord {
                image: img(),
                annotations: names.iter().map(|n| ([1.0, 2.0, 20.0, 30.0], n.clone())).collect(),
            };
            let m = n_pos + extra;
            let t = build_detection_triplet(&rec, &d, m, seed).unwrap();
            prop_assert_eq!(t.concepts.len(), m);
            let uniq: HashSet<_> = t.concepts.iter().map(|c| &c.enriched).collect();
            prop_assert_eq!(uniq.len(), m);
            prop_assert!(t.boxes.iter().all(|b| b.concept < m));
            prop_assert_eq!(build_detection_triplet(&rec, &d, m, seed).unwrap(), t);
        }
    }
}
