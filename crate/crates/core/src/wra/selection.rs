use serde::{Deserialize, Serialize};

use super::gather::GatheredConcepts;
use crate::assign::iou;
use crate::corpus::DataKind;
use crate::encoder::{decode_boxes, ConceptEmbeddings, RegionBatch};
use crate::error::{Error, Result};

/// Region objectness used to rank proposals for image-text alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Cls,
    Iou,
    Centerness,
    TextSimSample,
    TextSimBatch,
    TextSimBatchXCenterness,
}

impl Strategy {
    pub fn needs_text(&self) -> bool {
        matches!(self, Strategy::TextSimSample | Strategy::TextSimBatch | Strategy::TextSimBatchXCenterness)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSelectionConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub nms_iou: f64,
}

impl Default for ProposalSelectionConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TextSimBatch,
            k: 100,
            nms_iou: 0.6,
        }
    }
}

impl ProposalSelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("selection k must be >= 1".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config("nms_iou must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Effective top-k for a data kind; classification keeps one proposal.
    pub fn k_for(&self, kind: DataKind) -> usize {
        if kind == DataKind::Classification {
            1
        } else {
            self.k
        }
    }
}

fn max_sim(feature: &[f64], concepts: &[Vec<f64>]) -> f64 {
    concepts
        .iter()
        .map(|c| c.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Per-region objectness under `cfg.strategy`.
pub fn objectness_scores(
    batch: &RegionBatch,
    gathered: Option<&GatheredConcepts>,
    local_concepts: Option<&ConceptEmbeddings>,
    cfg: &ProposalSelectionConfig,
) -> Result<Vec<f64>> {
    let text = |c: Option<&[Vec<f64>]>| -> Result<Vec<f64>> {
        match c {
            Some(c) if !c.is_empty() => Ok(batch.features.iter().map(|f| max_sim(f, c)).collect()),
            _ => Err(Error::InvalidInput(format!("strategy {:?} needs a non-empty concept set", cfg.strategy))),
        }
    };
    let batch_c = gathered.map(|g| g.embeddings.as_slice());
    Ok(match cfg.strategy {
        Strategy::Cls => batch.cls_pred.clone(),
        Strategy::Iou => batch.iou_pred.clone(),
        Strategy::Centerness => batch.centerness.clone(),
        Strategy::TextSimSample => text(local_concepts.map(|c| c.embeddings.as_slice()))?,
        Strategy::TextSimBatch => text(batch_c)?,
        Strategy::TextSimBatchXCenterness => text(batch_c)?
            .into_iter()
            .zip(&batch.centerness)
            .map(|(s, c)| s * c)
            .collect(),
    })
}

/// Greedy non-maximum suppression. Boxes are visited by descending score
/// (ties by lower index); a box is dropped when its IoU with an already kept
/// box exceeds `iou_thresh`. Returns kept indices in visiting order.
pub fn nms(boxes: &[[f64; 4]], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// NMS over decoded boxes, then the top `k` survivors by score.
pub fn select_proposals(batch: &RegionBatch, scores: &[f64], cfg: &ProposalSelectionConfig, kind: DataKind) -> Vec<usize> {
    let boxes = decode_boxes(batch);
    let mut kept = nms(&boxes, scores, cfg.nms_iou);
    kept.truncate(cfg.k_for(kind));
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(boxes: Vec<[f64; 4]>) -> RegionBatch {
        let n = boxes.len();
        RegionBatch {
            boxes,
            features: (0..n).map(|i| vec![1.0, i as f64]).collect(),
            reg_deltas: vec![[0.0; 4]; n],
            centerness: vec![0.5; n],
            iou_pred: vec![0.25; n],
            cls_pred: vec![0.75; n],
            level_of: vec![0; n],
            image_size: (64, 64),
        }
    }

    #[test]
    fn nms_examples() {
        let disjoint = [[0.0, 0.0, 1.0, 1.0], [2.0, 2.0, 3.0, 3.0]];
        assert_eq!(nms(&disjoint, &[0.1, 0.2], 0.5), vec![1, 0]);
        let same = [[0.0, 0.0, 1.0, 1.0]; 3];
        assert_eq!(nms(&same, &[0.1, 0.9, 0.5], 0.5), vec![1]);
        // IoU 0.8 between the two boxes.
        let pair = [[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 8.0]];
        assert_eq!(nms(&pair, &[0.9, 0.8], 0.6), vec![0]);
        assert_eq!(nms(&same, &[0.5, 0.5, 0.5], 0.5), vec![0]);
    }

    #[test]
    fn objectness_strategies() {
        let mut b = batch(vec![[0.0, 0.0, 8.0, 8.0]]);
        b.features = vec![vec![1.0, 0.0, 0.0]];
        b.centerness = vec![0.5];
        let g = GatheredConcepts {
            texts: vec!["a".into(), "b".into(), "c".into()],
            embeddings: vec![vec![0.1, 0.0, 0.0], vec![0.8, 0.0, 0.0], vec![0.3, 0.0, 0.0]],
            per_sample_map: vec![vec![0, 1, 2]],
        };
        let local = ConceptEmbeddings { embeddings: g.embeddings.clone(), token_counts: vec![1; 3] };
        let cfg = |s| ProposalSelectionConfig { strategy: s, ..Default::default() };
        assert_eq!(objectness_scores(&b, Some(&g), None, &cfg(Strategy::TextSimBatch)).unwrap(), vec![0.8]);
        assert_eq!(objectness_scores(&b, Some(&g), Some(&local), &cfg(Strategy::TextSimSample)).unwrap(), vec![0.8]);
        assert_eq!(objectness_scores(&b, Some(&g), None, &cfg(Strategy::TextSimBatchXCenterness)).unwrap(), vec![0.4]);
        assert_eq!(objectness_scores(&b, None, None, &cfg(Strategy::Cls)).unwrap(), vec![0.75]);
        assert_eq!(objectness_scores(&b, None, None, &cfg(Strategy::Iou)).unwrap(), vec![0.25]);
        assert_eq!(objectness_scores(&b, None, None, &cfg(Strategy::Centerness)).unwrap(), vec![0.5]);
        assert!(objectness_scores(&b, None, None, &cfg(Strategy::TextSimBatch)).is_err());
    }

    #[test]
    fn selection_topk_and_classification() {
        let boxes: Vec<[f64; 4]> = (0..8).map(|i| [i as f64 * 8.0, 0.0, i as f64 * 8.0 + 6.0, 6.0]).collect();
        let b = batch(boxes);
        let scores: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let cfg = ProposalSelectionConfig { k: 3, ..Default::default() };
        assert_eq!(select_proposals(&b, &scores, &cfg, DataKind::ImageText), vec![7, 6, 5]);
        assert_eq!(select_proposals(&b, &scores, &cfg, DataKind::Classification), vec![7]);
        let big = ProposalSelectionConfig::default();
        assert_eq!(big.k, 100);
        assert_eq!(select_proposals(&b, &scores, &big, DataKind::ImageText).len(), 8);
    }

    #[test]
    fn validation() {
        assert!(ProposalSelectionConfig::default().validate().is_ok());
        assert!(ProposalSelectionConfig { k: 0, ..Default::default() }.validate().is_err());
        assert!(ProposalSelectionConfig { nms_iou: 1.0, ..Default::default() }.validate().is_err());
    }
}
