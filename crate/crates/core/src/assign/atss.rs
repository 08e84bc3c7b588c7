use crate::autograd::Tensor;

/// Default number of center-nearest candidates per level.
pub const DEFAULT_TOPK_PER_LEVEL: usize = 9;

/// Alignment targets for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    /// `K × M` binary matrix.
    pub values: Tensor,
    pub positive_mask: Vec<bool>,
    pub matched_gt: Vec<Option<usize>>,
}

impl TargetMatrix {
    pub fn num_positives(&self) -> usize {
        self.positive_mask.iter().filter(|p| **p).count()
    }

    pub fn positives(&self) -> Vec<usize> {
        (0..self.positive_mask.len()).filter(|&k| self.positive_mask[k]).collect()
    }
}

pub fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn center(b: &[f64; 4]) -> (f64, f64) {
    (0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))
}

fn center_inside(p: (f64, f64), g: &[f64; 4]) -> bool {
    p.0 > g[0] && p.0 < g[2] && p.1 > g[1] && p.1 < g[3]
}

/// Orders two ground truths claiming the same anchor: higher IoU wins, then
/// the lexicographically smaller (box, concept) pair.
fn prefer(a: (f64, &[f64; 4], usize), b: (f64, &[f64; 4], usize)) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    for i in 0..4 {
        if a.1[i] != b.1[i] {
            return a.1[i] < b.1[i];
        }
    }
    a.2 < b.2
}

/// Adaptive training sample selection.
///
/// For every ground truth, the `topk_per_level` anchors with the nearest
/// centers on each level become candidates; candidates whose IoU reaches the
/// mean plus the (sample) standard deviation of candidate IoUs and whose
/// centers lie strictly inside the box are positives. Anchors claimed by more
/// than one ground truth go to the highest-IoU one. `G[k, concept] = 1` for
/// each positive anchor `k`.
pub fn atss_assign(
    anchors: &[[f64; 4]],
    gt_boxes: &[[f64; 4]],
    gt_concepts: &[usize],
    level_of: &[usize],
    topk_per_level: usize,
    num_concepts: usize,
) -> TargetMatrix {
    assert_eq!(gt_boxes.len(), gt_concepts.len(), "one concept per ground truth");
    assert_eq!(anchors.len(), level_of.len(), "one level per anchor");
    let k = anchors.len();
    let num_levels = level_of.iter().max().map_or(0, |m| m + 1);
    let centers: Vec<(f64, f64)> = anchors.iter().map(center).collect();
    let mut best: Vec<Option<(usize, f64)>> = vec![None; k];
    for (gi, g) in gt_boxes.iter().enumerate() {
        let gc = center(g);
        let mut candidates = Vec::new();
        for l in 0..num_levels {
            let mut idx: Vec<(f64, usize)> = (0..k)
                .filter(|&a| level_of[a] == l)
                .map(|a| ((centers[a].0 - gc.0).hypot(centers[a].1 - gc.1), a))
                .collect();
            idx.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            candidates.extend(idx.into_iter().take(topk_per_level).map(|(_, a)| a));
        }
        if candidates.is_empty() {
            continue;
        }
        let ious: Vec<f64> = candidates.iter().map(|&a| iou(&anchors[a], g)).collect();
        let n = ious.len() as f64;
        let mean = ious.iter().sum::<f64>() / n;
        let std = if ious.len() > 1 {
            (ious.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let thr = mean + std;
        for (&a, &v) in candidates.iter().zip(&ious) {
            if v < thr || !center_inside(centers[a], g) {
                continue;
            }
            let take = match best[a] {
                None => true,
                Some((og, ov)) => prefer((v, g, gt_concepts[gi]), (ov, &gt_boxes[og], gt_concepts[og])),
            };
            if take {
                best[a] = Some((gi, v));
            }
        }
    }
    let mut values = Tensor::zeros(&[k, num_concepts]);
    let mut positive_mask = vec![false; k];
    let mut matched_gt = vec![None; k];
    for (a, b) in best.iter().enumerate() {
        if let Some((gi, _)) = b {
            let c = gt_concepts[*gi];
            assert!(c < num_concepts, "concept index {c} out of range");
            values.data_mut()[a * num_concepts + c] = 1.0;
            positive_mask[a] = true;
            matched_gt[a] = Some(*gi);
        }
    }
    TargetMatrix {
        values,
        positive_mask,
        matched_gt,
    }
}
