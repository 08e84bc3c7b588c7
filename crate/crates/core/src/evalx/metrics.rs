use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::assign::{area, iou};
use crate::error::{Error, Result};

/// One scored box for a vocabulary entry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: [f64; 4],
    pub concept_index: usize,
    pub score: f64,
}

/// One annotated box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: [f64; 4],
    pub concept_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotations {
    pub image_id: String,
    pub boxes: Vec<GroundTruthBox>,
}

/// Thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub const SIZE_SMALL: &str = "small";
pub const SIZE_MEDIUM: &str = "medium";
pub const SIZE_LARGE: &str = "large";

/// Evaluation settings besides the IoU thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    /// Named class subsets, e.g. `seen` / `unseen`.
    pub groups: BTreeMap<String, Vec<usize>>,
    /// Multiplies the 32 and 96 pixel size-bucket edges.
    pub size_scale: f64,
    /// Highest-scoring detections kept per image.
    pub max_detections: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            groups: BTreeMap::new(),
            size_scale: 1.0,
            max_detections: 300,
        }
    }
}

impl EvalOptions {
    pub fn size_bucket(&self, bbox: &[f64; 4]) -> &'static str {
        let a = area(bbox);
        let (s, m) = (32.0 * self.size_scale, 96.0 * self.size_scale);
        if a < s * s {
            SIZE_SMALL
        } else if a < m * m {
            SIZE_MEDIUM
        } else {
            SIZE_LARGE
        }
    }
}

/// Summary metrics, all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "BTreeMap<String, f64>", try_from = "BTreeMap<String, f64>")]
pub struct EvalReport {
    /// AP averaged over thresholds and classes with ground truth.
    pub ap_overall: f64,
    /// AP at IoU 0.5 when that threshold is evaluated, else 0.
    pub ap50: f64,
    pub ap_per_group: BTreeMap<String, f64>,
    pub ar: f64,
    /// Only buckets holding at least one ground-truth box.
    pub ar_by_size: BTreeMap<String, f64>,
    /// Recall with all classes merged into one.
    pub ar_agnostic: f64,
}

impl EvalReport {
    /// Flat `key -> value` view; map entries use dotted keys.
    pub fn flat(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("ap_overall".into(), self.ap_overall);
        m.insert("ap50".into(), self.ap50);
        m.insert("ar".into(), self.ar);
        m.insert("ar_agnostic".into(), self.ar_agnostic);
        for (k, v) in &self.ap_per_group {
            m.insert(format!("ap_per_group.{k}"), *v);
        }
        for (k, v) in &self.ar_by_size {
            m.insert(format!("ar_by_size.{k}"), *v);
        }
        m
    }

    pub fn group_ap(&self, group: &str) -> Option<f64> {
        self.ap_per_group.get(group).copied()
    }
}

impl From<EvalReport> for BTreeMap<String, f64> {
    fn from(r: EvalReport) -> Self {
        r.flat()
    }
}

impl TryFrom<BTreeMap<String, f64>> for EvalReport {
    type Error = String;

    fn try_from(m: BTreeMap<String, f64>) -> std::result::Result<Self, String> {
        let get = |k: &str| m.get(k).copied().ok_or_else(|| format!("missing key {k}"));
        let sub = |p: &str| {
            m.iter()
                .filter_map(|(k, v)| k.strip_prefix(p).map(|s| (s.to_string(), *v)))
                .collect()
        };
        Ok(Self {
            ap_overall: get("ap_overall")?,
            ap50: get("ap50")?,
            ar: get("ar")?,
            ar_agnostic: get("ar_agnostic")?,
            ap_per_group: sub("ap_per_group."),
            ar_by_size: sub("ar_by_size."),
        })
    }
}

/// A detection in global ranking order.
struct Ranked {
    image: usize,
    bbox: [f64; 4],
    score: f64,
}

/// Greedy matching of one class at one threshold. Detections are visited in
/// the given order; each takes the unmatched ground truth of its image with
/// the highest IoU at or above `thr` (ties to the lower index).
fn match_greedy(dets: &[Ranked], gts: &[Vec<[f64; 4]>], thr: f64) -> (Vec<bool>, Vec<Vec<bool>>) {
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let tp = dets
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[d.image].iter().enumerate() {
                if taken[d.image][j] {
                    continue;
                }
                let o = iou(&d.bbox, g);
                if o >= thr && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            best.map(|(j, _)| taken[d.image][j] = true).is_some()
        })
        .collect();
    (tp, taken)
}

/// 101-point interpolated average precision.
fn interpolated_ap(tp: &[bool], n_gt: usize) -> f64 {
    let mut prec = Vec::with_capacity(tp.len());
    let mut rec = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        prec.push(hits as f64 / (i + 1) as f64);
        rec.push(hits as f64 / n_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut total = 0.0;
    let mut j = 0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        while j < rec.len() && rec[j] < level - 1e-12 {
            j += 1;
        }
        if j < rec.len() {
            total += prec[j];
        }
    }
    total / 101.0
}

/// Ground truth of one class per image, with the size bucket of each box.
type ClassGt = (Vec<Vec<[f64; 4]>>, Vec<Vec<&'static str>>);

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

struct ClassStats {
    ap: Vec<f64>,
    recall: Vec<f64>,
    /// Per-threshold recall of each size bucket.
    by_size: BTreeMap<&'static str, Vec<f64>>,
}

fn class_stats(dets: &[Ranked], gt: &ClassGt, thresholds: &[f64]) -> ClassStats {
    let n_gt: usize = gt.0.iter().map(Vec::len).sum();
    let mut out = ClassStats {
        ap: Vec::new(),
        recall: Vec::new(),
        by_size: BTreeMap::new(),
    };
    for &thr in thresholds {
        let (tp, taken) = match_greedy(dets, &gt.0, thr);
        out.ap.push(interpolated_ap(&tp, n_gt));
        out.recall.push(tp.iter().filter(|t| **t).count() as f64 / n_gt as f64);
        let mut counts: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
        for (img, flags) in taken.iter().enumerate() {
            for (j, &f) in flags.iter().enumerate() {
                let e = counts.entry(gt.1[img][j]).or_default();
                e.0 += usize::from(f);
                e.1 += 1;
            }
        }
        for (b, (hit, tot)) in counts {
            out.by_size.entry(b).or_default().push(hit as f64 / tot as f64);
        }
    }
    out
}

/// COCO-style AP/AR. Images missing from `detections` count as having none;
/// a detection image absent from `ground_truth` is an error.
pub fn evaluate_ap(
    detections: &[ImagePredictions],
    ground_truth: &[ImageAnnotations],
    iou_thresholds: &[f64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if iou_thresholds.is_empty() {
        return Err(Error::InvalidInput("no IoU thresholds".into()));
    }
    let mut index = HashMap::new();
    for (i, g) in ground_truth.iter().enumerate() {
        if index.insert(g.image_id.as_str(), i).is_some() {
            return Err(Error::InvalidInput(format!("duplicate image id {:?}", g.image_id)));
        }
    }
    let n_img = ground_truth.len();
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); n_img];
    let mut seen = vec![false; n_img];
    for p in detections {
        let i = *index
            .get(p.image_id.as_str())
            .ok_or_else(|| Error::UnknownImage(p.image_id.clone()))?;
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidInput(format!("duplicate detections for image {:?}", p.image_id)));
        }
        let mut d = p.detections.clone();
        d.sort_by(|a, b| b.score.total_cmp(&a.score));
        d.truncate(opts.max_detections);
        per_image[i] = d;
    }

    let run = |key: &dyn Fn(usize) -> usize| -> BTreeMap<usize, ClassStats> {
        let mut gt: BTreeMap<usize, ClassGt> = BTreeMap::new();
        for (i, g) in ground_truth.iter().enumerate() {
            for b in &g.boxes {
                let e = gt
                    .entry(key(b.concept_index))
                    .or_insert_with(|| (vec![Vec::new(); n_img], vec![Vec::new(); n_img]));
                e.0[i].push(b.bbox);
                e.1[i].push(opts.size_bucket(&b.bbox));
            }
        }
        let mut ranked: BTreeMap<usize, Vec<(usize, usize, Ranked)>> = BTreeMap::new();
        for (i, dets) in per_image.iter().enumerate() {
            for (j, d) in dets.iter().enumerate() {
                ranked.entry(key(d.concept_index)).or_default().push((
                    i,
                    j,
                    Ranked {
                        image: i,
                        bbox: d.bbox,
                        score: d.score,
                    },
                ));
            }
        }
        gt.iter()
            .map(|(&c, g)| {
                let mut d = ranked.remove(&c).unwrap_or_default();
                d.sort_by(|a, b| b.2.score.total_cmp(&a.2.score).then((a.0, a.1).cmp(&(b.0, b.1))));
                let d: Vec<Ranked> = d.into_iter().map(|x| x.2).collect();
                (c, class_stats(&d, g, iou_thresholds))
            })
            .collect()
    };

    let stats = run(&|c| c);
    let agnostic = run(&|_| 0);
    let class_ap: BTreeMap<usize, f64> = stats.iter().map(|(c, s)| (*c, mean(&s.ap))).collect();
    let ap50_pos = iou_thresholds.iter().position(|t| (t - 0.5).abs() < 1e-9);
    let ap50 = ap50_pos.map_or(0.0, |p| mean(&stats.values().map(|s| s.ap[p]).collect::<Vec<_>>()));
    let mut ar_by_size = BTreeMap::new();
    for b in [SIZE_SMALL, SIZE_MEDIUM, SIZE_LARGE] {
        let vals: Vec<f64> = stats.values().filter_map(|s| s.by_size.get(b).map(|v| mean(v))).collect();
        if !vals.is_empty() {
            ar_by_size.insert(b.to_string(), mean(&vals));
        }
    }
    let ap_per_group = opts
        .groups
        .iter()
        .map(|(name, classes)| {
            let vals: Vec<f64> = classes.iter().filter_map(|c| class_ap.get(c).copied()).collect();
            (name.clone(), mean(&vals))
        })
        .collect();
    Ok(EvalReport {
        ap_overall: mean(&class_ap.values().copied().collect::<Vec<_>>()),
        ap50,
        ap_per_group,
        ar: mean(&stats.values().map(|s| mean(&s.recall)).collect::<Vec<_>>()),
        ar_by_size,
        ar_agnostic: agnostic.values().next().map_or(0.0, |s| mean(&s.recall)),
    })
}
