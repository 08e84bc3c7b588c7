use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::AdamW;
use crate::assign::{
    alignment_logits, atss_assign, centerness_loss, focal_alignment_loss, giou_loss, iou,
};
use crate::autograd::{Graph, Tensor, Var};
use crate::corpus::{DataKind, Triplet};
use crate::encoder::{decode_boxes, region_batch, ConceptEmbeddings, Model};
use crate::error::{Error, Result};
use crate::wra::{
    contrastive_loss_var, gather_texts, largest_box, objectness_scores, select_proposals,
    unique_columns, GatheredConcepts, PairVars,
};

/// Names of the loss terms reported per data kind.
pub const TERM_ALIGN: &str = "align";
pub const TERM_REG: &str = "reg";
pub const TERM_CENTER: &str = "center";
pub const TERM_CTS: &str = "cts";
pub const TERM_CLS: &str = "cls";

/// Outcome of one optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub epoch: usize,
    pub kind: DataKind,
    /// Weighted objective of the data kind.
    pub loss_total: f64,
    /// Unweighted loss terms.
    pub loss_terms: BTreeMap<String, f64>,
    /// Probe losses optimized alongside, outside `loss_total`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_loss: Option<f64>,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Wall-clock seconds; kept out of the metrics log.
    #[serde(skip)]
    pub iter_time: f64,
}

impl StepReport {
    /// Recomputes the weighted total from the terms.
    pub fn reconstruct_total(&self, cfg: &TrainConfig) -> f64 {
        let t = |k: &str| self.loss_terms.get(k).copied().unwrap_or(0.0);
        match self.kind {
            DataKind::Detection => t(TERM_ALIGN) + cfg.loss.alpha * t(TERM_REG) + cfg.loss.beta * t(TERM_CENTER),
            DataKind::Grounding => t(TERM_ALIGN),
            DataKind::ImageText => cfg.loss.lam * t(TERM_CTS),
            DataKind::Classification => cfg.loss.lam * t(TERM_CLS),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.loss_total.is_finite()
            && self.loss_terms.values().all(|v| v.is_finite())
            && self.aux_loss.is_none_or(f64::is_finite)
            && self.grad_norm.is_finite()
    }
}

/// Forward graph of one batch.
pub struct StepGraph {
    pub graph: Graph,
    /// Quantity to differentiate: weighted total plus probe losses.
    pub objective: Var,
    pub kind: DataKind,
    pub loss_total: f64,
    pub loss_terms: BTreeMap<String, f64>,
    pub aux_loss: Option<f64>,
}

fn batch_kind(batch: &[Triplet]) -> Result<DataKind> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?
        .kind;
    if let Some(t) = batch.iter().find(|t| t.kind != first) {
        return Err(Error::MixedKinds(first.to_string(), t.kind.to_string()));
    }
    Ok(first)
}

fn const_scalar(g: &mut Graph, v: f64) -> Var {
    g.constant(Tensor::new(vec![1], vec![v]))
}

fn sum_or_zero(g: &mut Graph, parts: &[Var]) -> Var {
    if parts.is_empty() {
        return const_scalar(g, 0.0);
    }
    let s = g.stack(parts);
    g.sum(s)
}

/// Records the forward pass and loss of `batch` on a fresh graph.
pub fn build_step(model: &Model, batch: &[Triplet], cfg: &TrainConfig) -> Result<StepGraph> {
    let kind = batch_kind(batch)?;
    for t in batch {
        t.validate()?;
    }
    let mut g = Graph::new();
    let samples: Vec<Vec<&str>> = batch.iter().map(|t| t.concept_texts()).collect();
    if samples.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidInput("every sample needs at least one concept".into()));
    }
    let (texts, maps) = gather_texts(&samples);
    let text_refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let t_emb = model.forward_texts(&mut g, &text_refs);
    let loss = cfg.loss_config();
    let mut terms = BTreeMap::new();
    let mut aux = None;
    let total = match kind {
        DataKind::Detection | DataKind::Grounding => {
            let with_boxes = kind == DataKind::Detection;
            let (scale, bias) = model.logit_params(&mut g);
            let mut per_image = Vec::new();
            for (i, t) in batch.iter().enumerate() {
                let v = model.forward_image(&mut g, &t.image)?;
                let gt: Vec<[f64; 4]> = t.boxes.iter().map(|b| b.bbox).collect();
                let cols: Vec<usize> = t.boxes.iter().map(|b| maps[i][b.concept]).collect();
                let tm = atss_assign(&v.anchors, &gt, &cols, &v.level_of, cfg.train.topk_per_level, texts.len());
                per_image.push((v, gt, tm));
            }
            let total_pos: usize = per_image.iter().map(|p| p.2.num_positives()).sum();
            let norm = total_pos.max(1) as f64;
            let (mut align, mut reg, mut ctr, mut probes) = (vec![], vec![], vec![], vec![]);
            for (v, gt, tm) in &per_image {
                let s = g.matmul_nt(v.features, t_emb);
                let logits = alignment_logits(&mut g, s, scale, bias);
                let l = focal_alignment_loss(&mut g, logits, tm, &loss);
                // Rescale the per-image positive count to the batch count.
                align.push(g.scale(l, tm.num_positives().max(1) as f64 / norm));
                if !with_boxes {
                    continue;
                }
                let pos = tm.positives();
                if !pos.is_empty() {
                    let w = pos.len() as f64 / norm;
                    let anchors: Vec<[f64; 4]> = pos.iter().map(|&k| v.anchors[k]).collect();
                    let matched: Vec<[f64; 4]> = pos.iter().map(|&k| gt[tm.matched_gt[k].expect("positive")]).collect();
                    let d = g.gather_rows(v.deltas, &pos);
                    let a = Tensor::new(vec![pos.len(), 4], anchors.iter().flatten().copied().collect());
                    let dec = g.decode_deltas(d, a);
                    let gl = giou_loss(&mut g, dec, &matched);
                    reg.push(g.scale(gl, w));
                    let c = g.gather_rows(v.centerness, &pos);
                    let cl = centerness_loss(&mut g, c, &anchors, &matched);
                    ctr.push(g.scale(cl, w));
                }
                if cfg.train.aux_probes {
                    let k = v.anchors.len();
                    let denom = (k * batch.len()) as f64;
                    let fg = Tensor::new(vec![k, 1], tm.positive_mask.iter().map(|p| f64::from(u8::from(*p))).collect());
                    probes.push(g.bce_with_logits(v.cls_pred, fg, denom));
                    let rb = region_batch(&g, v);
                    let dec = decode_boxes(&rb);
                    let ious: Vec<f64> = dec
                        .iter()
                        .map(|b| gt.iter().map(|t| iou(b, t)).fold(0.0, f64::max))
                        .collect();
                    probes.push(g.bce_with_logits(v.iou_pred, Tensor::new(vec![k, 1], ious), denom));
                }
            }
            let align = sum_or_zero(&mut g, &align);
            terms.insert(TERM_ALIGN.to_string(), g.value(align).item());
            if with_boxes {
                let reg = sum_or_zero(&mut g, &reg);
                let ctr = sum_or_zero(&mut g, &ctr);
                terms.insert(TERM_REG.to_string(), g.value(reg).item());
                terms.insert(TERM_CENTER.to_string(), g.value(ctr).item());
                let r = g.scale(reg, loss.alpha);
                let c = g.scale(ctr, loss.beta);
                let rc = g.add(r, c);
                let total = g.add(align, rc);
                if !probes.is_empty() {
                    let p = sum_or_zero(&mut g, &probes);
                    aux = Some((g.value(p).item(), p));
                }
                total
            } else {
                align
            }
        }
        DataKind::ImageText | DataKind::Classification => {
            let sel = cfg.selection();
            let t_rows = g.value(t_emb).to_rows();
            let gathered = GatheredConcepts {
                texts: texts.clone(),
                embeddings: t_rows.clone(),
                per_sample_map: maps.clone(),
            };
            let mut pairs = Vec::new();
            for (i, t) in batch.iter().enumerate() {
                let v = model.forward_image(&mut g, &t.image)?;
                let rb = region_batch(&g, &v);
                let cols = unique_columns(&maps[i]);
                let local = ConceptEmbeddings {
                    embeddings: cols.iter().map(|&c| t_rows[c].clone()).collect(),
                    token_counts: cols.iter().map(|&c| model.tokens(&texts[c]).len()).collect(),
                };
                let scores = objectness_scores(&rb, Some(&gathered), Some(&local), &sel)?;
                let idx = select_proposals(&rb, &scores, &sel, kind);
                let boxes = decode_boxes(&rb);
                let chosen: Vec<[f64; 4]> = idx.iter().map(|&k| boxes[k]).collect();
                let regions = g.gather_rows(v.features, &idx);
                let concepts = g.gather_rows(t_emb, &cols);
                pairs.push(PairVars {
                    regions,
                    concepts,
                    largest_region: largest_box(&chosen),
                });
            }
            if kind == DataKind::ImageText {
                let l = contrastive_loss_var(&mut g, &pairs, &loss);
                terms.insert(TERM_CTS.to_string(), g.value(l).item());
                g.scale(l, loss.lam)
            } else {
                let rows: Vec<Var> = pairs.iter().map(|p| p.regions).collect();
                let f = g.concat_rows(&rows);
                let s = g.matmul_nt(f, t_emb);
                let logits = g.scale(s, 1.0 / loss.tau);
                let targets: Vec<usize> = maps.iter().map(|m| m[0]).collect();
                let l = g.cross_entropy_rows(logits, &targets, loss.smooth_eps);
                terms.insert(TERM_CLS.to_string(), g.value(l).item());
                g.scale(l, loss.lam)
            }
        }
    };
    let loss_total = g.value(total).item();
    let (objective, aux_loss) = match aux {
        Some((v, p)) => (g.add(total, p), Some(v)),
        None => (total, None),
    };
    Ok(StepGraph {
        graph: g,
        objective,
        kind,
        loss_total,
        loss_terms: terms,
        aux_loss,
    })
}

/// Loss and gradient norm of `batch` without updating the model.
pub fn step_loss(model: &Model, batch: &[Triplet], cfg: &TrainConfig) -> Result<StepReport> {
    let sg = build_step(model, batch, cfg)?;
    let grads = sg.graph.backward(sg.objective);
    let grad_norm = AdamW::global_norm(&AdamW::collect(model.params(), &grads));
    Ok(StepReport {
        step: 0,
        epoch: 0,
        kind: sg.kind,
        loss_total: sg.loss_total,
        loss_terms: sg.loss_terms,
        aux_loss: sg.aux_loss,
        grad_norm,
        lr: 0.0,
        iter_time: 0.0,
    })
}
