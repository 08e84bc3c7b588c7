use serde::{Deserialize, Serialize};

use super::atss::{center, TargetMatrix};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Which contrastive direction(s) the image-text loss uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    T2i,
    I2t,
    Bilateral,
}

/// How word-region similarities aggregate into an image-text similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matching {
    OneToOne,
    OneToMany,
    MaxBbox,
}

/// Loss weights, temperatures and variant flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the regression loss.
    pub alpha: f64,
    /// Weight of the centerness loss.
    pub beta: f64,
    /// Weight of the image-text contrastive loss.
    pub lam: f64,
    /// Contrastive temperature.
    pub tau: f64,
    /// Softmax aggregation temperature of one-to-many matching.
    pub tau_t: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub smooth_eps: f64,
    pub direction: Direction,
    pub matching: Matching,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 1.0,
            lam: 0.1,
            tau: 0.5,
            tau_t: 0.1,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            smooth_eps: 0.1,
            direction: Direction::T2i,
            matching: Matching::OneToOne,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) || !(self.tau_t > 0.0) {
            return bad("temperatures tau and tau_t must be > 0".into());
        }
        if !(0.0..0.5).contains(&self.smooth_eps) {
            return bad(format!("smooth_eps {} must lie in [0, 0.5)", self.smooth_eps));
        }
        for (n, v) in [("alpha", self.alpha), ("beta", self.beta), ("lam", self.lam)] {
            if !(v >= 0.0) {
                return bad(format!("loss weight {n} must be >= 0"));
            }
        }
        if !(self.focal_gamma >= 0.0) || !(0.0..=1.0).contains(&self.focal_alpha) {
            return bad("focal_gamma must be >= 0 and focal_alpha in [0, 1]".into());
        }
        Ok(())
    }
}

/// Alignment logits `scale · S + bias`.
pub fn alignment_logits(g: &mut Graph, s: Var, scale: Var, bias: Var) -> Var {
    let x = g.mul_scalar_var(s, scale);
    g.add_scalar_var(x, bias)
}

/// Sigmoid focal loss over every entry of `logits: K × M`, normalized by the
/// number of positives (at least one).
pub fn focal_alignment_loss(g: &mut Graph, logits: Var, targets: &TargetMatrix, cfg: &LossConfig) -> Var {
    let norm = targets.num_positives().max(1) as f64;
    g.sigmoid_focal(logits, targets.values.clone(), cfg.focal_gamma, cfg.focal_alpha, norm)
}

/// Mean `1 - GIoU` between paired predicted and ground-truth boxes.
pub fn giou_loss(g: &mut Graph, pred: Var, gt: &[[f64; 4]]) -> Var {
    let t = Tensor::new(vec![gt.len(), 4], gt.iter().flatten().copied().collect());
    g.giou_loss(pred, t)
}

pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    1.0 - crate::autograd::giou_terms(a, b).loss
}

/// Centerness of an anchor center relative to a box; zero outside the box.
pub fn centerness_target(anchor: &[f64; 4], gt: &[f64; 4]) -> f64 {
    let (cx, cy) = center(anchor);
    let (l, r, t, b) = (cx - gt[0], gt[2] - cx, cy - gt[1], gt[3] - cy);
    if l <= 0.0 || r <= 0.0 || t <= 0.0 || b <= 0.0 {
        return 0.0;
    }
    ((l.min(r) / l.max(r)) * (t.min(b) / t.max(b))).sqrt()
}

/// Mean binary cross-entropy between `sigmoid(pred_logits)` (`P × 1`) and the
/// centerness targets of the paired anchors and boxes.
pub fn centerness_loss(g: &mut Graph, pred_logits: Var, anchors: &[[f64; 4]], gt: &[[f64; 4]]) -> Var {
    let targets: Vec<f64> = anchors.iter().zip(gt).map(|(a, b)| centerness_target(a, b)).collect();
    let n = targets.len();
    g.bce_with_logits(pred_logits, Tensor::new(vec![n, 1], targets), n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_single_positive_closed_form() {
        let mut g = Graph::new();
        let logit = (0.9f64 / 0.1).ln();
        let x = g.input(Tensor::new(vec![1, 1], vec![logit]));
        let t = TargetMatrix {
            values: Tensor::new(vec![1, 1], vec![1.0]),
            positive_mask: vec![true],
            matched_gt: vec![Some(0)],
        };
        let l = focal_alignment_loss(&mut g, x, &t, &LossConfig::default());
        let expect = 0.25 * 0.1f64.powi(2) * -(0.9f64.ln());
        assert!((g.value(l).item() - expect).abs() < 1e-12);
        assert!((expect - 2.634e-4).abs() < 1e-6);
    }

    #[test]
    fn focal_with_gamma_zero_is_weighted_bce() {
        let mut g = Graph::new();
        let vals = vec![0.3, -1.2, 2.0, 0.1];
        let x = g.input(Tensor::new(vec![2, 2], vals.clone()));
        let tv = vec![1.0, 0.0, 0.0, 1.0];
        let t = TargetMatrix {
            values: Tensor::new(vec![2, 2], tv.clone()),
            positive_mask: vec![true, true],
            matched_gt: vec![Some(0), Some(1)],
        };
        let cfg = LossConfig { focal_gamma: 0.0, focal_alpha: 0.5, ..Default::default() };
        let l = focal_alignment_loss(&mut g, x, &t, &cfg);
        let bce: f64 = vals
            .iter()
            .zip(&tv)
            .map(|(x, y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        assert!((g.value(l).item() - 0.5 * bce / 2.0).abs() < 1e-12);
    }

    #[test]
    fn focal_vanishes_for_confident_negatives() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[3, 2], -40.0));
        let t = TargetMatrix {
            values: Tensor::zeros(&[3, 2]),
            positive_mask: vec![false; 3],
            matched_gt: vec![None; 3],
        };
        let l = focal_alignment_loss(&mut g, x, &t, &LossConfig::default());
        assert!(g.value(l).item() < 1e-30);
    }

    #[test]
    fn giou_examples() {
        let a = [0.0, 0.0, 2.0, 2.0];
        let b = [1.0, 1.0, 3.0, 3.0];
        assert_eq!(giou(&a, &a), 1.0);
        let expect = 1.0 - (1.0 / 7.0 - 2.0 / 9.0);
        assert!((1.0 - giou(&a, &b) - expect).abs() < 1e-12);
        assert!((1.0 - giou(&a, &b) - 1.0794).abs() < 1e-4);
        let far = 1.0 - giou(&a, &[100.0, 100.0, 101.0, 101.0]);
        assert!(far > 1.0 && far <= 2.0);
        let mut g = Graph::new();
        let p = g.input(Tensor::new(vec![1, 4], vec![1.0, 1.0, 1.0, 3.0]));
        let l = giou_loss(&mut g, p, &[a]);
        assert!(g.value(l).item().is_finite());
    }

    #[test]
    fn centerness_targets() {
        let gt = [0.0, 0.0, 4.0, 4.0];
        assert_eq!(centerness_target(&[1.0, 1.0, 3.0, 3.0], &gt), 1.0);
        // Anchor center (1, 2): l=1, r=3, t=2, b=2.
        let t = centerness_target(&[0.0, 1.0, 2.0, 3.0], &gt);
        assert!((t - (1.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(centerness_target(&[9.0, 9.0, 11.0, 11.0], &gt), 0.0);
    }

    #[test]
    fn centerness_loss_is_minimal_at_target() {
        let anchors = [[0.0, 1.0, 2.0, 3.0]];
        let gt = [[0.0, 0.0, 4.0, 4.0]];
        let t = (1.0f64 / 3.0).sqrt();
        let at = |logit: f64| {
            let mut g = Graph::new();
            let p = g.input(Tensor::new(vec![1, 1], vec![logit]));
            let l = centerness_loss(&mut g, p, &anchors, &gt);
            g.value(l).item()
        };
        let opt = (t / (1.0 - t)).ln();
        let self_entropy = -(t * t.ln() + (1.0 - t) * (1.0 - t).ln());
        assert!((at(opt) - self_entropy).abs() < 1e-12);
        assert!(at(opt + 0.1) > at(opt) && at(opt - 0.1) > at(opt));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { smooth_eps: 0.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lam: -1.0, ..Default::default() }.validate().is_err());
    }
}
