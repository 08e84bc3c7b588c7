use super::similarity::{set_similarity_i2t_var, set_similarity_var};
use crate::assign::{area, Direction, LossConfig};
use crate::autograd::{Graph, Tensor, Var};
use crate::encoder::{decode_boxes, ConceptEmbeddings, RegionBatch};
use crate::error::{Error, Result};

/// One image-text pair on a graph.
#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    /// Selected region features, `K_i × D`.
    pub regions: Var,
    /// Distinct concept embeddings of the text, `M_i × D`; row 0 is the caption.
    pub concepts: Var,
    /// Row of the largest selected region, used by max-bbox matching.
    pub largest_region: usize,
}

/// Detached image-text pairs.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub pairs: Vec<(RegionBatch, ConceptEmbeddings)>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Index of the largest box; ties resolve to the lowest index.
pub fn largest_box(boxes: &[[f64; 4]]) -> usize {
    let mut best = 0;
    for (i, b) in boxes.iter().enumerate() {
        if area(b) > area(&boxes[best]) {
            best = i;
        }
    }
    best
}

fn square(g: &mut Graph, cells: Vec<Var>, b: usize) -> Var {
    let v = g.stack(&cells);
    g.reshape(v, &[b, b])
}

/// `B × B` set similarities. For text-to-image, entry `[i, j]` compares text
/// `i` with image `j`; for image-to-text, entry `[i, j]` compares image `i`
/// with text `j`.
pub fn pair_similarities(g: &mut Graph, pairs: &[PairVars], cfg: &LossConfig) -> (Option<Var>, Option<Var>) {
    let b = pairs.len();
    let want_t2i = cfg.direction != Direction::I2t;
    let want_i2t = cfg.direction != Direction::T2i;
    let (mut t2i, mut i2t) = (Vec::new(), Vec::new());
    let mut sims = vec![Vec::with_capacity(b); b];
    for (ti, text) in pairs.iter().enumerate() {
        for image in pairs {
            sims[ti].push(g.matmul_nt(image.regions, text.concepts));
        }
    }
    if want_t2i {
        for row in &sims {
            for (&s, image) in row.iter().zip(pairs) {
                t2i.push(set_similarity_var(g, s, cfg.matching, cfg.tau_t, image.largest_region));
            }
        }
    }
    if want_i2t {
        for (ii, image) in pairs.iter().enumerate() {
            for row in &sims {
                i2t.push(set_similarity_i2t_var(g, row[ii], cfg.matching, cfg.tau_t, image.largest_region));
            }
        }
    }
    let t2i = want_t2i.then(|| square(g, t2i, b));
    let i2t = want_i2t.then(|| square(g, i2t, b));
    (t2i, i2t)
}

/// Cross-entropy over `sims / tau` with the diagonal as targets, averaged over
/// the active directions.
pub fn contrastive_from_similarities(g: &mut Graph, t2i: Option<Var>, i2t: Option<Var>, cfg: &LossConfig) -> Var {
    let mut terms = Vec::new();
    for sims in [t2i, i2t].into_iter().flatten() {
        let b = g.shape(sims)[0];
        let logits = g.scale(sims, 1.0 / cfg.tau);
        let targets: Vec<usize> = (0..b).collect();
        terms.push(g.cross_entropy_rows(logits, &targets, cfg.smooth_eps));
    }
    assert!(!terms.is_empty(), "at least one direction is active");
    let v = g.stack(&terms);
    g.mean(v)
}

/// Image-text contrastive loss of a batch of pairs.
pub fn contrastive_loss_var(g: &mut Graph, pairs: &[PairVars], cfg: &LossConfig) -> Var {
    let (t2i, i2t) = pair_similarities(g, pairs, cfg);
    contrastive_from_similarities(g, t2i, i2t, cfg)
}

/// Value of the contrastive loss for detached pairs.
pub fn contrastive_loss(batch: &PairBatch, cfg: &LossConfig) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("contrastive loss needs at least one pair".into()));
    }
    let mut g = Graph::new();
    let mut vars = Vec::new();
    for (regions, concepts) in &batch.pairs {
        if concepts.is_empty() || regions.is_empty() {
            return Err(Error::InvalidInput("every pair needs regions and concepts".into()));
        }
        let r = g.constant(Tensor::from_rows(&regions.features));
        let c = g.constant(Tensor::from_rows(&concepts.embeddings));
        vars.push(PairVars {
            regions: r,
            concepts: c,
            largest_region: largest_box(&decode_boxes(regions)),
        });
    }
    let l = contrastive_loss_var(&mut g, &vars, cfg);
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(sims: Vec<Vec<f64>>, cfg: &LossConfig) -> f64 {
        let mut g = Graph::new();
        let s = g.constant(Tensor::from_rows(&sims));
        let l = contrastive_from_similarities(&mut g, Some(s), None, cfg);
        g.value(l).item()
    }

    #[test]
    fn closed_forms() {
        let cfg = LossConfig { smooth_eps: 0.0, tau: 1.0, ..Default::default() };
        assert_eq!(loss_of(vec![vec![0.3]], &cfg), 0.0);
        let e = std::f64::consts::E;
        let two = loss_of(vec![vec![1.0, 0.0], vec![0.0, 1.0]], &cfg);
        assert!((two + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((two - 0.3133).abs() < 1e-4);
        for b in 1..6 {
            let l = loss_of(vec![vec![0.4; b]; b], &cfg);
            assert!((l - (b as f64).ln()).abs() < 1e-12);
        }
    }

    fn region_batch(features: Vec<Vec<f64>>) -> RegionBatch {
        let n = features.len();
        RegionBatch {
            boxes: (0..n).map(|i| [0.0, 0.0, 4.0 + i as f64, 4.0]).collect(),
            features,
            reg_deltas: vec![[0.0; 4]; n],
            centerness: vec![0.5; n],
            iou_pred: vec![0.5; n],
            cls_pred: vec![0.5; n],
            level_of: vec![0; n],
            image_size: (32, 32),
        }
    }

    #[test]
    fn detached_pairs() {
        let cfg = LossConfig { smooth_eps: 0.0, tau: 1.0, ..Default::default() };
        let pb = PairBatch {
            pairs: vec![
                (
                    region_batch(vec![vec![1.0, 0.0]]),
                    ConceptEmbeddings { embeddings: vec![vec![1.0, 0.0]], token_counts: vec![1] },
                ),
                (
                    region_batch(vec![vec![0.0, 1.0]]),
                    ConceptEmbeddings { embeddings: vec![vec![0.0, 1.0]], token_counts: vec![1] },
                ),
            ],
        };
        let e = std::f64::consts::E;
        for d in [Direction::T2i, Direction::I2t, Direction::Bilateral] {
            let l = contrastive_loss(&pb, &LossConfig { direction: d, ..cfg.clone() }).unwrap();
            assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
        }
        assert!(contrastive_loss(&PairBatch { pairs: vec![] }, &cfg).is_err());
        assert_eq!(largest_box(&[[0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]]), 1);
    }
}
