use serde::{Deserialize, Serialize};

use crate::assign::{LossConfig, Matching};
use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `S = f_P · f_Tᵀ` for `f_P: K × D` and `f_T: M × D`.
pub fn similarity_matrix(f_p: &Tensor, f_t: &Tensor) -> Result<Tensor> {
    let ((k, d), (m, d2)) = (f_p.dims2(), f_t.dims2());
    if d != d2 {
        return Err(Error::ShapeMismatch(format!("region dim {d} vs concept dim {d2}")));
    }
    let mut g = Graph::new();
    let a = g.constant(f_p.clone());
    let b = g.constant(f_t.clone());
    let s = g.matmul_nt(a, b);
    debug_assert_eq!(g.value(s).shape(), &[k, m]);
    Ok(g.value(s).clone())
}

/// Best region per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// Column-wise argmax of `S: K × M`; ties resolve to the lowest row.
pub fn match_one_to_one(s: &Tensor) -> MatchResult {
    let (k, m) = s.dims2();
    assert!(k >= 1 && m >= 1, "match_one_to_one needs a non-empty matrix");
    let mut indices = vec![0; m];
    let mut similarities: Vec<f64> = s.row(0).to_vec();
    for i in 1..k {
        for j in 0..m {
            if s.at2(i, j) > similarities[j] {
                similarities[j] = s.at2(i, j);
                indices[j] = i;
            }
        }
    }
    MatchResult { indices, similarities }
}

/// Text-to-image set similarity of one image-text pair.
///
/// `largest_region` and the caption column 0 are used by max-bbox matching.
pub fn set_similarity_t2i(s: &Tensor, cfg: &LossConfig, largest_region: usize) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let out = set_similarity_var(&mut g, v, cfg.matching, cfg.tau_t, largest_region);
    g.value(out).item()
}

/// Graph version of [`set_similarity_t2i`] on `s: K × M`.
pub fn set_similarity_var(g: &mut Graph, s: Var, matching: Matching, tau_t: f64, largest_region: usize) -> Var {
    match matching {
        Matching::OneToOne => {
            let m = g.col_max(s);
            g.mean(m)
        }
        Matching::OneToMany => {
            let m = g.softmax_weighted_col(s, tau_t);
            g.mean(m)
        }
        Matching::MaxBbox => element(g, s, largest_region, 0),
    }
}

/// Image-to-text counterpart: each region's best concept, averaged over regions.
pub fn set_similarity_i2t_var(g: &mut Graph, s: Var, matching: Matching, tau_t: f64, largest_region: usize) -> Var {
    match matching {
        Matching::MaxBbox => element(g, s, largest_region, 0),
        _ => {
            let t = g.transpose(s);
            set_similarity_var(g, t, matching, tau_t, 0)
        }
    }
}

fn element(g: &mut Graph, s: Var, r: usize, c: usize) -> Var {
    let row = g.gather_rows(s, &[r]);
    let col = g.transpose(row);
    g.gather_rows(col, &[c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s() -> Tensor {
        Tensor::from_rows(&[vec![0.2, 0.9], vec![0.7, 0.1]])
    }

    #[test]
    fn similarity_examples() {
        let fp = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let ft = Tensor::from_rows(&[vec![0.6, 0.8]]);
        let out = similarity_matrix(&fp, &ft).unwrap();
        assert_eq!(out.to_rows(), vec![vec![0.6], vec![0.8]]);
        let bad = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]);
        assert!(similarity_matrix(&fp, &bad).is_err());
    }

    #[test]
    fn argmax_matching() {
        let r = match_one_to_one(&s());
        assert_eq!(r.indices, vec![1, 0]);
        assert_eq!(r.similarities, vec![0.7, 0.9]);
        let tie = Tensor::from_rows(&[vec![0.5], vec![0.5], vec![0.5]]);
        assert_eq!(match_one_to_one(&tie).indices, vec![0]);
        let single = Tensor::from_rows(&[vec![0.1, -0.3]]);
        assert_eq!(match_one_to_one(&single).indices, vec![0, 0]);
    }

    #[test]
    fn set_similarity_variants() {
        let one = LossConfig::default();
        assert!((set_similarity_t2i(&s(), &one, 0) - 0.8).abs() < 1e-12);
        let many = LossConfig { matching: Matching::OneToMany, tau_t: 1e9, ..Default::default() };
        assert!((set_similarity_t2i(&s(), &many, 0) - 0.475).abs() < 1e-6);
        let sharp = LossConfig { matching: Matching::OneToMany, tau_t: 1e-3, ..Default::default() };
        assert!((set_similarity_t2i(&s(), &sharp, 0) - 0.8).abs() < 1e-6);
        let mb = LossConfig { matching: Matching::MaxBbox, ..Default::default() };
        assert_eq!(set_similarity_t2i(&s(), &mb, 1), 0.7);
    }

    #[test]
    fn i2t_uses_row_maxima() {
        let mut g = Graph::new();
        let v = g.constant(s());
        let out = set_similarity_i2t_var(&mut g, v, Matching::OneToOne, 0.1, 0);
        assert!((g.value(out).item() - 0.8).abs() < 1e-12);
        let s2 = Tensor::from_rows(&[vec![0.2, 0.9], vec![0.7, 0.1], vec![0.0, 0.3]]);
        let v = g.constant(s2);
        let out = set_similarity_i2t_var(&mut g, v, Matching::OneToOne, 0.1, 0);
        assert!((g.value(out).item() - (0.9 + 0.7 + 0.3) / 3.0).abs() < 1e-12);
    }
}
