use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_acc, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

enum Op {
    Constant,
    Input,
    Param,
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRowVec(Var, Var),
    AddColVec(Var, Var),
    MulByScalarVar(Var, Var),
    AddScalarVar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Im2Col(Var, ConvGeom),
    DeformIm2Col { x: Var, offsets: Var, mask: Var, geom: ConvGeom },
    L2NormalizeRows(Var),
    EmbedMean { table: Var, tokens: Vec<Vec<usize>> },
    ColMax { a: Var, argmax: Vec<usize> },
    SoftmaxWeightedCol { a: Var, tau: f64, weights: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Stack(Vec<Var>),
    CrossEntropyRows { logits: Var, probs: Vec<f64>, target_dist: Vec<f64> },
    SigmoidFocal { logits: Var, targets: Tensor, gamma: f64, alpha: f64, norm: f64 },
    BceWithLogits { logits: Var, targets: Tensor, norm: f64 },
    Giou { pred: Var, gt: Tensor },
    DecodeDeltas { deltas: Var, anchors: Tensor, clamped: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations supporting one reverse pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for every parameter that took part in the forward pass.
    /// Parameters with no path to the loss are reported with zero gradient.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor>)> + '_ {
        self.params.iter().map(|(id, v)| (*id, self.grads[v.0].as_ref()))
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copy of `v` cut off from the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, b_trans: false }, ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        assert_eq!(k, k2, "matmul_nt inner dims");
        let mut out = vec![0.0; m * n];
        gemm_acc(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out), Op::MatMul { a, b, b_trans: true }, ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x * c);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// Adds `v[j]` to every element of column `j` of `x: m×n`.
    pub fn add_row_vec(&mut self, x: Var, v: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(v).len(), n);
        let mut out = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for i in 0..m {
            for (o, b) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(&vd) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(v);
        self.push(out, Op::AddRowVec(x, v), ng)
    }

    /// Adds `v[i]` to every element of row `i` of `x: m×n`.
    pub fn add_col_vec(&mut self, x: Var, v: Var) -> Var {
        let (m, n) = self.value(x).dims2();
        assert_eq!(self.value(v).len(), m);
        let mut out = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (i, b) in vd.iter().enumerate() {
            for o in &mut out.data_mut()[i * n..(i + 1) * n] {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(v);
        self.push(out, Op::AddColVec(x, v), ng)
    }

    /// Multiplies every element of `a` by the single-element `s`.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let t = self.map(a, |x| x * c);
        let ng = self.ng(a) || self.ng(s);
        self.push(t, Op::MulByScalarVar(a, s), ng)
    }

    pub fn add_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let c = self.value(s).item();
        let t = self.map(a, |x| x + c);
        let ng = self.ng(a) || self.ng(s);
        self.push(t, Op::AddScalarVar(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![n, m], out), Op::Transpose(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape.to_vec());
        let ng = self.ng(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Stacks 2-D tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).dims2().1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = self.value(*p).dims2();
            assert_eq!(c, n, "concat_rows column mismatch");
            rows += r;
            data.extend_from_slice(self.value(*p).data());
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(vec![rows, n], data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (_, n) = self.value(a).dims2();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(self.value(a).row(i));
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![idx.len(), n], data), Op::GatherRows(a, idx.to_vec()), ng)
    }

    /// Unfolds `x: C×H×W` into `(C·k·k) × (Ho·Wo)` patch columns with zero padding.
    pub fn im2col(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Var {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 3, "im2col expects C×H×W");
        let (c, h, w) = (s[0], s[1], s[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let geom = ConvGeom { c, h, w, k, stride, pad, ho, wo };
        let src = self.value(x).data();
        let mut out = vec![0.0; c * k * k * ho * wo];
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let base = row * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            out[base + oy * wo + ox] =
                                src[(ci * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![c * k * k, ho * wo], out), Op::Im2Col(x, geom), ng)
    }

    /// Modulated deformable unfolding for a 3×3 kernel, stride 1, padding 1.
    ///
    /// `offsets` is `18 × (H·W)` holding `(dy, dx)` per tap, `mask` is `9 × (H·W)`.
    /// Sample positions are clamped to `[-1, H] × [-1, W]`; taps outside the
    /// image read zero.
    pub fn deform_im2col(&mut self, x: Var, offsets: Var, mask: Var) -> Var {
        let s = self.value(x).shape();
        assert_eq!(s.len(), 3, "deform_im2col expects C×H×W");
        let (c, h, w) = (s[0], s[1], s[2]);
        let hw = h * w;
        assert_eq!(self.value(offsets).shape(), &[18, hw], "offset shape");
        assert_eq!(self.value(mask).shape(), &[9, hw], "mask shape");
        let geom = ConvGeom { c, h, w, k: 3, stride: 1, pad: 1, ho: h, wo: w };
        let src = self.value(x).data();
        let off = self.value(offsets).data();
        let msk = self.value(mask).data();
        let mut out = vec![0.0; c * 9 * hw];
        for q in 0..9 {
            let (ky, kx) = ((q / 3) as f64 - 1.0, (q % 3) as f64 - 1.0);
            for p in 0..hw {
                let (py, px) = ((p / w) as f64, (p % w) as f64);
                let sy = sample_coord(py + ky + off[2 * q * hw + p], h);
                let sx = sample_coord(px + kx + off[(2 * q + 1) * hw + p], w);
                let m = msk[q * hw + p];
                let taps = bilinear_taps(sy, sx, h, w);
                for ci in 0..c {
                    let plane = &src[ci * hw..(ci + 1) * hw];
                    let v: f64 = taps.iter().map(|(idx, wt)| wt * plane[*idx]).sum();
                    out[(ci * 9 + q) * hw + p] = m * v;
                }
            }
        }
        let ng = self.ng(x) || self.ng(offsets) || self.ng(mask);
        self.push(
            Tensor::new(vec![c * 9, hw], out),
            Op::DeformIm2Col { x, offsets, mask, geom },
            ng,
        )
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).dims2();
        let mut out = self.value(a).clone();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            let norm = row_norm(row);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        let ng = self.ng(a);
        self.push(out, Op::L2NormalizeRows(a), ng)
    }

    /// Row `m` of the output is the mean of `table` rows listed in `tokens[m]`.
    pub fn embed_mean(&mut self, table: Var, tokens: Vec<Vec<usize>>) -> Var {
        let (_, d) = self.value(table).dims2();
        let mut out = vec![0.0; tokens.len() * d];
        for (m, toks) in tokens.iter().enumerate() {
            assert!(!toks.is_empty(), "embed_mean needs at least one token per row");
            let inv = 1.0 / toks.len() as f64;
            for &t in toks {
                for (o, v) in out[m * d..(m + 1) * d].iter_mut().zip(self.value(table).row(t)) {
                    *o += v * inv;
                }
            }
        }
        let ng = self.ng(table);
        self.push(Tensor::new(vec![tokens.len(), d], out), Op::EmbedMean { table, tokens }, ng)
    }

    /// Per-column maximum of `a: K×M`; ties resolve to the lowest row.
    pub fn col_max(&mut self, a: Var) -> Var {
        let (k, m) = self.value(a).dims2();
        let t = self.value(a);
        let mut argmax = vec![0usize; m];
        let mut out = vec![f64::NEG_INFINITY; m];
        for i in 0..k {
            for j in 0..m {
                let v = t.at2(i, j);
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![m], out), Op::ColMax { a, argmax }, ng)
    }

    /// Per column `j`: `Σ_k softmax_k(a[·,j] / tau) · a[k,j]`.
    pub fn softmax_weighted_col(&mut self, a: Var, tau: f64) -> Var {
        let (k, m) = self.value(a).dims2();
        let t = self.value(a);
        let mut weights = vec![0.0; k * m];
        let mut out = vec![0.0; m];
        for j in 0..m {
            let mx = (0..k).map(|i| t.at2(i, j)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in 0..k {
                let e = ((t.at2(i, j) - mx) / tau).exp();
                weights[i * m + j] = e;
                z += e;
            }
            for i in 0..k {
                weights[i * m + j] /= z;
                out[j] += weights[i * m + j] * t.at2(i, j);
            }
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![m], out), Op::SoftmaxWeightedCol { a, tau, weights }, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Collects single-element vars into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let data = parts.iter().map(|p| self.value(*p).item()).collect();
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Tensor::new(vec![parts.len()], data), Op::Stack(parts.to_vec()), ng)
    }

    /// Mean over rows of the cross-entropy between `softmax(logits[r])` and a
    /// target distribution placing `1 - eps` on `targets[r]` and spreading
    /// `eps` uniformly over the remaining columns.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], eps: f64) -> Var {
        let (r, c) = self.value(logits).dims2();
        assert_eq!(targets.len(), r);
        let t = self.value(logits);
        let mut probs = vec![0.0; r * c];
        let mut target_dist = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                let q = if c == 1 {
                    1.0
                } else if j == targets[i] {
                    1.0 - eps
                } else {
                    eps / (c - 1) as f64
                };
                probs[i * c + j] = (row[j] - lse).exp();
                target_dist[i * c + j] = q;
                if q > 0.0 {
                    loss -= q * (row[j] - lse);
                }
            }
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / r.max(1) as f64),
            Op::CrossEntropyRows { logits, probs, target_dist },
            ng,
        )
    }

    /// Sigmoid focal loss summed over all elements and divided by `norm`.
    pub fn sigmoid_focal(
        &mut self,
        logits: Var,
        targets: Tensor,
        gamma: f64,
        alpha: f64,
        norm: f64,
    ) -> Var {
        let t = self.value(logits);
        assert_eq!(t.shape(), targets.shape(), "focal target shape");
        let mut loss = 0.0;
        for (x, y) in t.data().iter().zip(targets.data()) {
            let p = sigmoid(*x);
            loss += if *y > 0.5 {
                alpha * (1.0 - p).powf(gamma) * softplus(-x)
            } else {
                (1.0 - alpha) * p.powf(gamma) * softplus(*x)
            };
        }
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss / norm),
            Op::SigmoidFocal { logits, targets, gamma, alpha, norm },
            ng,
        )
    }

    /// Binary cross-entropy on logits with (possibly soft) targets, summed and
    /// divided by `norm`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor, norm: f64) -> Var {
        let t = self.value(logits);
        assert_eq!(t.shape(), targets.shape(), "bce target shape");
        let loss: f64 = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(x, y)| softplus(*x) - y * x)
            .sum();
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss / norm), Op::BceWithLogits { logits, targets, norm }, ng)
    }

    /// Mean of `1 - GIoU` over paired rows of `pred: P×4` and `gt: P×4`.
    pub fn giou_loss(&mut self, pred: Var, gt: Tensor) -> Var {
        let (p, four) = self.value(pred).dims2();
        assert_eq!(four, 4);
        assert_eq!(gt.shape(), &[p, 4]);
        let t = self.value(pred);
        let total: f64 = (0..p).map(|i| giou_terms(t.row(i), gt.row(i)).loss).sum();
        let ng = self.ng(pred);
        self.push(Tensor::scalar(total / p.max(1) as f64), Op::Giou { pred, gt }, ng)
    }

    /// Applies `(dx, dy, dw, dh)` deltas to anchors: centers shift by
    /// `d · anchor size`, sizes scale by `exp(d)`.
    pub fn decode_deltas(&mut self, deltas: Var, anchors: Tensor) -> Var {
        let (p, four) = self.value(deltas).dims2();
        assert_eq!(four, 4);
        assert_eq!(anchors.shape(), &[p, 4]);
        let d = self.value(deltas);
        let mut out = vec![0.0; p * 4];
        let mut clamped = vec![false; p * 2];
        for i in 0..p {
            let (b, c) = decode_one(anchors.row(i), d.row(i));
            out[i * 4..i * 4 + 4].copy_from_slice(&b);
            clamped[i * 2] = c[0];
            clamped[i * 2 + 1] = c[1];
        }
        let ng = self.ng(deltas);
        self.push(
            Tensor::new(vec![p, 4], out),
            Op::DecodeDeltas { deltas, anchors, clamped },
            ng,
        )
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(p, v)| (*p, *v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Gradients { grads, params }
    }

    fn backprop_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul { a, b, b_trans } => {
                let (m, n) = node.value.dims2();
                let ta = self.value(*a);
                let tb = self.value(*b);
                let k = ta.dims2().1;
                if self.ng(*a) {
                    // dA = G · Bᵀ (or G · B when b is already transposed)
                    let mut da = vec![0.0; m * k];
                    gemm_acc(m, n, k, gd, false, tb.data(), !b_trans, &mut da);
                    self.acc(grads, *a, Tensor::new(vec![m, k], da));
                }
                if self.ng(*b) {
                    if *b_trans {
                        let mut db = vec![0.0; n * k];
                        gemm_acc(n, m, k, gd, true, ta.data(), false, &mut db);
                        self.acc(grads, *b, Tensor::new(vec![n, k], db));
                    } else {
                        let mut db = vec![0.0; k * n];
                        gemm_acc(k, m, n, ta.data(), true, gd, false, &mut db);
                        self.acc(grads, *b, Tensor::new(vec![k, n], db));
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.acc(grads, *b, Tensor::new(g.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => {
                let d = gd.iter().map(|x| x * c).collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, g.clone().reshaped(shape));
            }
            Op::AddRowVec(x, v) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*v) {
                    let (m, n) = g.dims2();
                    let mut dv = vec![0.0; n];
                    for i in 0..m {
                        for (d, x) in dv.iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                            *d += x;
                        }
                    }
                    let shape = self.shape(*v).to_vec();
                    self.acc(grads, *v, Tensor::new(shape, dv));
                }
            }
            Op::AddColVec(x, v) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*v) {
                    let (m, n) = g.dims2();
                    let dv = (0..m).map(|i| gd[i * n..(i + 1) * n].iter().sum()).collect();
                    let shape = self.shape(*v).to_vec();
                    self.acc(grads, *v, Tensor::new(shape, dv));
                }
            }
            Op::MulByScalarVar(a, s) => {
                let c = self.value(*s).item();
                if self.ng(*a) {
                    let d = gd.iter().map(|x| x * c).collect();
                    self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
                }
                if self.ng(*s) {
                    let d: f64 = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    self.acc(grads, *s, Tensor::new(self.shape(*s).to_vec(), vec![d]));
                }
            }
            Op::AddScalarVar(a, s) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*s) {
                    let d: f64 = gd.iter().sum();
                    self.acc(grads, *s, Tensor::new(self.shape(*s).to_vec(), vec![d]));
                }
            }
            Op::Relu(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(x, s)| x * s * (1.0 - s))
                    .collect();
                self.acc(grads, *a, Tensor::new(g.shape().to_vec(), d));
            }
            Op::Transpose(a) => {
                let (m, n) = g.dims2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        d[j * m + i] = gd[i * n + j];
                    }
                }
                self.acc(grads, *a, Tensor::new(vec![n, m], d));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.ng(*p) {
                        let shape = self.shape(*p).to_vec();
                        self.acc(grads, *p, Tensor::new(shape, gd[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let shape = self.shape(*a).to_vec();
                let n = shape[1];
                let mut d = Tensor::zeros(&shape);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, x) in d.data_mut()[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&gd[r * n..(r + 1) * n])
                    {
                        *o += x;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::Im2Col(x, geom) => {
                let ConvGeom { c, h, w, k, stride, pad, ho, wo } = *geom;
                let mut d = vec![0.0; c * h * w];
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let base = ((ci * k + ky) * k + kx) * ho * wo;
                            for oy in 0..ho {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..wo {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    d[(ci * h + iy as usize) * w + ix as usize] +=
                                        gd[base + oy * wo + ox];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(vec![c, h, w], d));
            }
            Op::DeformIm2Col { x, offsets, mask, geom } => {
                let (c, h, w) = (geom.c, geom.h, geom.w);
                let hw = h * w;
                let src = self.value(*x).data();
                let off = self.value(*offsets).data();
                let msk = self.value(*mask).data();
                let mut dx = vec![0.0; c * hw];
                let mut doff = vec![0.0; 18 * hw];
                let mut dmask = vec![0.0; 9 * hw];
                for q in 0..9 {
                    let (ky, kx) = ((q / 3) as f64 - 1.0, (q % 3) as f64 - 1.0);
                    for p in 0..hw {
                        let (py, px) = ((p / w) as f64, (p % w) as f64);
                        let raw_y = py + ky + off[2 * q * hw + p];
                        let raw_x = px + kx + off[(2 * q + 1) * hw + p];
                        let sy = sample_coord(raw_y, h);
                        let sx = sample_coord(raw_x, w);
                        let m = msk[q * hw + p];
                        let taps = bilinear_taps(sy, sx, h, w);
                        let (gy, gx) = bilinear_coord_grads(sy, sx, h, w);
                        let mut g_off_y = 0.0;
                        let mut g_off_x = 0.0;
                        let mut g_m = 0.0;
                        for ci in 0..c {
                            let go = gd[(ci * 9 + q) * hw + p];
                            if go == 0.0 {
                                continue;
                            }
                            let plane = &src[ci * hw..(ci + 1) * hw];
                            let v: f64 = taps.iter().map(|(idx, wt)| wt * plane[*idx]).sum();
                            g_m += go * v;
                            for (idx, wt) in &taps {
                                dx[ci * hw + idx] += go * m * wt;
                            }
                            g_off_y += go * m * gy.iter().map(|(i, wt)| wt * plane[*i]).sum::<f64>();
                            g_off_x += go * m * gx.iter().map(|(i, wt)| wt * plane[*i]).sum::<f64>();
                        }
                        let in_y = raw_y > -1.0 && raw_y < h as f64;
                        let in_x = raw_x > -1.0 && raw_x < w as f64;
                        if in_y {
                            doff[2 * q * hw + p] = g_off_y;
                        }
                        if in_x {
                            doff[(2 * q + 1) * hw + p] = g_off_x;
                        }
                        dmask[q * hw + p] = g_m;
                    }
                }
                if self.ng(*x) {
                    self.acc(grads, *x, Tensor::new(vec![c, h, w], dx));
                }
                if self.ng(*offsets) {
                    self.acc(grads, *offsets, Tensor::new(vec![18, hw], doff));
                }
                if self.ng(*mask) {
                    self.acc(grads, *mask, Tensor::new(vec![9, hw], dmask));
                }
            }
            Op::L2NormalizeRows(a) => {
                let (m, n) = g.dims2();
                let src = self.value(*a).data();
                let y = node.value.data();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let norm = row_norm(&src[r.clone()]);
                    let dot: f64 = y[r.clone()].iter().zip(&gd[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        d[j] = (gd[j] - y[j] * dot) / norm;
                    }
                }
                self.acc(grads, *a, Tensor::new(vec![m, n], d));
            }
            Op::EmbedMean { table, tokens } => {
                let shape = self.shape(*table).to_vec();
                let dim = shape[1];
                let mut d = Tensor::zeros(&shape);
                for (m, toks) in tokens.iter().enumerate() {
                    let inv = 1.0 / toks.len() as f64;
                    for &t in toks {
                        for (o, x) in d.data_mut()[t * dim..(t + 1) * dim]
                            .iter_mut()
                            .zip(&gd[m * dim..(m + 1) * dim])
                        {
                            *o += x * inv;
                        }
                    }
                }
                self.acc(grads, *table, d);
            }
            Op::ColMax { a, argmax } => {
                let shape = self.shape(*a).to_vec();
                let m = shape[1];
                let mut d = Tensor::zeros(&shape);
                for (j, &i) in argmax.iter().enumerate() {
                    d.data_mut()[i * m + j] += gd[j];
                }
                self.acc(grads, *a, d);
            }
            Op::SoftmaxWeightedCol { a, tau, weights } => {
                let shape = self.shape(*a).to_vec();
                let (k, m) = (shape[0], shape[1]);
                let src = self.value(*a).data();
                let out = node.value.data();
                let mut d = vec![0.0; k * m];
                for i in 0..k {
                    for j in 0..m {
                        let wgt = weights[i * m + j];
                        d[i * m + j] = gd[j] * wgt * (1.0 + (src[i * m + j] - out[j]) / tau);
                    }
                }
                self.acc(grads, *a, Tensor::new(shape, d));
            }
            Op::Sum(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::full(&shape, gd[0]));
            }
            Op::Mean(a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).len().max(1) as f64;
                self.acc(grads, *a, Tensor::full(&shape, gd[0] / n));
            }
            Op::Stack(parts) => {
                for (p, x) in parts.iter().zip(gd) {
                    if self.ng(*p) {
                        let shape = self.shape(*p).to_vec();
                        self.acc(grads, *p, Tensor::new(shape, vec![*x]));
                    }
                }
            }
            Op::CrossEntropyRows { logits, probs, target_dist } => {
                let shape = self.shape(*logits).to_vec();
                let r = shape[0].max(1) as f64;
                let d = probs
                    .iter()
                    .zip(target_dist)
                    .map(|(p, q)| gd[0] * (p - q) / r)
                    .collect();
                self.acc(grads, *logits, Tensor::new(shape, d));
            }
            Op::SigmoidFocal { logits, targets, gamma, alpha, norm } => {
                let t = self.value(*logits);
                let d = t
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(x, y)| {
                        let p = sigmoid(*x);
                        let v = if *y > 0.5 {
                            // d/dx of -α (1-p)^γ log p
                            alpha * (1.0 - p).powf(*gamma) * (-gamma * p * softplus(-x) - (1.0 - p))
                        } else {
                            // d/dx of -(1-α) p^γ log(1-p)
                            (1.0 - alpha) * p.powf(*gamma) * (p + gamma * (1.0 - p) * softplus(*x))
                        };
                        gd[0] * v / norm
                    })
                    .collect();
                self.acc(grads, *logits, Tensor::new(t.shape().to_vec(), d));
            }
            Op::BceWithLogits { logits, targets, norm } => {
                let t = self.value(*logits);
                let d = t
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(x, y)| gd[0] * (sigmoid(*x) - y) / norm)
                    .collect();
                self.acc(grads, *logits, Tensor::new(t.shape().to_vec(), d));
            }
            Op::Giou { pred, gt } => {
                let t = self.value(*pred);
                let (p, _) = t.dims2();
                let mut d = vec![0.0; p * 4];
                for i in 0..p {
                    let terms = giou_terms(t.row(i), gt.row(i));
                    for (o, v) in d[i * 4..i * 4 + 4].iter_mut().zip(terms.grad) {
                        *o = gd[0] * v / p as f64;
                    }
                }
                self.acc(grads, *pred, Tensor::new(vec![p, 4], d));
            }
            Op::DecodeDeltas { deltas, anchors, clamped } => {
                let (p, _) = g.dims2();
                let out = node.value.data();
                let mut d = vec![0.0; p * 4];
                for i in 0..p {
                    let a = anchors.row(i);
                    let (aw, ah) = (a[2] - a[0], a[3] - a[1]);
                    let gi = &gd[i * 4..i * 4 + 4];
                    let (w, h) = (out[i * 4 + 2] - out[i * 4], out[i * 4 + 3] - out[i * 4 + 1]);
                    d[i * 4] = aw * (gi[0] + gi[2]);
                    d[i * 4 + 1] = ah * (gi[1] + gi[3]);
                    d[i * 4 + 2] = if clamped[i * 2] { 0.0 } else { w * 0.5 * (gi[2] - gi[0]) };
                    d[i * 4 + 3] = if clamped[i * 2 + 1] { 0.0 } else { h * 0.5 * (gi[3] - gi[1]) };
                }
                self.acc(grads, *deltas, Tensor::new(vec![p, 4], d));
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

fn row_norm(row: &[f64]) -> f64 {
    (row.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt()
}

/// Largest log-scale step allowed when decoding widths and heights.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Returns the decoded box and whether width/height deltas were clamped.
pub(crate) fn decode_one(anchor: &[f64], delta: &[f64]) -> ([f64; 4], [bool; 2]) {
    let (aw, ah) = (anchor[2] - anchor[0], anchor[3] - anchor[1]);
    let (acx, acy) = (anchor[0] + 0.5 * aw, anchor[1] + 0.5 * ah);
    let cx = acx + delta[0] * aw;
    let cy = acy + delta[1] * ah;
    let cw = delta[2] > MAX_LOG_SCALE;
    let chh = delta[3] > MAX_LOG_SCALE;
    let w = aw * delta[2].min(MAX_LOG_SCALE).exp();
    let h = ah * delta[3].min(MAX_LOG_SCALE).exp();
    ([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], [cw, chh])
}

fn sample_coord(v: f64, size: usize) -> f64 {
    v.clamp(-1.0, size as f64)
}

/// Flat indices and weights of the in-bounds bilinear corners around `(y, x)`.
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> Vec<(usize, f64)> {
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let mut taps = Vec::with_capacity(4);
    for (dy, wy) in [(0.0, 1.0 - ly), (1.0, ly)] {
        for (dx, wx) in [(0.0, 1.0 - lx), (1.0, lx)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 && wy * wx != 0.0 {
                taps.push(((yy as usize) * w + xx as usize, wy * wx));
            }
        }
    }
    taps
}

/// Weights of the partial derivatives of the bilinear sample w.r.t. `y` and `x`.
#[allow(clippy::type_complexity)]
fn bilinear_coord_grads(y: f64, x: f64, h: usize, w: usize) -> (Vec<(usize, f64)>, Vec<(usize, f64)>) {
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    let mut gy = Vec::with_capacity(4);
    let mut gx = Vec::with_capacity(4);
    for (dy, wy, sy) in [(0.0, 1.0 - ly, -1.0), (1.0, ly, 1.0)] {
        for (dx, wx, sx) in [(0.0, 1.0 - lx, -1.0), (1.0, lx, 1.0)] {
            let (yy, xx) = (y0 + dy, x0 + dx);
            if yy >= 0.0 && yy < h as f64 && xx >= 0.0 && xx < w as f64 {
                let idx = (yy as usize) * w + xx as usize;
                gy.push((idx, sy * wx));
                gx.push((idx, sx * wy));
            }
        }
    }
    (gy, gx)
}

pub(crate) struct GiouTerms {
    pub loss: f64,
    pub grad: [f64; 4],
}

/// `1 - GIoU(pred, gt)` and its gradient with respect to `pred`.
pub(crate) fn giou_terms(p: &[f64], gt: &[f64]) -> GiouTerms {
    let wp = (p[2] - p[0]).max(0.0);
    let hp = (p[3] - p[1]).max(0.0);
    let ap = wp * hp;
    let ag = (gt[2] - gt[0]).max(0.0) * (gt[3] - gt[1]).max(0.0);

    let ix1_pred = p[0] >= gt[0];
    let iy1_pred = p[1] >= gt[1];
    let ix2_pred = p[2] <= gt[2];
    let iy2_pred = p[3] <= gt[3];
    let iw_raw = p[2].min(gt[2]) - p[0].max(gt[0]);
    let ih_raw = p[3].min(gt[3]) - p[1].max(gt[1]);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let union = ap + ag - inter;

    let ex1_pred = p[0] <= gt[0];
    let ey1_pred = p[1] <= gt[1];
    let ex2_pred = p[2] >= gt[2];
    let ey2_pred = p[3] >= gt[3];
    let ew = p[2].max(gt[2]) - p[0].min(gt[0]);
    let eh = p[3].max(gt[3]) - p[1].min(gt[1]);
    let enclose = ew * eh;

    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let ratio = if enclose > 0.0 { union / enclose } else { 1.0 };
    let loss = 2.0 - iou - ratio;

    let mut grad = [0.0; 4];
    if union <= 0.0 || enclose <= 0.0 {
        return GiouTerms { loss, grad };
    }
    // dL = cI·dInter + cA·dAreaPred + cE·dEnclose
    let c_inter = -(1.0 / union + inter / (union * union)) + 1.0 / enclose;
    let c_area = inter / (union * union) - 1.0 / enclose;
    let c_enc = union / (enclose * enclose);

    let mut d_inter = [0.0; 4];
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if ix1_pred {
            d_inter[0] = -ih;
        }
        if ix2_pred {
            d_inter[2] = ih;
        }
        if iy1_pred {
            d_inter[1] = -iw;
        }
        if iy2_pred {
            d_inter[3] = iw;
        }
    }
    let mut d_area = [0.0; 4];
    if p[2] - p[0] > 0.0 && p[3] - p[1] > 0.0 {
        d_area = [-hp, -wp, hp, wp];
    }
    let mut d_enc = [0.0; 4];
    if ex1_pred {
        d_enc[0] = -eh;
    }
    if ex2_pred {
        d_enc[2] = eh;
    }
    if ey1_pred {
        d_enc[1] = -ew;
    }
    if ey2_pred {
        d_enc[3] = ew;
    }
    for i in 0..4 {
        grad[i] = c_inter * d_inter[i] + c_area * d_area[i] + c_enc * d_enc[i];
    }
    GiouTerms { loss, grad }
}
