use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::EncoderConfig;
use super::text::{tokenize, EMPTY_TOKEN};
use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{Concept, ImageSample};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Initial value of the alignment logit scale.
pub const INIT_LOGIT_SCALE: f64 = 1.0 / 0.07;
/// Initial alignment logit bias, a 1% foreground prior.
pub const INIT_LOGIT_BIAS: f64 = -4.59511985013459;

/// Graph handles for one image's dense predictions.
#[derive(Debug, Clone)]
pub struct RegionVars {
    /// `K × D`, rows L2-normalized.
    pub features: Var,
    /// `K × 4` box deltas.
    pub deltas: Var,
    /// `K × 1` centerness logits.
    pub centerness: Var,
    /// `K × 1` logits of the detached foreground probe.
    pub cls_pred: Var,
    /// `K × 1` logits of the detached IoU probe.
    pub iou_pred: Var,
    pub anchors: Vec<[f64; 4]>,
    pub level_of: Vec<usize>,
    /// `(height, width)` of the encoded input.
    pub image_size: (usize, usize),
}

/// Dense predictions for one image, detached from any graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionBatch {
    pub boxes: Vec<[f64; 4]>,
    pub features: Vec<Vec<f64>>,
    pub reg_deltas: Vec<[f64; 4]>,
    pub centerness: Vec<f64>,
    pub iou_pred: Vec<f64>,
    pub cls_pred: Vec<f64>,
    pub level_of: Vec<usize>,
    pub image_size: (usize, usize),
}

impl RegionBatch {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Rows `idx` of every per-region field.
    pub fn subset(&self, idx: &[usize]) -> RegionBatch {
        RegionBatch {
            boxes: idx.iter().map(|&i| self.boxes[i]).collect(),
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            reg_deltas: idx.iter().map(|&i| self.reg_deltas[i]).collect(),
            centerness: idx.iter().map(|&i| self.centerness[i]).collect(),
            iou_pred: idx.iter().map(|&i| self.iou_pred[i]).collect(),
            cls_pred: idx.iter().map(|&i| self.cls_pred[i]).collect(),
            level_of: idx.iter().map(|&i| self.level_of[i]).collect(),
            image_size: self.image_size,
        }
    }
}

/// Normalized concept embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEmbeddings {
    pub embeddings: Vec<Vec<f64>>,
    pub token_counts: Vec<usize>,
}

impl ConceptEmbeddings {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

/// Applies deltas to anchors and clips to the image, keeping `x1 < x2`, `y1 < y2`.
pub fn decode_boxes(batch: &RegionBatch) -> Vec<[f64; 4]> {
    batch
        .boxes
        .iter()
        .zip(&batch.reg_deltas)
        .map(|(a, d)| clip_box(crate::autograd::decode_one(a, d).0, batch.image_size))
        .collect()
}

const MIN_BOX_SIDE: f64 = 1e-3;

pub fn clip_box(b: [f64; 4], (h, w): (usize, usize)) -> [f64; 4] {
    let (h, w) = (h as f64, w as f64);
    let x1 = b[0].clamp(0.0, w - MIN_BOX_SIDE);
    let y1 = b[1].clamp(0.0, h - MIN_BOX_SIDE);
    let x2 = b[2].clamp(x1 + MIN_BOX_SIDE, w);
    let y2 = b[3].clamp(y1 + MIN_BOX_SIDE, h);
    [x1, y1, x2, y2]
}

/// Image encoder, text encoder and alignment logit parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: EncoderConfig,
    params: ParamStore,
}

fn backbone_depth(cfg: &EncoderConfig) -> usize {
    cfg.max_stride().trailing_zeros() as usize
}

fn backbone_width(cfg: &EncoderConfig, i: usize) -> usize {
    if i == 0 {
        (cfg.channels / 2).max(1)
    } else {
        cfg.channels
    }
}

impl Model {
    /// Randomly initialized model; the draw depends only on `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut params = ParamStore::new();
        let normal = |shape: &[usize], std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            let n = Normal::new(0.0, std).expect("finite std");
            let len = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..len).map(|_| n.sample(rng)).collect())
        };
        let c = config.channels;
        let d = config.dim;
        let mut in_c = 3;
        for i in 0..backbone_depth(&config) {
            let out_c = backbone_width(&config, i);
            let fan = in_c * 9;
            params.register(&format!("backbone.{i}.w"), ParamGroup::Backbone, normal(&[out_c, fan], (2.0 / fan as f64).sqrt(), &mut rng));
            params.register(&format!("backbone.{i}.b"), ParamGroup::Backbone, Tensor::zeros(&[out_c]));
            in_c = out_c;
        }
        let he = (2.0 / (c * 9) as f64).sqrt();
        params.register("reg.tower.w", ParamGroup::Regression, normal(&[c, c * 9], he, &mut rng));
        params.register("reg.tower.b", ParamGroup::Regression, Tensor::zeros(&[c]));
        params.register("reg.delta.w", ParamGroup::Regression, normal(&[4, c], 0.01, &mut rng));
        params.register("reg.delta.b", ParamGroup::Regression, Tensor::zeros(&[4]));
        params.register("reg.ctr.w", ParamGroup::Regression, normal(&[1, c], 0.01, &mut rng));
        params.register("reg.ctr.b", ParamGroup::Regression, Tensor::zeros(&[1]));
        if config.bridge_enabled {
            params.register("bridge.offset.w", ParamGroup::Bridge, normal(&[18, c], 0.01, &mut rng));
            params.register("bridge.offset.b", ParamGroup::Bridge, Tensor::zeros(&[18]));
            params.register("bridge.mask.w", ParamGroup::Bridge, normal(&[9, c], 0.01, &mut rng));
            params.register("bridge.mask.b", ParamGroup::Bridge, Tensor::zeros(&[9]));
        }
        params.register("cls.tower.w", ParamGroup::Classification, normal(&[c, c * 9], he, &mut rng));
        params.register("cls.tower.b", ParamGroup::Classification, Tensor::zeros(&[c]));
        params.register("cls.embed.w", ParamGroup::Classification, normal(&[d, c], (1.0 / c as f64).sqrt(), &mut rng));
        params.register("cls.embed.b", ParamGroup::Classification, Tensor::zeros(&[d]));
        params.register("aux.cls.w", ParamGroup::Auxiliary, normal(&[1, c], 0.01, &mut rng));
        params.register("aux.cls.b", ParamGroup::Auxiliary, Tensor::zeros(&[1]));
        params.register("aux.iou.w", ParamGroup::Auxiliary, normal(&[1, c], 0.01, &mut rng));
        params.register("aux.iou.b", ParamGroup::Auxiliary, Tensor::zeros(&[1]));
        params.register("align.scale", ParamGroup::LogitScale, Tensor::new(vec![1], vec![INIT_LOGIT_SCALE]));
        params.register("align.bias", ParamGroup::LogitScale, Tensor::new(vec![1], vec![INIT_LOGIT_BIAS]));
        params.register("text.table", ParamGroup::Text, normal(&[config.vocab_size, d], 1.0, &mut rng));
        params.register("text.proj.w", ParamGroup::Text, normal(&[d, d], (1.0 / d as f64).sqrt(), &mut rng));
        params.register("text.proj.b", ParamGroup::Text, Tensor::zeros(&[d]));
        Ok(Self { config, params })
    }

    /// Same layout as [`Model::new`] with every parameter set to zero.
    pub fn zeros(config: EncoderConfig) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let ids: Vec<ParamId> = m.params.ids().collect();
        for id in ids {
            m.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(m)
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against the layout implied by `config`.
    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for id in template.params.ids() {
            let name = template.params.name(id);
            let other = params
                .id(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing parameter {name}")))?;
            if params.get(other).shape() != template.params.get(id).shape() {
                return Err(Error::CorruptCheckpoint(format!("shape mismatch for {name}")));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn p(&self, g: &mut Graph, name: &str) -> Var {
        let id = self.params.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
        g.param(&self.params, id)
    }

    /// `x: C×H×W` → `Co×Ho×Wo`.
    fn conv(&self, g: &mut Graph, x: Var, prefix: &str, k: usize, stride: usize) -> Var {
        let cols = g.im2col(x, k, stride, k / 2);
        let s = g.shape(x).to_vec();
        let (ho, wo) = ((s[1] + 2 * (k / 2) - k) / stride + 1, (s[2] + 2 * (k / 2) - k) / stride + 1);
        let w = self.p(g, &format!("{prefix}.w"));
        let b = self.p(g, &format!("{prefix}.b"));
        let y = g.matmul(w, cols);
        let y = g.add_col_vec(y, b);
        let co = g.shape(y)[0];
        g.reshape(y, &[co, ho, wo])
    }

    /// 1×1 projection of `x: C×H×W` → `Co × (H·W)`.
    fn project(&self, g: &mut Graph, x: Var, prefix: &str) -> Var {
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0], s[1] * s[2]]);
        let w = self.p(g, &format!("{prefix}.w"));
        let b = self.p(g, &format!("{prefix}.b"));
        let y = g.matmul(w, flat);
        g.add_col_vec(y, b)
    }

    /// Deformable aggregation of `feats` with offsets and modulation scalars
    /// projected from `reg_feats`; returns `C·9 × H·W` columns.
    pub fn deformable_bridge(&self, g: &mut Graph, feats: Var, reg_feats: Var) -> Result<Var> {
        let (a, b) = (g.shape(feats).to_vec(), g.shape(reg_feats).to_vec());
        if a.len() != 3 || b.len() != 3 || a[1..] != b[1..] {
            return Err(Error::ShapeMismatch(format!("bridge inputs {a:?} and {b:?}")));
        }
        let offsets = self.project(g, reg_feats, "bridge.offset");
        let mask_logits = self.project(g, reg_feats, "bridge.mask");
        let mask = g.sigmoid(mask_logits);
        Ok(g.deform_im2col(feats, offsets, mask))
    }

    /// Dense predictions for `image` recorded on `g`.
    pub fn forward_image(&self, g: &mut Graph, image: &ImageSample) -> Result<RegionVars> {
        let (h, w) = (image.height(), image.width());
        let ms = self.config.max_stride();
        if h % ms != 0 || w % ms != 0 {
            return Err(Error::ShapeMismatch(format!(
                "image {h}x{w} is not divisible by the maximum stride {ms}"
            )));
        }
        let mut chw = image.to_chw();
        chw.data_mut().iter_mut().for_each(|v| *v = 2.0 * (*v - 0.5));
        let mut x = g.constant(chw);
        let mut level_feats = Vec::new();
        for i in 0..backbone_depth(&self.config) {
            let y = self.conv(g, x, &format!("backbone.{i}"), 3, 2);
            x = g.relu(y);
            if self.config.strides.contains(&(2usize << i)) {
                level_feats.push(x);
            }
        }
        let c = self.config.channels;
        let (mut feats, mut deltas, mut ctrs, mut clsp, mut ioup) = (vec![], vec![], vec![], vec![], vec![]);
        for f in level_feats {
            let s = g.shape(f).to_vec();
            let hw = s[1] * s[2];
            let rt = self.conv(g, f, "reg.tower", 3, 1);
            let reg_t = g.relu(rt);
            let cls_cols = if self.config.bridge_enabled {
                self.deformable_bridge(g, f, reg_t)?
            } else {
                g.im2col(f, 3, 1, 1)
            };
            let cw = self.p(g, "cls.tower.w");
            let cb = self.p(g, "cls.tower.b");
            let ct = g.matmul(cw, cls_cols);
            let ct = g.add_col_vec(ct, cb);
            let cls_t = g.relu(ct);
            let cls_t = g.reshape(cls_t, &[c, s[1], s[2]]);
            let emb = self.project(g, cls_t, "cls.embed");
            feats.push(g.transpose(emb));
            let dl = self.project(g, reg_t, "reg.delta");
            deltas.push(g.transpose(dl));
            let cl = self.project(g, reg_t, "reg.ctr");
            ctrs.push(g.reshape(cl, &[hw, 1]));
            let cls_d = g.detach(cls_t);
            let ap = self.project(g, cls_d, "aux.cls");
            clsp.push(g.reshape(ap, &[hw, 1]));
            let reg_d = g.detach(reg_t);
            let ip = self.project(g, reg_d, "aux.iou");
            ioup.push(g.reshape(ip, &[hw, 1]));
        }
        let f = g.concat_rows(&feats);
        let features = g.l2_normalize_rows(f);
        let (anchors, level_of) = self.config.anchors(h, w);
        Ok(RegionVars {
            features,
            deltas: g.concat_rows(&deltas),
            centerness: g.concat_rows(&ctrs),
            cls_pred: g.concat_rows(&clsp),
            iou_pred: g.concat_rows(&ioup),
            anchors,
            level_of,
            image_size: (h, w),
        })
    }

    /// Token ids for `text`; empty texts map to the reserved empty token.
    pub fn tokens(&self, text: &str) -> Vec<usize> {
        let t = tokenize(text, self.config.vocab_size, self.config.max_tokens);
        if t.is_empty() {
            vec![EMPTY_TOKEN]
        } else {
            t
        }
    }

    /// `M × D` normalized embeddings of `texts` recorded on `g`.
    pub fn forward_texts(&self, g: &mut Graph, texts: &[&str]) -> Var {
        assert!(!texts.is_empty(), "forward_texts needs at least one text");
        let tokens: Vec<Vec<usize>> = texts.iter().map(|t| self.tokens(t)).collect();
        let table = self.p(g, "text.table");
        let pooled = g.embed_mean(table, tokens);
        let w = self.p(g, "text.proj.w");
        let b = self.p(g, "text.proj.b");
        let y = g.matmul_nt(pooled, w);
        let y = g.add_row_vec(y, b);
        g.l2_normalize_rows(y)
    }

    /// Alignment logit scale and bias.
    pub fn logit_params(&self, g: &mut Graph) -> (Var, Var) {
        (self.p(g, "align.scale"), self.p(g, "align.bias"))
    }

    pub fn logit_scale(&self) -> (f64, f64) {
        let s = self.params.get(self.params.id("align.scale").expect("scale")).item();
        let b = self.params.get(self.params.id("align.bias").expect("bias")).item();
        (s, b)
    }

    pub fn encode_image(&self, image: &ImageSample) -> Result<RegionBatch> {
        let mut g = Graph::new();
        let v = self.forward_image(&mut g, image)?;
        Ok(region_batch(&g, &v))
    }

    pub fn encode_texts(&self, concepts: &[Concept]) -> Result<ConceptEmbeddings> {
        let texts: Vec<&str> = concepts.iter().map(|c| c.enriched.as_str()).collect();
        self.encode_text_strs(&texts)
    }

    pub fn encode_text_strs(&self, texts: &[&str]) -> Result<ConceptEmbeddings> {
        if texts.is_empty() {
            return Err(Error::InvalidInput("no concepts to encode".into()));
        }
        let mut g = Graph::new();
        let v = self.forward_texts(&mut g, texts);
        Ok(ConceptEmbeddings {
            embeddings: g.value(v).to_rows(),
            token_counts: texts
                .iter()
                .map(|t| tokenize(t, self.config.vocab_size, self.config.max_tokens).len())
                .collect(),
        })
    }
}

fn sig(x: f64) -> f64 {
    crate::autograd::sigmoid(x)
}

/// Reads the values behind `v` off the graph.
pub fn region_batch(g: &Graph, v: &RegionVars) -> RegionBatch {
    let col = |var: Var| g.value(var).data().iter().map(|x| sig(*x)).collect::<Vec<f64>>();
    RegionBatch {
        boxes: v.anchors.clone(),
        features: g.value(v.features).to_rows(),
        reg_deltas: g.value(v.deltas).to_rows().into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect(),
        centerness: col(v.centerness),
        iou_pred: col(v.iou_pred),
        cls_pred: col(v.cls_pred),
        level_of: v.level_of.clone(),
        image_size: v.image_size,
    }
}
