use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assign::{Direction, LossConfig, Matching, DEFAULT_TOPK_PER_LEVEL};
use crate::corpus::{BatchGroup, DataKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, IoContext, Result};
use crate::wra::{ProposalSelectionConfig, Strategy};

/// Environment variable overriding `train.seed`.
pub const SEED_ENV: &str = "OVDKIT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warmup length as a fraction of all steps.
    pub warmup_frac: f64,
    /// Learning-rate multiplier for text-encoder parameters.
    pub text_lr_mult: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    /// Stops after this many steps without changing the schedule.
    pub max_steps: Option<usize>,
    pub topk_per_level: usize,
    /// Trains the cls/IoU probes on detection batches.
    pub aux_probes: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_frac: 0.05,
            text_lr_mult: 0.1,
            seed: 0,
            grad_clip: 10.0,
            max_steps: None,
            topk_per_level: DEFAULT_TOPK_PER_LEVEL,
            aux_probes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub alpha: f64,
    pub beta: f64,
    pub lam: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub smooth_eps: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let d = LossConfig::default();
        Self {
            alpha: d.alpha,
            beta: d.beta,
            lam: d.lam,
            focal_gamma: d.focal_gamma,
            focal_alpha: d.focal_alpha,
            smooth_eps: d.smooth_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WraSection {
    pub matching: Matching,
    pub direction: Direction,
    pub tau: f64,
    pub tau_t: f64,
    pub k: usize,
    pub strategy: Strategy,
    pub nms_iou: f64,
}

impl Default for WraSection {
    fn default() -> Self {
        let l = LossConfig::default();
        let s = ProposalSelectionConfig::default();
        Self {
            matching: l.matching,
            direction: l.direction,
            tau: l.tau,
            tau_t: l.tau_t,
            k: s.k,
            strategy: s.strategy,
            nms_iou: s.nms_iou,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSection {
    /// `[height, width]`.
    pub resolution: [usize; 2],
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub detection: Option<PathBuf>,
    pub grounding: Option<PathBuf>,
    pub image_text: Option<PathBuf>,
    pub classification: Option<PathBuf>,
    /// Extra concept dictionary merged into detection/grounding categories.
    pub dictionary: Option<PathBuf>,
    /// Concepts per detection triplet.
    pub detection_concepts: usize,
    /// Concepts per grounding triplet.
    pub grounding_concepts: usize,
    /// Times each kind's data is visited per epoch (default 1).
    pub repeat: BTreeMap<DataKind, usize>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            detection: None,
            grounding: None,
            image_text: None,
            classification: None,
            dictionary: None,
            detection_concepts: crate::corpus::io::DEFAULT_DETECTION_CONCEPTS,
            grounding_concepts: crate::corpus::io::DEFAULT_GROUNDING_CONCEPTS,
            repeat: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Detection-format split used by `eval` and `sweep`.
    pub data: Option<PathBuf>,
    /// Input resolution at evaluation; defaults to the detection group's.
    pub resolution: Option<[usize; 2]>,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Size-bucket thresholds are `32·s` and `96·s` pixels of box side.
    pub size_scale: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            data: None,
            resolution: None,
            nms_iou: 0.6,
            max_detections: 300,
            size_scale: 0.25,
        }
    }
}

/// Complete training configuration, stored as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub loss: LossSection,
    pub wra: WraSection,
    pub encoder: EncoderConfig,
    pub groups: BTreeMap<DataKind, GroupSection>,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            train: TrainSection::default(),
            loss: LossSection::default(),
            wra: WraSection::default(),
            encoder: EncoderConfig::default(),
            groups: BTreeMap::from([
                (DataKind::Detection, GroupSection { resolution: [64, 64], batch_size: 4 }),
                (DataKind::Grounding, GroupSection { resolution: [64, 64], batch_size: 4 }),
                (DataKind::ImageText, GroupSection { resolution: [32, 32], batch_size: 8 }),
                (DataKind::Classification, GroupSection { resolution: [32, 32], batch_size: 8 }),
            ]),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn key_exists(schema: &toml::Value, key: &str) -> bool {
    let mut cur = schema;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur {
            toml::Value::Table(t) => match t.get(*p) {
                Some(v) => cur = v,
                // Optional fields and open maps are absent from the serialized defaults.
                None => return optional_slot(&parts[..i], p),
            },
            _ => return false,
        }
    }
    true
}

fn optional_slot(parent: &[&str], leaf: &str) -> bool {
    match parent {
        ["train"] => leaf == "max_steps",
        ["data"] => ["detection", "grounding", "image_text", "classification", "dictionary"].contains(&leaf),
        ["data", "repeat"] | ["groups"] => DataKind::parse(leaf).is_some(),
        ["eval"] => ["data", "resolution"].contains(&leaf),
        _ => false,
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::UnknownConfigKey(key.to_string()))?;
        cur = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    cur.as_table_mut()
        .ok_or_else(|| Error::UnknownConfigKey(key.to_string()))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.resolve_paths(&std::fs::canonicalize(dir).unwrap_or_else(|_| dir.to_path_buf()));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.data.detection);
        fix(&mut self.data.grounding);
        fix(&mut self.data.image_text);
        fix(&mut self.data.classification);
        fix(&mut self.data.dictionary);
        fix(&mut self.eval.data);
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `OVDKIT_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Copy with one dotted key replaced; `raw` is parsed as a TOML value and
    /// falls back to a string.
    pub fn with_override(&self, key: &str, raw: &str) -> Result<Self> {
        let mut doc = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let schema = toml::Value::try_from(TrainConfig::default()).expect("defaults serialize");
        if !key_exists(&schema, key) && !key_exists(&doc, key) {
            return Err(Error::UnknownConfigKey(key.to_string()));
        }
        set_path(&mut doc, key, parse_value(raw))?;
        let cfg: TrainConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{key}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            lam: self.loss.lam,
            tau: self.wra.tau,
            tau_t: self.wra.tau_t,
            focal_gamma: self.loss.focal_gamma,
            focal_alpha: self.loss.focal_alpha,
            smooth_eps: self.loss.smooth_eps,
            direction: self.wra.direction,
            matching: self.wra.matching,
        }
    }

    pub fn selection(&self) -> ProposalSelectionConfig {
        ProposalSelectionConfig {
            strategy: self.wra.strategy,
            k: self.wra.k,
            nms_iou: self.wra.nms_iou,
        }
    }

    pub fn batch_groups(&self) -> Vec<BatchGroup> {
        self.groups
            .iter()
            .map(|(k, g)| BatchGroup {
                kind: *k,
                resolution: (g.resolution[0], g.resolution[1]),
                batch_size: g.batch_size,
            })
            .collect()
    }

    pub fn group(&self, kind: DataKind) -> Result<BatchGroup> {
        self.batch_groups()
            .into_iter()
            .find(|g| g.kind == kind)
            .ok_or_else(|| Error::Config(format!("no batch group configured for {kind}")))
    }

    /// Evaluation input size.
    pub fn eval_resolution(&self) -> (usize, usize) {
        match self.eval.resolution {
            Some([h, w]) => (h, w),
            None => self
                .groups
                .get(&DataKind::Detection)
                .map(|g| (g.resolution[0], g.resolution[1]))
                .unwrap_or((64, 64)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if !(self.train.lr > 0.0) {
            return Err(Error::Config("train.lr must be > 0".into()));
        }
        if !(self.train.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.train.warmup_frac) {
            return Err(Error::Config("weight_decay must be >= 0 and warmup_frac in [0, 1)".into()));
        }
        if self.train.topk_per_level == 0 {
            return Err(Error::Config("train.topk_per_level must be >= 1".into()));
        }
        self.encoder.validate()?;
        self.loss_config().validate()?;
        self.selection().validate()?;
        for g in self.batch_groups() {
            g.validate(self.encoder.max_stride())?;
        }
        let (h, w) = self.eval_resolution();
        let s = self.encoder.max_stride();
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("eval resolution {h}x{w} is not divisible by stride {s}")));
        }
        if self.eval.max_detections == 0 || !(self.eval.nms_iou > 0.0 && self.eval.nms_iou < 1.0) {
            return Err(Error::Config("eval.max_detections must be >= 1 and eval.nms_iou in (0, 1)".into()));
        }
        Ok(())
    }
}
