use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use super::config::TrainConfig;
use super::optim::{AdamW, LrSchedule};
use super::step::{build_step, StepReport};
use crate::autograd::ParamGroup;
use crate::corpus::io::{load_classification, load_pairs, load_triplets, DetectionFile};
use crate::corpus::{
    make_batch_schedule_with_repeats, validate_box, BoxAnnotation, ConceptDictionary, DataKind,
    Dataset, ScheduledBatch, Triplet,
};
use crate::encoder::{diff_keys, Checkpoint, Model, StoredTensor};
use crate::error::{Error, IoContext, Result};
use crate::rng::{derive_seed, Stream};

/// Training data keyed by kind.
#[derive(Debug, Clone, Default)]
pub struct Corpora(pub BTreeMap<DataKind, Dataset>);

fn is_triplet_file(path: &Path) -> Result<bool> {
    use std::io::BufRead;
    let f = File::open(path).at(path)?;
    let mut first = String::new();
    std::io::BufReader::new(f).read_line(&mut first).at(path)?;
    Ok(first.contains("\"concepts\""))
}

impl Corpora {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dataset: Dataset) {
        self.0.insert(dataset.kind(), dataset);
    }

    pub fn get(&self, kind: DataKind) -> Option<&Dataset> {
        self.0.get(&kind)
    }

    /// Loads every split named in the `[data]` section. Detection and
    /// grounding splits are raw JSON files or converted `.jsonl` triplets;
    /// pair and classification JSON-lines may be raw or converted.
    pub fn load(cfg: &TrainConfig) -> Result<Self> {
        let mut out = Self::new();
        let extra = cfg.data.dictionary.as_deref().map(ConceptDictionary::load).transpose()?;
        let merged = |file: &DetectionFile| -> Result<ConceptDictionary> {
            let mut d = file.dictionary()?;
            if let Some(extra) = &extra {
                for n in extra.names() {
                    if !d.contains(n) {
                        d.insert(n, extra.definition(n))?;
                    }
                }
            }
            Ok(d)
        };
        let dir = |p: &Path| p.parent().map(Path::to_path_buf).unwrap_or_default();
        let converted = |p: &Path| p.extension().is_some_and(|e| e == "jsonl");
        for (kind, path) in [(DataKind::Detection, &cfg.data.detection), (DataKind::Grounding, &cfg.data.grounding)] {
            if let Some(p) = path.as_deref().filter(|p| converted(p)) {
                let triplets = load_triplets(p)?;
                if let Some(t) = triplets.iter().find(|t| t.kind != kind) {
                    return Err(Error::InvalidInput(format!("{} holds {} triplets, expected {kind}", p.display(), t.kind)));
                }
                out.insert(Dataset::Triplets { kind, triplets });
            }
        }
        if let Some(p) = cfg.data.detection.as_deref().filter(|p| !converted(p)) {
            let file = DetectionFile::load(p)?;
            out.insert(Dataset::Detection {
                records: file.detection_records(&dir(p))?,
                dictionary: merged(&file)?,
                concepts_per_sample: cfg.data.detection_concepts,
            });
        }
        if let Some(p) = cfg.data.grounding.as_deref().filter(|p| !converted(p)) {
            let file = DetectionFile::load(p)?;
            out.insert(Dataset::Grounding {
                records: file.grounding_records(&dir(p))?,
                dictionary: merged(&file)?,
                concepts_per_sample: cfg.data.grounding_concepts,
            });
        }
        for (kind, path, loader) in [
            (DataKind::ImageText, &cfg.data.image_text, load_pairs as fn(&Path) -> Result<Vec<Triplet>>),
            (DataKind::Classification, &cfg.data.classification, load_classification),
        ] {
            if let Some(p) = path {
                let triplets = if is_triplet_file(p)? { load_triplets(p)? } else { loader(p)? };
                out.insert(Dataset::Triplets { kind, triplets });
            }
        }
        Ok(out)
    }
}

/// Resizes a triplet to the group resolution, mapping and clipping boxes.
/// Boxes that collapse below one pixel are dropped.
pub fn fit_triplet(t: &Triplet, (h, w): (usize, usize)) -> Triplet {
    let (image, info) = t.image.resize_fit(h, w);
    let boxes = t
        .boxes
        .iter()
        .filter_map(|b| {
            let m = info.map_box(b.bbox);
            let c = [m[0].max(0.0), m[1].max(0.0), m[2].min(info.new_w as f64), m[3].min(info.new_h as f64)];
            (c[2] - c[0] >= 1.0 && c[3] - c[1] >= 1.0 && validate_box(c, w, h).is_ok())
                .then_some(BoxAnnotation { bbox: c, concept: b.concept })
        })
        .collect();
    Triplet {
        image,
        boxes,
        concepts: t.concepts.clone(),
        kind: t.kind,
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub reports: Vec<StepReport>,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Joint trainer state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    corpora: &'a Corpora,
    model: Model,
    opt: AdamW,
    step: usize,
    steps_per_epoch: usize,
    schedule_cache: Option<(usize, Vec<ScheduledBatch>)>,
}

fn checkpoint_config_diff(a: &TrainConfig, b: &TrainConfig) -> Vec<String> {
    diff_keys(a, b)
        .into_iter()
        .filter(|k| k != "train.max_steps")
        .collect()
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, corpora: &'a Corpora) -> Result<Self> {
        cfg.validate()?;
        if corpora.0.is_empty() || corpora.0.values().all(Dataset::is_empty) {
            return Err(Error::InvalidInput("no training data".into()));
        }
        let model = Model::new(cfg.encoder.clone(), derive_seed(&[cfg.train.seed, Stream::Init as u64]))?;
        let mut opt = AdamW::new(model.params(), cfg.train.weight_decay);
        opt.lr_mult.insert(ParamGroup::Text, cfg.train.text_lr_mult);
        let mut t = Self {
            cfg,
            corpora,
            model,
            opt,
            step: 0,
            steps_per_epoch: 0,
            schedule_cache: None,
        };
        t.steps_per_epoch = t.schedule(0)?.len();
        Ok(t)
    }

    /// Restores model, optimizer and step counter. Every config key except
    /// `train.max_steps` must match the stored one.
    pub fn resume(path: &Path, cfg: TrainConfig, corpora: &'a Corpora) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let stored: TrainConfig = serde_json::from_value(ck.meta["train_config"].clone())
            .map_err(|e| Error::CorruptCheckpoint(format!("train config: {e}")))?;
        let diff = checkpoint_config_diff(&cfg, &stored);
        if !diff.is_empty() {
            return Err(Error::ConfigMismatch(diff));
        }
        let mut t = Self::new(cfg, corpora)?;
        t.model = Model::from_checkpoint(&ck, Some(&t.cfg.encoder))?;
        t.step = ck.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::CorruptCheckpoint("missing step".into()))? as usize;
        t.opt.t = ck.meta["opt_t"]
            .as_u64()
            .ok_or_else(|| Error::CorruptCheckpoint("missing optimizer step".into()))?;
        let params = t.model.params().clone();
        for id in params.ids() {
            let name = params.name(id);
            for (prefix, slot) in [("opt.m.", &mut t.opt.m), ("opt.v.", &mut t.opt.v)] {
                let s = ck
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::CorruptCheckpoint(format!("missing optimizer state for {name}")))?;
                if s.shape() != params.get(id).shape() {
                    return Err(Error::CorruptCheckpoint(format!("optimizer state shape for {name}")));
                }
                slot[id.0] = s.clone();
            }
        }
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.cfg.train.epochs
    }

    fn lr_schedule(&self) -> LrSchedule {
        let total = self.total_steps();
        LrSchedule {
            base_lr: self.cfg.train.lr,
            warmup_steps: (self.cfg.train.warmup_frac * total as f64).round() as usize,
            total_steps: total,
        }
    }

    fn schedule(&mut self, epoch: usize) -> Result<Vec<ScheduledBatch>> {
        if let Some((e, s)) = &self.schedule_cache {
            if *e == epoch {
                return Ok(s.clone());
            }
        }
        let counts: BTreeMap<DataKind, usize> = self
            .corpora
            .0
            .iter()
            .filter(|(_, d)| !d.is_empty())
            .map(|(k, d)| (*k, d.len()))
            .collect();
        let s = make_batch_schedule_with_repeats(
            &self.cfg.batch_groups(),
            &counts,
            &self.cfg.data.repeat,
            derive_seed(&[self.cfg.train.seed, epoch as u64]),
        )?;
        self.schedule_cache = Some((epoch, s.clone()));
        Ok(s)
    }

    /// Materialized, resized triplets of one scheduled batch.
    pub fn batch_triplets(&mut self, epoch: usize, batch: &ScheduledBatch) -> Result<Vec<Triplet>> {
        let data = self
            .corpora
            .get(batch.kind)
            .ok_or_else(|| Error::Config(format!("no data for {}", batch.kind)))?;
        let group = self.cfg.group(batch.kind)?;
        batch
            .indices
            .iter()
            .map(|&i| {
                let seed = derive_seed(&[
                    self.cfg.train.seed,
                    Stream::NegativeSampling as u64,
                    epoch as u64,
                    batch.kind as u64,
                    i as u64,
                ]);
                Ok(fit_triplet(&data.triplet(i, seed)?, group.resolution))
            })
            .collect()
    }

    /// Runs one scheduled step and applies the update.
    pub fn train_step(&mut self) -> Result<StepReport> {
        let epoch = self.step / self.steps_per_epoch;
        let pos = self.step % self.steps_per_epoch;
        let sched = self.schedule(epoch)?;
        let batch = self.batch_triplets(epoch, &sched[pos])?;
        let start = Instant::now();
        let sg = build_step(&self.model, &batch, &self.cfg)?;
        let lr = self.lr_schedule().at(self.step);
        let mut report = StepReport {
            step: self.step + 1,
            epoch,
            kind: sg.kind,
            loss_total: sg.loss_total,
            loss_terms: sg.loss_terms.clone(),
            aux_loss: sg.aux_loss,
            grad_norm: f64::NAN,
            lr,
            iter_time: 0.0,
        };
        if !report.loss_total.is_finite() || report.aux_loss.is_some_and(|a| !a.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: report.step,
                report: serde_json::to_string(&report)?,
            });
        }
        let grads = sg.graph.backward(sg.objective);
        let mut flat = AdamW::collect(self.model.params(), &grads);
        let norm = AdamW::global_norm(&flat);
        report.grad_norm = norm;
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: report.step,
                report: serde_json::to_string(&report)?,
            });
        }
        let clip = self.cfg.train.grad_clip;
        if clip > 0.0 && norm > clip {
            let s = clip / norm;
            flat.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v *= s));
        }
        self.opt.step(self.model.params_mut(), &flat, lr);
        self.step += 1;
        report.iter_time = start.elapsed().as_secs_f64();
        Ok(report)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint(json!({
            "train_config": serde_json::to_value(&self.cfg)?,
            "step": self.step,
            "opt_t": self.opt.t,
        }));
        let p = self.model.params();
        for id in p.ids() {
            for (prefix, src) in [("opt.m.", &self.opt.m), ("opt.v.", &self.opt.v)] {
                ck.tensors.push(StoredTensor {
                    name: format!("{prefix}{}", p.name(id)),
                    group: None,
                    tensor: src[id.0].clone(),
                });
            }
        }
        Ok(ck)
    }

    /// Trains until the schedule ends or `train.max_steps` is reached.
    /// Writes `metrics.jsonl`, `timing.jsonl`, one checkpoint per completed
    /// epoch and `last.ckpt` into `out_dir`.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir).at(out_dir)?;
        let metrics = out_dir.join(METRICS_FILE);
        let timing = out_dir.join(TIMING_FILE);
        let open = |p: &Path, fresh: bool| -> Result<BufWriter<File>> {
            let f = if fresh {
                File::create(p)
            } else {
                OpenOptions::new().create(true).append(true).open(p)
            };
            Ok(BufWriter::new(f.at(p)?))
        };
        let fresh = self.step == 0;
        let mut mw = open(&metrics, fresh)?;
        let mut tw = open(&timing, fresh)?;
        let stop = self
            .cfg
            .train
            .max_steps
            .map_or(self.total_steps(), |m| m.min(self.total_steps()));
        let mut reports = Vec::new();
        while self.step < stop {
            let r = self.train_step()?;
            serde_json::to_writer(&mut mw, &r)?;
            mw.write_all(b"\n").at(&metrics)?;
            writeln!(tw, "{}", json!({"step": r.step, "iter_time": r.iter_time})).at(&timing)?;
            if r.step % 50 == 0 || r.step == 1 {
                log::info!("step {} [{}] loss {:.4} lr {:.2e}", r.step, r.kind, r.loss_total, r.lr);
            }
            reports.push(r);
            if self.step.is_multiple_of(self.steps_per_epoch) {
                let epoch = self.step / self.steps_per_epoch;
                self.checkpoint()?.save(&out_dir.join(format!("epoch_{epoch}.ckpt")))?;
            }
        }
        mw.flush().at(&metrics)?;
        tw.flush().at(&timing)?;
        let last = out_dir.join(LAST_CHECKPOINT);
        self.checkpoint()?.save(&last)?;
        Ok(TrainOutcome {
            checkpoint: last,
            metrics,
            reports,
        })
    }
}

/// Trains a fresh model on `corpora` and writes outputs to `out_dir`.
pub fn train(corpora: &Corpora, cfg: &TrainConfig, out_dir: &Path) -> Result<(Model, TrainOutcome)> {
    let mut t = Trainer::new(cfg.clone(), corpora)?;
    let out = t.run(out_dir)?;
    Ok((t.into_model(), out))
}

/// Continues training from a checkpoint written by [`Trainer::run`].
pub fn resume(checkpoint: &Path, cfg: &TrainConfig, corpora: &Corpora, out_dir: &Path) -> Result<(Model, TrainOutcome)> {
    let mut t = Trainer::resume(checkpoint, cfg.clone(), corpora)?;
    let out = t.run(out_dir)?;
    Ok((t.into_model(), out))
}

/// Model stored in a training checkpoint, with its training config.
pub fn load_trained(path: &Path) -> Result<(Model, Option<TrainConfig>)> {
    let ck = Checkpoint::load(path)?;
    let cfg = serde_json::from_value(ck.meta["train_config"].clone()).ok();
    Ok((Model::from_checkpoint(&ck, None)?, cfg))
}
