use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ovdkit::corpus::io::{convert, ConvertOptions};
use ovdkit::corpus::{DataKind, ImageSample};
use ovdkit::evalx::{
    ablation_sweep, evaluate, visualize_alignment, EvalSet, InferConfig, ShapesWorld, ShapesWorldConfig, SWEEP_FILE,
};
use ovdkit::trainer::{load_trained, resume, train, Corpora, TrainConfig, METRICS_FILE};

#[derive(Parser)]
#[command(name = "ovdkit", version, about = "Open-vocabulary detection pre-training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Detection,
    Grounding,
    Pairs,
    Classification,
}

impl From<Kind> for DataKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Detection => DataKind::Detection,
            Kind::Grounding => DataKind::Grounding,
            Kind::Pairs => DataKind::ImageText,
            Kind::Classification => DataKind::Classification,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a raw split into triplet JSON-lines.
    Convert {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Concepts per detection/grounding triplet.
        #[arg(long)]
        concepts: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra `name<TAB>definition` dictionary for negatives.
        #[arg(long)]
        dictionary: Option<PathBuf>,
    },
    /// Train a model; writes metrics.jsonl, timing.jsonl and checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Dotted-key override, e.g. `--set train.epochs=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Zero-shot AP/AR of a checkpoint on a detection-format split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw each caption phrase's best-matching region.
    Visualize {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate once per value of one config key.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic shapes-world benchmark and ready-made configs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        epochs: usize,
        /// Scale every split size by this factor.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.apply_env()?;
    for o in overrides {
        let (k, v) = o.split_once('=').with_context(|| format!("override {o:?} is not KEY=VALUE"))?;
        cfg = cfg.with_override(k.trim(), v.trim())?;
    }
    Ok(cfg)
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert { kind, input, out, concepts, seed, dictionary } => {
            let opts = ConvertOptions { concepts_per_sample: concepts, seed, dictionary };
            let n = convert(kind.into(), &input, &out, &opts)?;
            println!("wrote {n} triplets to {}", out.display());
        }
        Command::Train { config, out, resume: from, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let corpora = Corpora::load(&cfg)?;
            if corpora.0.is_empty() {
                bail!("the config names no training data");
            }
            let (_, outcome) = match from {
                Some(ckpt) => resume(&ckpt, &cfg, &corpora, &out)?,
                None => train(&corpora, &cfg, &out)?,
            };
            std::fs::write(out.join("config.toml"), cfg.to_toml_string())?;
            let last = outcome.reports.last();
            println!(
                "{} steps, final loss {}, checkpoint {}, metrics {}",
                outcome.reports.len(),
                last.map_or("n/a".into(), |r| format!("{:.4}", r.loss_total)),
                outcome.checkpoint.display(),
                out.join(METRICS_FILE).display()
            );
        }
        Command::Eval { config, ckpt, data, out } => {
            let cfg = load_config(&config, &[])?;
            let (model, _) = load_trained(&ckpt)?;
            let set = EvalSet::load(&data)?;
            let report = evaluate(&model, &set, &cfg)?;
            let text = serde_json::to_string_pretty(&report)?;
            create_parent(&out)?;
            std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
            println!("{text}");
        }
        Command::Visualize { ckpt, image, caption, out } => {
            let (model, cfg) = load_trained(&ckpt)?;
            let infer = cfg.as_ref().map_or_else(InferConfig::default, InferConfig::from_config);
            let img = ImageSample::load(&image, image.to_string_lossy())?;
            create_parent(&out)?;
            let matches = visualize_alignment(&img, &caption, &model, &infer, &out)?;
            println!("{}", serde_json::to_string_pretty(&matches)?);
        }
        Command::Sweep { config, axis, values, out } => {
            let cfg = load_config(&config, &[])?;
            let rows = ablation_sweep(&cfg, &axis, &values, &out)?;
            for r in &rows {
                println!(
                    "{axis}={} ap {:.4} ap50 {:.4} ar {:.4}",
                    r.value, r.report.ap_overall, r.report.ap50, r.report.ar
                );
            }
            println!("table written to {}", out.join(SWEEP_FILE).display());
        }
        Command::Synth { out, seed, epochs, scale } => {
            if scale.is_nan() || scale <= 0.0 {
                bail!("--scale must be > 0");
            }
            let d = ShapesWorldConfig::default();
            let sized = |n: usize| ((n as f64 * scale).round() as usize).max(1);
            let wc = ShapesWorldConfig {
                seed,
                detection_images: sized(d.detection_images),
                pair_images: sized(d.pair_images),
                eval_images: sized(d.eval_images),
                ..d
            };
            let world = ShapesWorld::generate(&wc)?;
            let paths = world.write(&out)?;
            let rel = |p: &Path| PathBuf::from(p.file_name().expect("split file name"));
            let mut base = TrainConfig::default();
            base.train.epochs = epochs;
            base.train.seed = seed;
            base.data.detection = Some(rel(&paths.detection));
            base.data.detection_concepts = world.dictionary.len();
            base.eval.data = Some(rel(&paths.eval));
            let mut pairs = base.clone();
            pairs.data.image_text = Some(rel(&paths.pairs));
            for (name, cfg) in [("det_only.toml", &base), ("det_pairs.toml", &pairs)] {
                std::fs::write(out.join(name), cfg.to_toml_string())?;
            }
            println!(
                "wrote {} detection, {} pair and {} eval images plus det_only.toml and det_pairs.toml to {}",
                world.detection.len(),
                world.pairs.len(),
                world.eval.images.len(),
                out.display()
            );
            println!("next: ovdkit train --config {} --out runs/pairs", out.join("det_pairs.toml").display());
        }
    }
    Ok(())
}

fn main() -> std::process::ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
