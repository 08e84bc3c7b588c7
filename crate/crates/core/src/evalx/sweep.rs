use std::path::{Path, PathBuf};

use super::data::{evaluate, EvalSet};
use super::metrics::EvalReport;
use crate::error::{Error, IoContext, Result};
use crate::trainer::{train, Corpora, TrainConfig};

pub const SWEEP_FILE: &str = "sweep.csv";

/// One trained and evaluated setting.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub report: EvalReport,
    pub run_dir: PathBuf,
}

fn run_dir_name(i: usize, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{i:02}_{clean}")
}

/// Writes the sweep table: `axis, value` followed by the flat report keys.
pub fn write_sweep_csv(path: &Path, axis: &str, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let keys: Vec<String> = rows
        .iter()
        .flat_map(|r| r.report.flat().into_keys())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut header = vec!["axis".to_string(), "value".to_string()];
    header.extend(keys.iter().cloned());
    w.write_record(&header)?;
    for r in rows {
        let flat = r.report.flat();
        let mut rec = vec![axis.to_string(), r.value.clone()];
        rec.extend(keys.iter().map(|k| flat.get(k).map_or(String::new(), |v| v.to_string())));
        w.write_record(&rec)?;
    }
    w.flush().at(path)?;
    Ok(())
}

/// Trains and evaluates one run per value of `axis` on fixed data, all with
/// the base seed, and writes `sweep.csv` into `out_dir`.
pub fn ablation_sweep_with(
    base: &TrainConfig,
    axis: &str,
    values: &[String],
    corpora: &Corpora,
    eval: &EvalSet,
    out_dir: &Path,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::InvalidInput("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| base.with_override(axis, v))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out_dir).at(out_dir)?;
    let mut rows = Vec::new();
    for (i, (v, cfg)) in values.iter().zip(&configs).enumerate() {
        let run_dir = out_dir.join(run_dir_name(i, v));
        log::info!("sweep {axis}={v}");
        let (model, _) = train(corpora, cfg, &run_dir)?;
        let report = evaluate(&model, eval, cfg)?;
        std::fs::write(run_dir.join("report.json"), serde_json::to_string_pretty(&report)?).at(&run_dir)?;
        rows.push(SweepRow {
            value: v.clone(),
            report,
            run_dir,
        });
    }
    write_sweep_csv(&out_dir.join(SWEEP_FILE), axis, &rows)?;
    Ok(rows)
}

/// [`ablation_sweep_with`] on the data named by the config's `[data]` and
/// `[eval]` sections. Axes under those sections reload data per value.
pub fn ablation_sweep(base: &TrainConfig, axis: &str, values: &[String], out_dir: &Path) -> Result<Vec<SweepRow>> {
    let load = |cfg: &TrainConfig| -> Result<(Corpora, EvalSet)> {
        let path = cfg
            .eval
            .data
            .as_deref()
            .ok_or_else(|| Error::Config("eval.data is required for a sweep".into()))?;
        Ok((Corpora::load(cfg)?, EvalSet::load(path)?))
    };
    if axis.starts_with("data.") || axis.starts_with("eval.") {
        let mut rows = Vec::new();
        for (i, v) in values.iter().enumerate() {
            let cfg = base.with_override(axis, v)?;
            let (c, e) = load(&cfg)?;
            let sub = out_dir.join(run_dir_name(i, v));
            let mut r = ablation_sweep_with(&cfg, axis, std::slice::from_ref(v), &c, &e, &sub)?;
            rows.append(&mut r);
        }
        write_sweep_csv(&out_dir.join(SWEEP_FILE), axis, &rows)?;
        return Ok(rows);
    }
    base.with_override(axis, values.first().map_or("", String::as_str))?;
    let (c, e) = load(base)?;
    ablation_sweep_with(base, axis, values, &c, &e, out_dir)
}
