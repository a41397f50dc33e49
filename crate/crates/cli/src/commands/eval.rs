//! `eval`: score a checkpoint on the eval split, one confusion matrix per
//! condition, and write the condition report.
//!
//! The checkpoint is self-describing (projection, model config, frozen
//! input statistics), so no training-side configuration is needed; the run
//! config only selects which conditions to report.

use std::fs;
use std::path::Path;

use rvseg_core::real::Real;

use crate::commands::Ui;
use crate::config::{Precision, RunConfig};
use crate::error::{io_err, CliError};
use crate::formats::{
    instantiate_model, read_checkpoint, write_report, ConditionRow, RawCheckpoint,
};
use crate::formats::Manifest;
use crate::pipeline::eval_entries;

pub fn run(
    cfg: &RunConfig,
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    ui: Ui,
) -> Result<(), CliError> {
    let raw = read_checkpoint(checkpoint)?;
    match raw.header.model.precision {
        Precision::F32 => run_typed::<f32>(cfg, &raw, data_dir, out_dir, ui),
        Precision::F64 => run_typed::<f64>(cfg, &raw, data_dir, out_dir, ui),
    }
}

fn run_typed<F: Real>(
    cfg: &RunConfig,
    raw: &RawCheckpoint,
    data_dir: &Path,
    out_dir: &Path,
    ui: Ui,
) -> Result<(), CliError> {
    let (model, stats) = instantiate_model::<F>(raw)?;
    let proj = raw.header.projection.to_core();
    let manifest = Manifest::read(data_dir)?;

    let mut rows = Vec::new();
    for condition in cfg.eval.conditions()? {
        let entries = manifest.eval_for(condition);
        if entries.is_empty() {
            ui.say(format!("{}: no eval scenes, skipping", condition.as_str()));
            continue;
        }
        let cm = eval_entries(&model, &stats, &proj, data_dir, &entries)?;
        let row = ConditionRow::from_matrix(condition, &cm);
        ui.say(format!(
            "{:<6} miou {}  ({} scenes, {} points scored, {} ignored)",
            condition.as_str(),
            row.miou.map_or_else(|| "-".into(), |v| format!("{v:.4}")),
            entries.len(),
            row.points,
            row.ignored,
        ));
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data(
            "no requested condition has eval scenes in the manifest".into(),
        ));
    }

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_report(out_dir, &rows)?;
    ui.say(format!(
        "report: {} and report.json",
        out_dir.join("report.csv").display()
    ));
    Ok(())
}
