//! `train`: fit the configured model on the clean training split and save
//! a checkpoint plus a per-epoch loss log.

use std::fs;
use std::path::Path;

use rvseg_core::net::{train, Model};
use rvseg_core::real::Real;

use crate::commands::Ui;
use crate::config::{Precision, RunConfig};
use crate::error::{io_err, CliError};
use crate::formats::{
    save_checkpoint, write_loss_csv, CheckpointHeader, LossRow, StatsRepr, TrainMeta,
    CHECKPOINT_NAME,
};
use crate::formats::Manifest;
use crate::pipeline::{build_train_set, require_clean_train};

pub fn run(cfg: &RunConfig, data_dir: &Path, out_dir: &Path, ui: Ui) -> Result<(), CliError> {
    match cfg.model.precision {
        Precision::F32 => run_typed::<f32>(cfg, data_dir, out_dir, ui),
        Precision::F64 => run_typed::<f64>(cfg, data_dir, out_dir, ui),
    }
}

fn run_typed<F: Real>(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    ui: Ui,
) -> Result<(), CliError> {
    let manifest = Manifest::read(data_dir)?;
    require_clean_train(&manifest)?;

    let proj = cfg.projection.to_core();
    let (samples, stats) = build_train_set::<F>(data_dir, &manifest, &proj)?;
    ui.say(format!(
        "training on {} scenes ({}x{} range images)",
        samples.len(),
        proj.height,
        proj.width
    ));

    let mut model = Model::<F>::init(cfg.model.to_core(), cfg.seeds.master)?;
    let train_cfg = cfg.train_core();
    let report = train(&mut model, &samples, &train_cfg)?;

    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        ui.say(format!(
            "loss {:.4} -> {:.4} over {} epochs ({} optimizer steps)",
            first.total,
            last.total,
            report.epoch_losses.len(),
            report.optimizer_steps
        ));
    }

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_loss_csv(&out_dir.join("loss.csv"), &report.epoch_losses)?;

    let header = CheckpointHeader {
        projection: cfg.projection.clone(),
        model: cfg.model.clone(),
        stats: StatsRepr::from_core(&stats),
        meta: TrainMeta {
            epochs: train_cfg.epochs,
            master_seed: train_cfg.master_seed,
            optimizer_steps: report.optimizer_steps,
            loss_history: report.epoch_losses.iter().map(LossRow::from).collect(),
        },
    };
    let ckpt_path = out_dir.join(CHECKPOINT_NAME);
    save_checkpoint(&ckpt_path, &model, &header)?;
    ui.say(format!("checkpoint: {}", ckpt_path.display()));
    Ok(())
}
