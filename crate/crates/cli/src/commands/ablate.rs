//! `ablate`: train every stem/GAS/RDC toggle combination with shared seeds
//! and tabulate per-condition mIoU.
//!
//! The monotonic expectation (full model beats each reduced variant on the
//! corrupted average) is checked softly: violations are flagged in the
//! summary, never hidden and never fatal, since at desk scale individual
//! seeds can cross.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rvseg_core::net::{train, Model, ABLATION_VARIANTS};
use rvseg_core::projection::Condition;
use rvseg_core::real::Real;

use crate::commands::Ui;
use crate::config::{Precision, RunConfig};
use crate::error::{io_err, CliError};
use crate::formats::Manifest;
use crate::pipeline::{build_train_set, eval_entries, require_clean_train};

/// Conditions whose mean forms the "corrupted average" column.
pub const CORRUPT: [Condition; 3] = [Condition::Fog, Condition::Rain, Condition::Snow];

#[derive(Debug, Clone)]
pub struct SeedRow {
    pub seed: u64,
    /// mIoU per condition, in [`Condition::ALL`] order; `None` when no
    /// class had a populated union.
    pub miou: Vec<Option<f64>>,
}

#[derive(Debug, Clone)]
pub struct VariantRows {
    pub name: &'static str,
    pub split_stems: bool,
    pub use_gas: bool,
    pub use_rdc: bool,
    pub seeds: Vec<SeedRow>,
}

impl VariantRows {
    /// Seed-mean mIoU for one condition, ignoring empty seeds.
    pub fn mean_for(&self, condition: Condition) -> Option<f64> {
        let at = Condition::ALL.iter().position(|&c| c == condition)?;
        let vals: Vec<f64> = self.seeds.iter().filter_map(|s| s.miou[at]).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Seed-mean of the fog/rain/snow average.
    pub fn corrupt_avg(&self) -> Option<f64> {
        let vals: Vec<f64> = CORRUPT.iter().filter_map(|&c| self.mean_for(c)).collect();
        if vals.len() == CORRUPT.len() {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub variants: Vec<VariantRows>,
    /// One line per soft check, `ok` or `VIOLATED`.
    pub flags: Vec<String>,
}

pub fn run(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    ui: Ui,
) -> Result<AblationTable, CliError> {
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
) -> Result<AblationTable, CliError> {
    let manifest = Manifest::read(data_dir)?;
    require_clean_train(&manifest)?;
    let proj = cfg.projection.to_core();
    let (samples, stats) = build_train_set::<F>(data_dir, &manifest, &proj)?;

    let eval_sets: Vec<(Condition, Vec<&crate::formats::ScanEntry>)> = Condition::ALL
        .into_iter()
        .map(|c| (c, manifest.eval_for(c)))
        .collect();
    for (c, entries) in &eval_sets {
        if entries.is_empty() {
            return Err(CliError::Data(format!(
                "no {} eval scenes in the manifest; ablation needs every condition",
                c.as_str()
            )));
        }
    }

    let mut variants = Vec::with_capacity(ABLATION_VARIANTS.len());
    for spec in ABLATION_VARIANTS {
        let model_cfg =
            cfg.model
                .to_core()
                .with_toggles(spec.split_stems, spec.use_gas, spec.use_rdc);
        let mut rows = VariantRows {
            name: spec.name,
            split_stems: spec.split_stems,
            use_gas: spec.use_gas,
            use_rdc: spec.use_rdc,
            seeds: Vec::new(),
        };
        for &seed in &cfg.seeds.ablate {
            let mut model = Model::<F>::init(model_cfg.clone(), seed)?;
            let mut train_cfg = cfg.train_core();
            train_cfg.master_seed = seed;
            train(&mut model, &samples, &train_cfg)?;

            let mut miou = Vec::with_capacity(Condition::ALL.len());
            for (_, entries) in &eval_sets {
                let cm = eval_entries(&model, &stats, &proj, data_dir, entries)?;
                miou.push(cm.mean_iou());
            }
            ui.say(format!(
                "{:<10} seed {seed}: clean {} corrupt-avg {}",
                spec.name,
                fmt_opt(miou[0]),
                fmt_opt(avg3(&miou[1..4])),
            ));
            rows.seeds.push(SeedRow { seed, miou });
        }
        variants.push(rows);
    }

    let flags = monotonic_flags(&variants);
    for line in &flags {
        ui.say(line);
    }

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_files(out_dir, &variants, &flags)?;
    ui.say(format!(
        "wrote ablation.csv, ablation_seeds.csv, ablation_summary.txt to {}",
        out_dir.display()
    ));
    Ok(AblationTable { variants, flags })
}

fn avg3(vals: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = vals.iter().flatten().copied().collect();
    if present.len() == vals.len() {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    } else {
        None
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// Full model vs every reduced variant on the corrupted average.
fn monotonic_flags(variants: &[VariantRows]) -> Vec<String> {
    let Some(full) = variants.iter().find(|v| v.name == "full") else {
        return vec!["flag corrupt-avg: no full variant trained".into()];
    };
    let Some(full_avg) = full.corrupt_avg() else {
        return vec!["flag corrupt-avg: full variant scored no class".into()];
    };
    variants
        .iter()
        .filter(|v| v.name != "full")
        .map(|v| match v.corrupt_avg() {
            Some(avg) if full_avg >= avg => format!(
                "flag corrupt-avg: full ({full_avg:.4}) >= {} ({avg:.4}): ok",
                v.name
            ),
            Some(avg) => format!(
                "flag corrupt-avg: full ({full_avg:.4}) < {} ({avg:.4}): VIOLATED",
                v.name
            ),
            None => format!("flag corrupt-avg: {} scored no class: VIOLATED", v.name),
        })
        .collect()
}

fn write_files(
    out_dir: &Path,
    variants: &[VariantRows],
    flags: &[String],
) -> Result<(), CliError> {
    let mut csv = String::from("variant,split_stems,use_gas,use_rdc,clean,fog,rain,snow,corrupt_avg\n");
    for v in variants {
        let _ = write!(csv, "{},{},{},{}", v.name, v.split_stems, v.use_gas, v.use_rdc);
        for condition in Condition::ALL {
            let _ = write!(csv, ",{}", csv_opt(v.mean_for(condition)));
        }
        let _ = writeln!(csv, ",{}", csv_opt(v.corrupt_avg()));
    }
    let path = out_dir.join("ablation.csv");
    fs::write(&path, &csv).map_err(|e| io_err(&path, e))?;

    let mut seeds_csv = String::from("variant,seed,condition,miou\n");
    for v in variants {
        for s in &v.seeds {
            for (at, condition) in Condition::ALL.into_iter().enumerate() {
                let _ = writeln!(
                    seeds_csv,
                    "{},{},{},{}",
                    v.name,
                    s.seed,
                    condition.as_str(),
                    csv_opt(s.miou[at])
                );
            }
        }
    }
    let path = out_dir.join("ablation_seeds.csv");
    fs::write(&path, seeds_csv).map_err(|e| io_err(&path, e))?;

    let mut summary = csv;
    summary.push('\n');
    for line in flags {
        summary.push_str(line);
        summary.push('\n');
    }
    let path = out_dir.join("ablation_summary.txt");
    fs::write(&path, summary).map_err(|e| io_err(&path, e))
}

fn csv_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}
