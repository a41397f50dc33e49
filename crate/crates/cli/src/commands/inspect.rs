//! `inspect`: qualitative views into a checkpoint on one scan.
//!
//! Writes the abnormality weight map and the memory attention argmax as
//! grayscale images (when the respective module is active) and a CSV of
//! per-tensor statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rvseg_core::projection::{make_input_planes, project, Condition};
use rvseg_core::real::Real;

use crate::commands::Ui;
use crate::config::Precision;
use crate::error::{io_err, CliError};
use crate::formats::{
    instantiate_model, label_path_of, read_checkpoint, read_scan, role_name, write_gray_png,
    RawCheckpoint,
};
use crate::pipeline::cast_tensor;

pub fn run(checkpoint: &Path, scan: &Path, out_dir: &Path, ui: Ui) -> Result<(), CliError> {
    let raw = read_checkpoint(checkpoint)?;
    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    write_layer_stats(&raw, out_dir)?;
    ui.say(format!("layer stats: {}", out_dir.join("layers.csv").display()));

    match raw.header.model.precision {
        Precision::F32 => run_typed::<f32>(&raw, scan, out_dir, ui),
        Precision::F64 => run_typed::<f64>(&raw, scan, out_dir, ui),
    }
}

fn run_typed<F: Real>(
    raw: &RawCheckpoint,
    scan: &Path,
    out_dir: &Path,
    ui: Ui,
) -> Result<(), CliError> {
    let (model, stats) = instantiate_model::<F>(raw)?;
    let proj = raw.header.projection.to_core();

    let label = label_path_of(scan);
    let label = label.exists().then_some(label);
    let cloud = read_scan(scan, label.as_deref(), Condition::Clean)?;
    let image = project(&cloud, &proj)?;
    let planes = cast_tensor::<F>(&make_input_planes(&image, &stats));

    let out = model.forward_inspect(&planes, &image.valid)?;

    match &out.w_plus {
        Some(map) => {
            let pixels: Vec<u8> = map
                .channel(0)
                .iter()
                .map(|v| (255.0 * v.as_f64().clamp(0.0, 1.0)).round() as u8)
                .collect();
            write_gray_png(&out_dir.join("wplus.png"), proj.width, proj.height, &pixels)?;
            ui.say(format!("weight map: {}", out_dir.join("wplus.png").display()));
        }
        None => ui.say("no abnormality weighting in this model, skipping wplus.png"),
    }

    match &out.attention {
        Some(att) => {
            let (t, h, w) = att.shape();
            let mut pixels = vec![0u8; h * w];
            for p in 0..h * w {
                let mut best = 0usize;
                let mut best_v = att.channel(0)[p];
                for r in 1..t {
                    let v = att.channel(r)[p];
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                pixels[p] = if t > 1 {
                    (best * 255 / (t - 1)) as u8
                } else {
                    0
                };
            }
            write_gray_png(&out_dir.join("memory.png"), w, h, &pixels)?;
            ui.say(format!(
                "memory argmax over {t} rows: {}",
                out_dir.join("memory.png").display()
            ));
        }
        None => ui.say("no memory retrieval in this model, skipping memory.png"),
    }
    Ok(())
}

fn write_layer_stats(raw: &RawCheckpoint, out_dir: &Path) -> Result<(), CliError> {
    let mut csv = String::from("name,role,len,mean,std,min,max\n");
    for t in &raw.tensors {
        let n = t.data.len().max(1) as f64;
        let mean = t.data.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = t
            .data
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n;
        let min = t.data.iter().copied().fold(f32::INFINITY, f32::min);
        let max = t.data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let _ = writeln!(
            csv,
            "{},{},{},{mean:.6},{:.6},{min:.6},{max:.6}",
            t.name,
            role_name(t.role),
            t.data.len(),
            var.sqrt(),
        );
    }
    let path = out_dir.join("layers.csv");
    fs::write(&path, csv).map_err(|e| io_err(&path, e))
}
