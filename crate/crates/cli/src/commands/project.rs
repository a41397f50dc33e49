//! `project`: project one scan and dump the range image as grayscale
//! depth/intensity PNGs plus the raw plane file.

use std::fs;
use std::path::Path;

use rvseg_core::projection::{project, Condition};

use crate::commands::Ui;
use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::formats::{gray_of_channel, label_path_of, read_scan, write_gray_png, write_planes_f32};

/// Depth and intensity plane indices.
const DEPTH: usize = 3;
const INTENSITY: usize = 4;

pub fn run(cfg: &RunConfig, scan: &Path, out_dir: &Path, ui: Ui) -> Result<(), CliError> {
    let label = label_path_of(scan);
    let label = label.exists().then_some(label);
    let cloud = read_scan(scan, label.as_deref(), Condition::Clean)?;

    let proj = cfg.projection.to_core();
    let image = project(&cloud, &proj)?;

    fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;
    let valid = image.valid.as_slice();
    write_gray_png(
        &out_dir.join("depth.png"),
        proj.width,
        proj.height,
        &gray_of_channel(image.planes.channel(DEPTH), valid),
    )?;
    write_gray_png(
        &out_dir.join("intensity.png"),
        proj.width,
        proj.height,
        &gray_of_channel(image.planes.channel(INTENSITY), valid),
    )?;
    let planes_path = write_planes_f32(out_dir, &image.planes)?;

    let filled = valid.iter().filter(|&&v| v).count();
    ui.say(format!(
        "{} points -> {}x{} image, {} pixels filled ({} zero-range, {} out of view)",
        cloud.points.len(),
        proj.height,
        proj.width,
        filled,
        image.dropped.zero_range,
        image.dropped.out_of_fov,
    ));
    ui.say(format!(
        "wrote depth.png, intensity.png, {}",
        planes_path.display()
    ));
    Ok(())
}
