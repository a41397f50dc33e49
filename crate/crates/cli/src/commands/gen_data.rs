//! `gen-data`: write a synthetic dataset under the output directory.
//!
//! The training split is clean-condition only. The eval split shares base
//! scene geometry across conditions: eval scene `i` is generated once and
//! corrupted per condition, so condition columns compare like against like.

use std::fs;
use std::path::Path;

use rvseg_core::projection::Condition;
use rvseg_core::weather::{corrupt, generate_scene};

use crate::commands::Ui;
use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::formats::{write_scan, Manifest, ScanEntry};
use crate::pipeline::derive_seed;

pub fn run(cfg: &RunConfig, out_dir: &Path, ui: Ui) -> Result<(), CliError> {
    let mut manifest = Manifest::default();

    let train_dir = out_dir.join("train");
    fs::create_dir_all(&train_dir).map_err(|e| io_err(&train_dir, e))?;
    for i in 0..cfg.scene.train_count {
        let seed = derive_seed(cfg.seeds.data, "gen.train", &[i as u64]);
        let scene = cfg.scene.to_core(seed, &cfg.projection);
        let cloud = generate_scene(&scene)?;
        let stem = format!("{i:04}");
        write_scan(&train_dir, &stem, &cloud)?;
        manifest.train.push(ScanEntry {
            file: format!("train/{stem}.bin"),
            seed,
            condition: Condition::Clean.as_str().to_owned(),
            points: cloud.points.len(),
        });
    }
    ui.say(format!(
        "wrote {} clean training scenes to {}",
        cfg.scene.train_count,
        train_dir.display()
    ));

    for condition in Condition::ALL {
        let dir = out_dir.join("eval").join(condition.as_str());
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    }
    for i in 0..cfg.scene.eval_count {
        let base_seed = derive_seed(cfg.seeds.data, "gen.eval", &[i as u64]);
        let scene = cfg.scene.to_core(base_seed, &cfg.projection);
        let clean = generate_scene(&scene)?;
        for (ci, condition) in Condition::ALL.into_iter().enumerate() {
            let (cloud, seed) = if condition == Condition::Clean {
                (clean.clone(), base_seed)
            } else {
                let wseed = derive_seed(cfg.seeds.data, "gen.weather", &[ci as u64, i as u64]);
                let weather = cfg.weather.to_core(condition, wseed);
                (corrupt(&clean, &weather)?, wseed)
            };
            let dir = out_dir.join("eval").join(condition.as_str());
            let stem = format!("{i:04}");
            write_scan(&dir, &stem, &cloud)?;
            manifest.eval.push(ScanEntry {
                file: format!("eval/{}/{stem}.bin", condition.as_str()),
                seed,
                condition: condition.as_str().to_owned(),
                points: cloud.points.len(),
            });
        }
    }
    ui.say(format!(
        "wrote {} eval scenes per condition (clean, fog, rain, snow)",
        cfg.scene.eval_count
    ));

    manifest.write(out_dir)?;
    ui.say(format!("manifest: {}", out_dir.join("manifest.json").display()));
    Ok(())
}
