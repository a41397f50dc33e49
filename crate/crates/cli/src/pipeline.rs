//! Dataset plumbing between files and the engine: load scans, project,
//! standardize, train, and score.

use std::path::Path;

use rvseg_core::classes;
use rvseg_core::metrics::ConfusionMatrix;
use rvseg_core::net::{Model, TrainSample};
use rvseg_core::projection::{
    backproject_labels, make_input_planes, project, PlaneStats, PlaneStatsAccumulator,
    ProjectionConfig, RangeImage,
};
use rvseg_core::real::{real, Real};
use rvseg_core::tensor::Tensor;

use crate::error::CliError;
use crate::formats::{label_path_of, read_scan, Manifest, ScanEntry};

pub fn cast_tensor<F: Real>(t: &Tensor<f32>) -> Tensor<F> {
    let (c, h, w) = t.shape();
    let mut out = Tensor::<F>::zeros(c, h, w);
    for (dst, &src) in out.data_mut().iter_mut().zip(t.data()) {
        *dst = real::<F>(f64::from(src));
    }
    out
}

pub fn load_entry(data_dir: &Path, entry: &ScanEntry) -> Result<rvseg_core::projection::PointCloud, CliError> {
    let bin = data_dir.join(&entry.file);
    let label = label_path_of(&bin);
    let mut cloud = read_scan(&bin, Some(&label), entry.condition()?)?;
    if cloud.points.len() != entry.points {
        return Err(CliError::Data(format!(
            "{}: manifest lists {} points, file holds {}",
            bin.display(),
            entry.points,
            cloud.points.len()
        )));
    }
    cloud.condition = entry.condition()?;
    Ok(cloud)
}

/// The protocol guard: training data must be purely clean-condition.
pub fn require_clean_train(manifest: &Manifest) -> Result<(), CliError> {
    if manifest.train.is_empty() {
        return Err(CliError::Data("manifest lists no training scenes".into()));
    }
    for entry in &manifest.train {
        if entry.condition()? != rvseg_core::projection::Condition::Clean {
            return Err(CliError::Data(format!(
                "training scene {} is condition {:?}; training runs on clean data only",
                entry.file, entry.condition
            )));
        }
    }
    Ok(())
}

/// Project every training scan, freeze standardization statistics over the
/// split, then build standardized samples with those statistics.
pub fn build_train_set<F: Real>(
    data_dir: &Path,
    manifest: &Manifest,
    proj: &ProjectionConfig,
) -> Result<(Vec<TrainSample<F>>, PlaneStats), CliError> {
    let mut images = Vec::with_capacity(manifest.train.len());
    let mut acc = PlaneStatsAccumulator::default();
    for entry in &manifest.train {
        let cloud = load_entry(data_dir, entry)?;
        if cloud.labels.is_none() {
            return Err(CliError::Data(format!("{}: no labels", entry.file)));
        }
        let image = project(&cloud, proj)?;
        acc.add(&image);
        images.push((entry.file.clone(), image));
    }
    let stats = acc
        .finish()
        .map_err(|e| CliError::Data(format!("training split: {e}")))?;

    let mut samples = Vec::with_capacity(images.len());
    for (file, image) in images {
        samples.push(sample_of::<F>(&image, &stats).ok_or_else(|| {
            CliError::Data(format!("{file}: projected image carries no labels"))
        })?);
    }
    Ok((samples, stats))
}

fn sample_of<F: Real>(image: &RangeImage, stats: &PlaneStats) -> Option<TrainSample<F>> {
    let planes = make_input_planes(image, stats);
    Some(TrainSample {
        planes: cast_tensor::<F>(&planes),
        valid: image.valid.clone(),
        labels: image.labels.clone()?,
    })
}

/// Score one condition's scans: project, predict, back-project onto the
/// points, and accumulate against the per-point ground truth.
pub fn eval_entries<F: Real>(
    model: &Model<F>,
    stats: &PlaneStats,
    proj: &ProjectionConfig,
    data_dir: &Path,
    entries: &[&ScanEntry],
) -> Result<ConfusionMatrix, CliError> {
    let mut cm = ConfusionMatrix::new(classes::NUM_TOTAL, classes::IGNORE);
    for entry in entries {
        let cloud = load_entry(data_dir, entry)?;
        let gt = cloud
            .labels
            .clone()
            .ok_or_else(|| CliError::Data(format!("{}: no labels", entry.file)))?;
        let image = project(&cloud, proj)?;
        let planes = cast_tensor::<F>(&make_input_planes(&image, stats));
        let pred_img = model.predict(&planes, &image.valid)?;
        let pred = backproject_labels(&pred_img, &image, classes::IGNORE);
        cm.accumulate(&gt, &pred)
            .map_err(|e| CliError::Data(format!("{}: {e}", entry.file)))?;
    }
    Ok(cm)
}

/// Derive one child seed from a named stream, so every scene and weather
/// draw is reproducible from the config's data seed alone.
pub fn derive_seed(root: u64, name: &str, ids: &[u64]) -> u64 {
    rvseg_core::rng::derive(root, name, ids)
}
