//! On-disk formats: scan containers, dataset manifest, checkpoints, and
//! report files.
//!
//! Scans mirror the KITTI layout so existing tooling can open them: a
//! `.bin` file of little-endian f32 quadruples `x, y, z, intensity` and a
//! sibling `.label` file of little-endian u32 values whose low 16 bits
//! carry the class id (the high bits, an instance id in KITTI, are written
//! as zero and ignored on read).
//!
//! Checkpoint container, byte-exact:
//!
//! ```text
//! offset        size        field
//! 0             4           magic "RVSG"
//! 4             4           format version, u32 LE (currently 1)
//! 8             4           header length N, u32 LE
//! 12            N           header, UTF-8 JSON (projection + model config,
//!                           frozen input stats, training metadata)
//! 12+N          4           tensor count, u32 LE
//! ...                       tensors, in the model's fixed visit order:
//!                             name length  u16 LE
//!                             name         UTF-8
//!                             role tag     u8 (0 weight, 1 bias, 2 memory)
//!                             rank         u8
//!                             dims         u32 LE each
//!                             payload      f32 LE, product-of-dims values
//! end-4         4           CRC-32 (IEEE) over all preceding bytes, u32 LE
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rvseg_core::classes;
use rvseg_core::metrics::ConfusionMatrix;
use rvseg_core::net::{EpochLoss, Model};
use rvseg_core::projection::{Condition, PlaneStats, Point, PointCloud};
use rvseg_core::real::{real, Real};
use rvseg_core::tensor::{ChannelStats, ParamRole, Tensor};

use crate::config::{ModelSection, ProjectionSection};
use crate::error::{io_err, CliError};

// ---------------------------------------------------------------------------
// Scan container

#[derive(Debug, thiserror::Error)]
pub enum ScanError {
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: io::Error },
    #[error("{path}: {len} bytes is not a whole number of x,y,z,intensity quadruples")]
    RaggedPoints { path: PathBuf, len: usize },
    #[error("{path}: {len} bytes is not a whole number of u32 labels")]
    RaggedLabels { path: PathBuf, len: usize },
    #[error("{path}: {labels} labels for {points} points")]
    LabelCount {
        path: PathBuf,
        labels: usize,
        points: usize,
    },
}

fn scan_io(path: &Path) -> impl FnOnce(io::Error) -> ScanError + '_ {
    move |err| ScanError::Io {
        path: path.to_path_buf(),
        err,
    }
}

/// Write `<stem>.bin` and, when the cloud has labels, `<stem>.label`.
pub fn write_scan(dir: &Path, stem: &str, cloud: &PointCloud) -> Result<PathBuf, ScanError> {
    let bin_path = dir.join(format!("{stem}.bin"));
    let mut bytes = Vec::with_capacity(cloud.points.len() * 16);
    for p in &cloud.points {
        bytes.extend_from_slice(&p.x.to_le_bytes());
        bytes.extend_from_slice(&p.y.to_le_bytes());
        bytes.extend_from_slice(&p.z.to_le_bytes());
        bytes.extend_from_slice(&p.intensity.to_le_bytes());
    }
    fs::write(&bin_path, bytes).map_err(scan_io(&bin_path))?;

    if let Some(labels) = &cloud.labels {
        let label_path = dir.join(format!("{stem}.label"));
        let mut bytes = Vec::with_capacity(labels.len() * 4);
        for &l in labels {
            bytes.extend_from_slice(&u32::from(l).to_le_bytes());
        }
        fs::write(&label_path, bytes).map_err(scan_io(&label_path))?;
    }
    Ok(bin_path)
}

/// Read a scan; `label_path = None` yields an unlabeled cloud.
pub fn read_scan(
    bin_path: &Path,
    label_path: Option<&Path>,
    condition: Condition,
) -> Result<PointCloud, ScanError> {
    let bytes = fs::read(bin_path).map_err(scan_io(bin_path))?;
    if bytes.len() % 16 != 0 {
        return Err(ScanError::RaggedPoints {
            path: bin_path.to_path_buf(),
            len: bytes.len(),
        });
    }
    let points: Vec<Point> = bytes
        .chunks_exact(16)
        .map(|q| {
            let f = |at: usize| f32::from_le_bytes(q[at..at + 4].try_into().unwrap());
            Point {
                x: f(0),
                y: f(4),
                z: f(8),
                intensity: f(12),
            }
        })
        .collect();

    let labels = match label_path {
        None => None,
        Some(path) => {
            let bytes = fs::read(path).map_err(scan_io(path))?;
            if bytes.len() % 4 != 0 {
                return Err(ScanError::RaggedLabels {
                    path: path.to_path_buf(),
                    len: bytes.len(),
                });
            }
            let labels: Vec<u16> = bytes
                .chunks_exact(4)
                .map(|q| (u32::from_le_bytes(q.try_into().unwrap()) & 0xffff) as u16)
                .collect();
            if labels.len() != points.len() {
                return Err(ScanError::LabelCount {
                    path: path.to_path_buf(),
                    labels: labels.len(),
                    points: points.len(),
                });
            }
            Some(labels)
        }
    };

    Ok(PointCloud {
        points,
        labels,
        condition,
    })
}

/// The `.label` sibling of a `.bin` path.
pub fn label_path_of(bin_path: &Path) -> PathBuf {
    bin_path.with_extension("label")
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    /// Path of the `.bin` file, relative to the dataset root.
    pub file: String,
    /// Seed the scene (and, for corrupted scans, the weather) ran with.
    pub seed: u64,
    pub condition: String,
    /// Points in the file.
    pub points: usize,
}

impl ScanEntry {
    pub fn condition(&self) -> Result<Condition, CliError> {
        self.condition.parse().map_err(CliError::data)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub train: Vec<ScanEntry>,
    pub eval: Vec<ScanEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn write(&self, data_dir: &Path) -> Result<(), CliError> {
        let path = data_dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn read(data_dir: &Path) -> Result<Self, CliError> {
        let path = data_dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }

    pub fn eval_for(&self, condition: Condition) -> Vec<&ScanEntry> {
        self.eval
            .iter()
            .filter(|e| e.condition == condition.as_str())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Checkpoint

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RVSG";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_NAME: &str = "checkpoint.rvsg";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {err}")]
    Io { path: PathBuf, err: io::Error },
    #[error("file ends after {at} bytes, {need} more needed for {what}")]
    Truncated {
        at: usize,
        need: usize,
        what: &'static str,
    },
    #[error("bad magic {found:02x?}, not a checkpoint")]
    BadMagic { found: [u8; 4] },
    #[error("format version {found}, this build reads {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("header: {0}")]
    Header(serde_json::Error),
    #[error("tensor {index} is {found:?}, model expects {expected:?}")]
    TensorName {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("tensor {name:?}: stored shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name:?}: stored role {found}, model expects {expected}")]
    RoleMismatch {
        name: String,
        expected: u8,
        found: u8,
    },
    #[error("{found} tensors stored, model expects {expected}")]
    TensorCount { expected: usize, found: usize },
    #[error("tensor name at index {index} is not UTF-8")]
    BadName { index: usize },
    #[error("stats carry {found} channels, expected {expected}")]
    BadStats { expected: usize, found: usize },
    #[error("{extra} unexpected bytes after the last tensor")]
    TrailingBytes { extra: usize },
    #[error("stored config rejected: {0}")]
    BadModel(String),
}

/// Everything stored besides the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// Projection the model was trained against; evaluation reuses it so a
    /// checkpoint is self-describing.
    pub projection: ProjectionSection,
    pub model: ModelSection,
    /// Frozen per-plane standardization statistics from the training split.
    pub stats: StatsRepr,
    pub meta: TrainMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRepr {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl StatsRepr {
    pub fn from_core(stats: &PlaneStats) -> Self {
        StatsRepr {
            mean: stats.stats.mean.clone(),
            std: stats.stats.std.clone(),
        }
    }

    pub fn to_core(&self) -> Result<PlaneStats, CheckpointError> {
        let planes = rvseg_core::projection::NUM_PLANES;
        if self.mean.len() != planes || self.std.len() != planes {
            return Err(CheckpointError::BadStats {
                expected: planes,
                found: self.mean.len().min(self.std.len()),
            });
        }
        Ok(PlaneStats {
            stats: ChannelStats {
                mean: self.mean.clone(),
                std: self.std.clone(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub master_seed: u64,
    pub optimizer_steps: usize,
    /// Mean per-image losses, one row per epoch.
    pub loss_history: Vec<LossRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub total: f64,
    pub seg: f64,
    pub gas: f64,
    pub rdc: f64,
}

impl From<&EpochLoss> for LossRow {
    fn from(e: &EpochLoss) -> Self {
        LossRow {
            total: e.total,
            seg: e.seg,
            gas: e.gas,
            rdc: e.rdc,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RawTensor {
    pub name: String,
    pub role: u8,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct RawCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<RawTensor>,
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &Model<F>,
    header: &CheckpointHeader,
) -> Result<(), CheckpointError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

    let header_json = serde_json::to_vec(header).map_err(CheckpointError::Header)?;
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);

    let mut count = 0u32;
    model.params.visit(&mut |_, _| count += 1);
    bytes.extend_from_slice(&count.to_le_bytes());

    model.params.visit(&mut |name, p| {
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.push(p.role().tag());
        bytes.push(p.shape().len() as u8);
        for &d in p.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    });

    let crc = crc32fast::hash(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());

    fs::write(path, bytes).map_err(|err| CheckpointError::Io {
        path: path.to_path_buf(),
        err,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                at: self.bytes.len(),
                need: self.at + n - self.bytes.len(),
                what,
            });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }
}

pub fn read_checkpoint(path: &Path) -> Result<RawCheckpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|err| CheckpointError::Io {
        path: path.to_path_buf(),
        err,
    })?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<RawCheckpoint, CheckpointError> {
    let mut cur = Cursor { bytes, at: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: magic.try_into().unwrap(),
        });
    }
    let version = cur.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }

    // Validate the checksum before trusting any length field further in.
    if bytes.len() < cur.at + 4 {
        return Err(CheckpointError::Truncated {
            at: bytes.len(),
            need: cur.at + 4 - bytes.len(),
            what: "checksum",
        });
    }
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..bytes.len() - 4]);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let body_end = bytes.len() - 4;

    let header_len = cur.u32("header length")? as usize;
    let header_bytes = cur.take(header_len, "header")?;
    let header: CheckpointHeader =
        serde_json::from_slice(header_bytes).map_err(CheckpointError::Header)?;

    let count = cur.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for index in 0..count {
        let name_len = cur.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(cur.take(name_len, "tensor name")?)
            .map_err(|_| CheckpointError::BadName { index })?
            .to_owned();
        let role = cur.u8("tensor role")?;
        let rank = cur.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32("tensor dims")? as usize);
        }
        let len: usize = dims.iter().product();
        let payload = cur.take(len * 4, "tensor payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|q| f32::from_le_bytes(q.try_into().unwrap()))
            .collect();
        tensors.push(RawTensor {
            name,
            role,
            dims,
            data,
        });
    }
    if cur.at > body_end {
        // The last payload ran into the checksum bytes.
        return Err(CheckpointError::Truncated {
            at: body_end,
            need: cur.at - body_end,
            what: "tensor payload",
        });
    }
    if cur.at < body_end {
        return Err(CheckpointError::TrailingBytes {
            extra: body_end - cur.at,
        });
    }

    Ok(RawCheckpoint { header, tensors })
}

/// Build a typed model from a parsed checkpoint, validating every tensor's
/// name, role, and shape against what the stored config implies.
pub fn instantiate_model<F: Real>(
    raw: &RawCheckpoint,
) -> Result<(Model<F>, PlaneStats), CheckpointError> {
    let cfg = raw.header.model.to_core();
    // Seed is irrelevant: every value is overwritten below.
    let mut model =
        Model::<F>::init(cfg, 0).map_err(|e| CheckpointError::BadModel(e.to_string()))?;

    let mut expected = 0usize;
    model.params.visit(&mut |_, _| expected += 1);
    if raw.tensors.len() != expected {
        return Err(CheckpointError::TensorCount {
            expected,
            found: raw.tensors.len(),
        });
    }

    let mut index = 0usize;
    let mut first_err: Option<CheckpointError> = None;
    model.params.visit_mut(&mut |name, p| {
        if first_err.is_some() {
            return;
        }
        let t = &raw.tensors[index];
        index += 1;
        if t.name != name {
            first_err = Some(CheckpointError::TensorName {
                index: index - 1,
                expected: name.to_owned(),
                found: t.name.clone(),
            });
            return;
        }
        if t.dims != p.shape() {
            first_err = Some(CheckpointError::ShapeMismatch {
                name: t.name.clone(),
                expected: p.shape().to_vec(),
                found: t.dims.clone(),
            });
            return;
        }
        if t.role != p.role().tag() {
            first_err = Some(CheckpointError::RoleMismatch {
                name: t.name.clone(),
                expected: p.role().tag(),
                found: t.role,
            });
            return;
        }
        for (dst, &src) in p.value_mut().iter_mut().zip(&t.data) {
            *dst = real::<F>(f64::from(src));
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }

    let stats = raw.header.stats.to_core()?;
    Ok((model, stats))
}

/// Readable tag for the stored role byte, for the layer-stats dump.
pub fn role_name(tag: u8) -> &'static str {
    match ParamRole::from_tag(tag) {
        Some(ParamRole::Weight) => "weight",
        Some(ParamRole::Bias) => "bias",
        Some(ParamRole::Memory) => "memory",
        None => "unknown",
    }
}

// ---------------------------------------------------------------------------
// Reports

/// Per-condition evaluation result, ready for serialization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionRow {
    pub condition: String,
    pub miou: Option<f64>,
    /// Class name to IoU; `None` marks an empty union.
    pub iou: BTreeMap<String, Option<f64>>,
    /// Points scored into the matrix.
    pub points: u64,
    /// Points skipped for carrying the ignore label.
    pub ignored: u64,
}

impl ConditionRow {
    pub fn from_matrix(condition: Condition, cm: &ConfusionMatrix) -> Self {
        let per_class = cm.iou();
        let mut iou = BTreeMap::new();
        for (id, v) in per_class.iter().enumerate() {
            if id == usize::from(cm.ignore_id()) {
                continue;
            }
            iou.insert(classes::name(id as u16).to_owned(), *v);
        }
        ConditionRow {
            condition: condition.as_str().to_owned(),
            miou: cm.mean_iou(),
            iou,
            points: cm.total(),
            ignored: cm.ignored,
        }
    }
}

/// `report.csv` (header `condition,class,iou`; one `mean` row per
/// condition; empty iou field for classes with an empty union) and
/// `report.json` next to it.
pub fn write_report(dir: &Path, rows: &[ConditionRow]) -> Result<(), CliError> {
    let mut csv = String::from("condition,class,iou\n");
    for row in rows {
        for (class, iou) in &row.iou {
            match iou {
                Some(v) => {
                    let _ = writeln!(csv, "{},{},{v:.6}", row.condition, class);
                }
                None => {
                    let _ = writeln!(csv, "{},{},", row.condition, class);
                }
            }
        }
        match row.miou {
            Some(v) => {
                let _ = writeln!(csv, "{},mean,{v:.6}", row.condition);
            }
            None => {
                let _ = writeln!(csv, "{},mean,", row.condition);
            }
        }
    }
    let csv_path = dir.join("report.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;

    let json_path = dir.join("report.json");
    let json = serde_json::json!({ "conditions": rows });
    fs::write(&json_path, serde_json::to_string_pretty(&json).expect("report serializes"))
        .map_err(|e| io_err(&json_path, e))
}

/// Read back `report.json` from an eval output directory.
pub fn read_report(dir: &Path) -> Result<Vec<ConditionRow>, CliError> {
    #[derive(Deserialize)]
    struct Doc {
        conditions: Vec<ConditionRow>,
    }
    let path = dir.join("report.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let doc: Doc = serde_json::from_str(&text)
        .map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    Ok(doc.conditions)
}

/// `loss.csv`: one row per epoch of mean per-image losses.
pub fn write_loss_csv(path: &Path, losses: &[EpochLoss]) -> Result<(), CliError> {
    let mut csv = String::from("epoch,total,seg,gas,rdc\n");
    for (i, e) in losses.iter().enumerate() {
        let _ = writeln!(csv, "{i},{:.6},{:.6},{:.6},{:.6}", e.total, e.seg, e.gas, e.rdc);
    }
    fs::write(path, csv).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Images and raw dumps

/// 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), CliError> {
    assert_eq!(pixels.len(), width * height, "pixel count mismatch");
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut enc = png::Encoder::new(io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(pixels)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Map a channel to 0..255 gray, zero where invalid, scaled by the maximum
/// over valid pixels.
pub fn gray_of_channel(values: &[f32], valid: &[bool]) -> Vec<u8> {
    let max = values
        .iter()
        .zip(valid)
        .filter(|&(_, &keep)| keep)
        .map(|(&v, _)| v)
        .fold(0.0f32, f32::max);
    values
        .iter()
        .zip(valid)
        .map(|(&v, &keep)| {
            if !keep || max <= 0.0 {
                0
            } else {
                (255.0 * (v / max).clamp(0.0, 1.0)).round() as u8
            }
        })
        .collect()
}

/// Raw little-endian f32 dump of all planes, row-major per channel; the
/// shape travels in the filename convention `planes_{C}x{H}x{W}.f32`.
pub fn write_planes_f32(dir: &Path, planes: &Tensor<f32>) -> Result<PathBuf, CliError> {
    let (c, h, w) = planes.shape();
    let path = dir.join(format!("planes_{c}x{h}x{w}.f32"));
    let mut bytes = Vec::with_capacity(c * h * w * 4);
    for &v in planes.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

impl From<ScanError> for CliError {
    fn from(e: ScanError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}
