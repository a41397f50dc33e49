//! Declarative run configuration (TOML).
//!
//! Every field has a default, so an empty document is a valid, runnable
//! configuration; unknown keys are rejected so typos fail loudly instead of
//! silently falling back to defaults. Each section converts into the
//! corresponding engine config, which re-validates the values.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use rvseg_core::gas::GasConfig;
use rvseg_core::net::{ModelConfig, TrainConfig};
use rvseg_core::rdc::RdcConfig;
use rvseg_core::projection::{Condition, ProjectionConfig};
use rvseg_core::weather::{SceneConfig, WeatherConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Where commands put their artifacts unless `--out` overrides it.
    pub output_dir: PathBuf,
    pub projection: ProjectionSection,
    pub scene: SceneSection,
    pub weather: WeatherSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub seeds: SeedsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("out"),
            projection: ProjectionSection::default(),
            scene: SceneSection::default(),
            weather: WeatherSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
            seeds: SeedsSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Run every section through the engine-side validators.
    pub fn validate(&self) -> Result<(), CliError> {
        self.projection.to_core().validate()?;
        self.scene.to_core(0, &self.projection).validate()?;
        for condition in Condition::ALL {
            self.weather.to_core(condition, 0).validate()?;
        }
        self.model.to_core().validate()?;
        self.train_core().validate()?;
        self.eval.conditions()?;
        if self.seeds.ablate.is_empty() {
            return Err(CliError::Config(
                "seeds.ablate must list at least one seed".into(),
            ));
        }
        Ok(())
    }

    pub fn train_core(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            peak_lr: self.train.peak_lr,
            weight_decay: self.train.weight_decay,
            master_seed: self.seeds.master,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub width: usize,
    pub height: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        let p = ProjectionConfig::default();
        ProjectionSection {
            width: p.width,
            height: p.height,
            fov_up_deg: p.fov_up_deg,
            fov_down_deg: p.fov_down_deg,
        }
    }
}

impl ProjectionSection {
    pub fn to_core(&self) -> ProjectionConfig {
        ProjectionConfig {
            width: self.width,
            height: self.height,
            fov_up_deg: self.fov_up_deg,
            fov_down_deg: self.fov_down_deg,
            ignore_label: rvseg_core::classes::IGNORE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSection {
    /// Clean training scenes `gen-data` writes.
    pub train_count: usize,
    /// Eval scenes per condition; the same base scene index is shared
    /// across conditions so comparisons are paired.
    pub eval_count: usize,
    pub rings: usize,
    pub azimuth_steps: usize,
    pub angular_jitter: f64,
    pub sensor_height: f64,
    pub include_ground: bool,
    pub max_range: f64,
    pub num_vehicles: usize,
    pub num_poles: usize,
    pub num_buildings: usize,
    pub reflectance_jitter: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let s = SceneConfig::default();
        SceneSection {
            train_count: 64,
            eval_count: 16,
            rings: s.rings,
            azimuth_steps: s.azimuth_steps,
            angular_jitter: s.angular_jitter,
            sensor_height: s.sensor_height,
            include_ground: s.include_ground,
            max_range: s.max_range,
            num_vehicles: s.num_vehicles,
            num_poles: s.num_poles,
            num_buildings: s.num_buildings,
            reflectance_jitter: s.reflectance_jitter,
        }
    }
}

impl SceneSection {
    /// The scene lattice inherits the projection's field of view so the
    /// generated rays and the image grid agree.
    pub fn to_core(&self, seed: u64, proj: &ProjectionSection) -> SceneConfig {
        SceneConfig {
            seed,
            rings: self.rings,
            azimuth_steps: self.azimuth_steps,
            fov_up_deg: proj.fov_up_deg,
            fov_down_deg: proj.fov_down_deg,
            angular_jitter: self.angular_jitter,
            sensor_height: self.sensor_height,
            include_ground: self.include_ground,
            max_range: self.max_range,
            num_vehicles: self.num_vehicles,
            num_poles: self.num_poles,
            num_buildings: self.num_buildings,
            reflectance_jitter: self.reflectance_jitter,
            ..SceneConfig::default()
        }
    }
}

/// Per-condition overrides on top of the built-in weather presets; a field
/// left unset keeps the preset value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherOverride {
    pub scatter_rate: Option<f64>,
    pub scatter_range_scale: Option<f64>,
    pub scatter_intensity_max: Option<f64>,
    pub attenuation: Option<[f64; 2]>,
    pub max_range: Option<f64>,
    pub dropout_prob: Option<f64>,
}

impl WeatherOverride {
    fn apply(&self, mut w: WeatherConfig) -> WeatherConfig {
        if let Some(v) = self.scatter_rate {
            w.scatter_rate = v;
        }
        if let Some(v) = self.scatter_range_scale {
            w.scatter_range_scale = v;
        }
        if let Some(v) = self.scatter_intensity_max {
            w.scatter_intensity_max = v;
        }
        if let Some([lo, hi]) = self.attenuation {
            w.attenuation = (lo, hi);
        }
        if let Some(v) = self.max_range {
            w.max_range = v;
        }
        if let Some(v) = self.dropout_prob {
            w.dropout_prob = v;
        }
        w
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeatherSection {
    pub fog: WeatherOverride,
    pub rain: WeatherOverride,
    pub snow: WeatherOverride,
}

impl WeatherSection {
    pub fn to_core(&self, condition: Condition, seed: u64) -> WeatherConfig {
        let preset = WeatherConfig::preset(condition);
        let mut w = match condition {
            Condition::Clean => preset,
            Condition::Fog => self.fog.apply(preset),
            Condition::Rain => self.rain.apply(preset),
            Condition::Snow => self.snow.apply(preset),
        };
        w.seed = seed;
        w
    }
}

/// Numeric precision the model runs at. Checkpoints always store 32-bit
/// payloads; an f64 run loses the extra bits on save.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub precision: Precision,
    /// Stem output channels.
    pub channels: usize,
    /// Channel widths after the two stride-2 encoder stages.
    pub enc_channels: [usize; 2],
    pub leaky_slope: f64,
    pub split_stems: bool,
    pub use_gas: bool,
    pub use_rdc: bool,
    pub gas_loss_weight: f64,
    pub rdc_loss_weight: f64,
    pub gas: GasSection,
    pub rdc: RdcSection,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            precision: Precision::F32,
            channels: m.stem_channels,
            enc_channels: [m.enc_channels.0, m.enc_channels.1],
            leaky_slope: m.leaky_slope,
            split_stems: m.split_stems,
            use_gas: m.use_gas,
            use_rdc: m.use_rdc,
            gas_loss_weight: m.gas_loss_weight,
            rdc_loss_weight: m.rdc_loss_weight,
            gas: GasSection::default(),
            rdc: RdcSection::default(),
        }
    }
}

impl ModelSection {
    pub fn to_core(&self) -> ModelConfig {
        ModelConfig {
            stem_channels: self.channels,
            enc_channels: (self.enc_channels[0], self.enc_channels[1]),
            leaky_slope: self.leaky_slope,
            split_stems: self.split_stems,
            use_gas: self.use_gas,
            use_rdc: self.use_rdc,
            gas: self.gas.to_core(),
            rdc: self.rdc.to_core(),
            gas_loss_weight: self.gas_loss_weight,
            rdc_loss_weight: self.rdc_loss_weight,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GasSection {
    pub gamma: f64,
    pub blocks: usize,
    pub hidden_width: usize,
    pub negatives: usize,
    pub stop_grad_stem: bool,
    pub weight_in_training: bool,
}

impl Default for GasSection {
    fn default() -> Self {
        let g = GasConfig::default();
        GasSection {
            gamma: g.gamma,
            blocks: g.blocks,
            hidden_width: g.hidden_width,
            negatives: g.negatives,
            stop_grad_stem: g.stop_grad_stem,
            weight_in_training: g.weight_in_training,
        }
    }
}

impl GasSection {
    pub fn to_core(&self) -> GasConfig {
        GasConfig {
            gamma: self.gamma,
            blocks: self.blocks,
            hidden_width: self.hidden_width,
            negatives: self.negatives,
            stop_grad_stem: self.stop_grad_stem,
            weight_in_training: self.weight_in_training,
            ..GasConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RdcSection {
    pub bank_rows: usize,
    pub temperature: f64,
    pub jitter: f64,
}

impl Default for RdcSection {
    fn default() -> Self {
        let r = RdcConfig::default();
        RdcSection {
            bank_rows: r.bank_rows,
            temperature: r.temperature,
            jitter: r.jitter,
        }
    }
}

impl RdcSection {
    pub fn to_core(&self) -> RdcConfig {
        RdcConfig {
            bank_rows: self.bank_rows,
            temperature: self.temperature,
            jitter: self.jitter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            weight_decay: t.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Conditions `eval` reports on, in report order.
    pub conditions: Vec<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            conditions: Condition::ALL.iter().map(|c| c.as_str().into()).collect(),
        }
    }
}

impl EvalSection {
    pub fn conditions(&self) -> Result<Vec<Condition>, CliError> {
        self.conditions
            .iter()
            .map(|s| Condition::from_str(s).map_err(CliError::config))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsSection {
    /// Model initialization and training randomness.
    pub master: u64,
    /// Scene generation and weather corruption; per-scene seeds derive
    /// from it through named streams.
    pub data: u64,
    /// Training seeds the ablation harness runs, shared across variants.
    pub ablate: Vec<u64>,
}

impl Default for SeedsSection {
    fn default() -> Self {
        SeedsSection {
            master: 0,
            data: 1,
            ablate: vec![0, 1, 2],
        }
    }
}
