//! Procedural labeled scenes and simplified adverse-weather corruption.
//!
//! Scenes are ray-cast from the sensor origin against a ground plane, box
//! obstacles (vehicles, buildings) and vertical cylinders (poles), with
//! class-informative reflectance. Corruption happens in a fixed order:
//! scatter injection, intensity attenuation, range truncation, dropout.
//! The corruption models are directional stand-ins, not physical optics;
//! every draw comes from a named seed stream, so outputs are bit-identical
//! per seed.

use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Exp, Poisson, StandardNormal};

use crate::classes;
use crate::projection::{Condition, Point, PointCloud};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WeatherError {
    #[error("scene has no primitives (ground disabled and all counts zero)")]
    DegenerateScene,
    #[error("scene generator supports exactly {expected} classes, config asks for {got}")]
    UnsupportedClasses { expected: usize, got: usize },
    #[error("{what} range ({lo}, {hi}) is not ordered or not positive")]
    BadRange {
        what: &'static str,
        lo: f64,
        hi: f64,
    },
    #[error("{what} = {value} is not a probability")]
    BadProbability { what: &'static str, value: f64 },
    #[error("{what} = {value} must be non-negative")]
    NegativeRate { what: &'static str, value: f64 },
}

fn check_range(what: &'static str, (lo, hi): (f64, f64), min: f64) -> Result<(), WeatherError> {
    if lo.is_finite() && lo >= min && lo <= hi {
        Ok(())
    } else {
        Err(WeatherError::BadRange { what, lo, hi })
    }
}

fn check_prob(what: &'static str, value: f64) -> Result<(), WeatherError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(WeatherError::BadProbability { what, value })
    }
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

/// Procedural scene layout. All `(lo, hi)` pairs are uniform sampling
/// ranges in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub seed: u64,
    /// Sensor elevation rows.
    pub rings: usize,
    /// Sensor azimuth columns.
    pub azimuth_steps: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    /// Per-ray angular jitter as a fraction of the lattice spacing.
    pub angular_jitter: f64,
    /// Ground plane sits at `z = -sensor_height`.
    pub sensor_height: f64,
    pub include_ground: bool,
    pub max_range: f64,
    pub num_vehicles: usize,
    pub num_poles: usize,
    pub num_buildings: usize,
    pub vehicle_distance: (f64, f64),
    pub vehicle_half_width: (f64, f64),
    pub vehicle_half_length: (f64, f64),
    pub vehicle_height: (f64, f64),
    pub pole_distance: (f64, f64),
    pub pole_radius: (f64, f64),
    pub pole_height: (f64, f64),
    pub building_distance: (f64, f64),
    pub building_half_width: (f64, f64),
    pub building_half_length: (f64, f64),
    pub building_height: (f64, f64),
    /// Base reflectance per foreground class (ground, vehicle, pole,
    /// building); classes are told apart mostly by this channel.
    pub reflectance: [f64; classes::NUM_FOREGROUND],
    /// Std of the per-point reflectance jitter.
    pub reflectance_jitter: f64,
    /// Foreground classes plus ignore; the generator supports exactly 5.
    pub num_classes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 0,
            rings: 64,
            azimuth_steps: 1024,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            angular_jitter: 0.3,
            sensor_height: 1.8,
            include_ground: true,
            max_range: 80.0,
            num_vehicles: 8,
            num_poles: 6,
            num_buildings: 4,
            vehicle_distance: (6.0, 25.0),
            vehicle_half_width: (0.8, 1.1),
            vehicle_half_length: (1.7, 2.5),
            vehicle_height: (1.4, 1.9),
            pole_distance: (4.0, 30.0),
            pole_radius: (0.06, 0.15),
            pole_height: (3.0, 6.0),
            building_distance: (12.0, 40.0),
            building_half_width: (2.0, 6.0),
            building_half_length: (3.0, 8.0),
            building_height: (3.0, 9.0),
            reflectance: [0.12, 0.70, 0.90, 0.35],
            reflectance_jitter: 0.03,
            num_classes: classes::NUM_TOTAL,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), WeatherError> {
        if self.num_classes != classes::NUM_TOTAL {
            return Err(WeatherError::UnsupportedClasses {
                expected: classes::NUM_TOTAL,
                got: self.num_classes,
            });
        }
        if !self.include_ground
            && self.num_vehicles + self.num_poles + self.num_buildings == 0
        {
            return Err(WeatherError::DegenerateScene);
        }
        check_range("vehicle_distance", self.vehicle_distance, 0.0)?;
        check_range("vehicle_half_width", self.vehicle_half_width, 0.0)?;
        check_range("vehicle_half_length", self.vehicle_half_length, 0.0)?;
        check_range("vehicle_height", self.vehicle_height, 0.0)?;
        check_range("pole_distance", self.pole_distance, 0.0)?;
        check_range("pole_radius", self.pole_radius, 0.0)?;
        check_range("pole_height", self.pole_height, 0.0)?;
        check_range("building_distance", self.building_distance, 0.0)?;
        check_range("building_half_width", self.building_half_width, 0.0)?;
        check_range("building_half_length", self.building_half_length, 0.0)?;
        check_range("building_height", self.building_height, 0.0)?;
        if !(self.max_range > 0.0) {
            return Err(WeatherError::NegativeRate {
                what: "max_range",
                value: self.max_range,
            });
        }
        Ok(())
    }
}

/// Scene obstacle. Boxes are axis-aligned; cylinders are vertical.
#[derive(Debug, Clone, PartialEq)]
enum Primitive {
    Aabb {
        min: [f64; 3],
        max: [f64; 3],
        class: u16,
    },
    Cylinder {
        cx: f64,
        cy: f64,
        radius: f64,
        z0: f64,
        z1: f64,
        class: u16,
    },
}

impl Primitive {
    /// Nearest positive ray parameter along direction `d` from the origin,
    /// if any.
    fn intersect(&self, d: [f64; 3]) -> Option<f64> {
        match *self {
            Primitive::Aabb { min, max, .. } => {
                let mut t_enter = 0.0f64;
                let mut t_exit = f64::INFINITY;
                for axis in 0..3 {
                    if d[axis] == 0.0 {
                        if 0.0 < min[axis] || 0.0 > max[axis] {
                            return None;
                        }
                        continue;
                    }
                    let t0 = min[axis] / d[axis];
                    let t1 = max[axis] / d[axis];
                    let (near, far) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
                    t_enter = t_enter.max(near);
                    t_exit = t_exit.min(far);
                }
                (t_enter <= t_exit && t_enter > 0.0).then_some(t_enter)
            }
            Primitive::Cylinder {
                cx,
                cy,
                radius,
                z0,
                z1,
                ..
            } => {
                let a = d[0] * d[0] + d[1] * d[1];
                if a == 0.0 {
                    return None;
                }
                let b = d[0] * cx + d[1] * cy;
                let c = cx * cx + cy * cy - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                for t in [(b - sq) / a, (b + sq) / a] {
                    if t > 0.0 {
                        let z = t * d[2];
                        if z >= z0 && z <= z1 {
                            return Some(t);
                        }
                    }
                }
                None
            }
        }
    }

    fn class(&self) -> u16 {
        match *self {
            Primitive::Aabb { class, .. } | Primitive::Cylinder { class, .. } => class,
        }
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

fn sample_primitives(cfg: &SceneConfig, rng: &mut impl Rng) -> Vec<Primitive> {
    let mut prims = Vec::new();
    let ground_z = -cfg.sensor_height;
    for _ in 0..cfg.num_vehicles {
        let angle = rng.random_range(-PI..PI);
        let dist = draw(rng, cfg.vehicle_distance);
        let (cx, cy) = (dist * angle.sin(), dist * angle.cos());
        let hw = draw(rng, cfg.vehicle_half_width);
        let hl = draw(rng, cfg.vehicle_half_length);
        let h = draw(rng, cfg.vehicle_height);
        prims.push(Primitive::Aabb {
            min: [cx - hw, cy - hl, ground_z],
            max: [cx + hw, cy + hl, ground_z + h],
            class: classes::VEHICLE,
        });
    }
    for _ in 0..cfg.num_poles {
        let angle = rng.random_range(-PI..PI);
        let dist = draw(rng, cfg.pole_distance);
        prims.push(Primitive::Cylinder {
            cx: dist * angle.sin(),
            cy: dist * angle.cos(),
            radius: draw(rng, cfg.pole_radius),
            z0: ground_z,
            z1: ground_z + draw(rng, cfg.pole_height),
            class: classes::POLE,
        });
    }
    for _ in 0..cfg.num_buildings {
        let angle = rng.random_range(-PI..PI);
        let dist = draw(rng, cfg.building_distance);
        let (cx, cy) = (dist * angle.sin(), dist * angle.cos());
        let hw = draw(rng, cfg.building_half_width);
        let hl = draw(rng, cfg.building_half_length);
        let h = draw(rng, cfg.building_height);
        prims.push(Primitive::Aabb {
            min: [cx - hw, cy - hl, ground_z],
            max: [cx + hw, cy + hl, ground_z + h],
            class: classes::BUILDING,
        });
    }
    prims
}

/// Cast one ray against the scene; returns range and class of the nearest
/// hit within `max_range`.
fn cast_ray(
    d: [f64; 3],
    prims: &[Primitive],
    include_ground: bool,
    ground_z: f64,
    max_range: f64,
) -> Option<(f64, u16)> {
    let mut best: Option<(f64, u16)> = None;
    if include_ground && d[2] < 0.0 {
        let t = ground_z / d[2];
        if t > 0.0 && t <= max_range {
            best = Some((t, classes::GROUND));
        }
    }
    for p in prims {
        if let Some(t) = p.intersect(d) {
            if t <= max_range && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, p.class()));
            }
        }
    }
    best
}

/// Generate one labeled clean scan by ray casting over the ring/azimuth
/// lattice. Deterministic for a given `cfg.seed`.
pub fn generate_scene(cfg: &SceneConfig) -> Result<PointCloud, WeatherError> {
    cfg.validate()?;
    let mut layout_rng = stream(cfg.seed, "scene-layout", &[]);
    let prims = sample_primitives(cfg, &mut layout_rng);
    let mut ray_rng = stream(cfg.seed, "scene-rays", &[]);

    let fov_up = cfg.fov_up_deg.to_radians();
    let fov_down = cfg.fov_down_deg.to_radians();
    let elev_step = (fov_up + fov_down) / cfg.rings.max(1) as f64;
    let azim_step = 2.0 * PI / cfg.azimuth_steps.max(1) as f64;
    let ground_z = -cfg.sensor_height;

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for ring in 0..cfg.rings {
        for step in 0..cfg.azimuth_steps {
            let jitter_e = cfg.angular_jitter * ray_rng.random_range(-0.5..0.5) * elev_step;
            let jitter_a = cfg.angular_jitter * ray_rng.random_range(-0.5..0.5) * azim_step;
            let elev = fov_up - (ring as f64 + 0.5) * elev_step + jitter_e;
            let azim = -PI + (step as f64 + 0.5) * azim_step + jitter_a;
            let d = [
                elev.cos() * azim.sin(),
                elev.cos() * azim.cos(),
                elev.sin(),
            ];
            let Some((t, class)) =
                cast_ray(d, &prims, cfg.include_ground, ground_z, cfg.max_range)
            else {
                continue;
            };
            let jitter: f64 = StandardNormal.sample(&mut ray_rng);
            let refl = (cfg.reflectance[usize::from(class)]
                + cfg.reflectance_jitter * jitter)
                .clamp(0.0, 1.0);
            points.push(Point {
                x: (t * d[0]) as f32,
                y: (t * d[1]) as f32,
                z: (t * d[2]) as f32,
                intensity: refl as f32,
            });
            labels.push(class);
        }
    }
    Ok(PointCloud {
        points,
        labels: Some(labels),
        condition: Condition::Clean,
    })
}

// ---------------------------------------------------------------------------
// Weather corruption
// ---------------------------------------------------------------------------

/// Corruption parameters. The numbers in the presets are directional
/// stand-ins chosen for their orderings, not physical models.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherConfig {
    pub condition: Condition,
    pub seed: u64,
    /// Expected number of injected noise points (Poisson mean).
    pub scatter_rate: f64,
    /// Exponential scale of scatter ranges in meters.
    pub scatter_range_scale: f64,
    /// Scatter ranges are resampled into this closed interval.
    pub scatter_range: (f64, f64),
    /// Scatter elevation band in degrees.
    pub scatter_elevation_deg: (f64, f64),
    /// Scatter intensity is uniform in `[0, scatter_intensity_max]`.
    pub scatter_intensity_max: f64,
    /// Per-point multiplicative intensity factor, uniform in this range.
    pub attenuation: (f64, f64),
    /// Points beyond this range are removed.
    pub max_range: f64,
    /// Per-point removal probability.
    pub dropout_prob: f64,
}

impl WeatherConfig {
    /// No-op corruption: only the condition tag changes.
    pub fn identity(condition: Condition) -> Self {
        WeatherConfig {
            condition,
            seed: 0,
            scatter_rate: 0.0,
            scatter_range_scale: 4.0,
            scatter_range: (0.5, 15.0),
            scatter_elevation_deg: (-25.0, 3.0),
            scatter_intensity_max: 0.15,
            attenuation: (1.0, 1.0),
            max_range: f64::INFINITY,
            dropout_prob: 0.0,
        }
    }

    /// Fixed presets. Orderings: fog truncates range hardest and attenuates
    /// most; snow injects the densest scatter; rain is sparse scatter with
    /// mild attenuation.
    pub fn preset(condition: Condition) -> Self {
        let base = WeatherConfig::identity(condition);
        match condition {
            Condition::Clean => base,
            Condition::Fog => WeatherConfig {
                scatter_rate: 400.0,
                scatter_range_scale: 3.0,
                attenuation: (0.30, 0.55),
                max_range: 22.0,
                dropout_prob: 0.03,
                ..base
            },
            Condition::Rain => WeatherConfig {
                scatter_rate: 150.0,
                scatter_range_scale: 6.0,
                attenuation: (0.60, 0.85),
                max_range: 55.0,
                dropout_prob: 0.08,
                ..base
            },
            Condition::Snow => WeatherConfig {
                scatter_rate: 1000.0,
                scatter_range_scale: 5.0,
                scatter_intensity_max: 0.25,
                attenuation: (0.45, 0.75),
                max_range: 40.0,
                dropout_prob: 0.05,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), WeatherError> {
        if !(self.scatter_rate >= 0.0) {
            return Err(WeatherError::NegativeRate {
                what: "scatter_rate",
                value: self.scatter_rate,
            });
        }
        if !(self.scatter_range_scale > 0.0) {
            return Err(WeatherError::NegativeRate {
                what: "scatter_range_scale",
                value: self.scatter_range_scale,
            });
        }
        check_range("scatter_range", self.scatter_range, 0.0)?;
        if self.scatter_elevation_deg.0 > self.scatter_elevation_deg.1 {
            return Err(WeatherError::BadRange {
                what: "scatter_elevation_deg",
                lo: self.scatter_elevation_deg.0,
                hi: self.scatter_elevation_deg.1,
            });
        }
        check_prob("scatter_intensity_max", self.scatter_intensity_max)?;
        check_range("attenuation", self.attenuation, 0.0)?;
        if !(self.max_range > 0.0) {
            return Err(WeatherError::NegativeRate {
                what: "max_range",
                value: self.max_range,
            });
        }
        check_prob("dropout_prob", self.dropout_prob)
    }
}

/// Apply weather corruption in the documented order: inject scatter,
/// attenuate intensities, truncate range, drop points. Surviving real
/// points keep their coordinates and labels; injected points are labeled
/// ignore. Deterministic for a given `w.seed`.
pub fn corrupt(pc: &PointCloud, w: &WeatherConfig) -> Result<PointCloud, WeatherError> {
    w.validate()?;
    let has_labels = pc.labels.is_some();
    let mut points = pc.points.clone();
    let mut labels = pc.labels.clone().unwrap_or_default();

    // (i) scatter injection near the sensor.
    if w.scatter_rate > 0.0 {
        let mut rng = stream(w.seed, "weather-scatter", &[]);
        let count = Poisson::new(w.scatter_rate)
            .expect("validated positive rate")
            .sample(&mut rng) as usize;
        let exp = Exp::new(1.0 / w.scatter_range_scale).expect("validated positive scale");
        let (lo_e, hi_e) = (
            w.scatter_elevation_deg.0.to_radians(),
            w.scatter_elevation_deg.1.to_radians(),
        );
        for _ in 0..count {
            let range = loop {
                let r = w.scatter_range.0 + exp.sample(&mut rng);
                if r <= w.scatter_range.1 {
                    break r;
                }
            };
            let azim = rng.random_range(-PI..PI);
            let elev = rng.random_range(lo_e..=hi_e);
            points.push(Point {
                x: (range * elev.cos() * azim.sin()) as f32,
                y: (range * elev.cos() * azim.cos()) as f32,
                z: (range * elev.sin()) as f32,
                intensity: rng.random_range(0.0..=w.scatter_intensity_max) as f32,
            });
            if has_labels {
                labels.push(classes::IGNORE);
            }
        }
    }

    // (ii) intensity attenuation, drawn per point.
    if w.attenuation != (1.0, 1.0) {
        let mut rng = stream(w.seed, "weather-attenuate", &[]);
        for p in &mut points {
            let factor = rng.random_range(w.attenuation.0..=w.attenuation.1) as f32;
            p.intensity = (p.intensity * factor).clamp(0.0, 1.0);
        }
    }

    // (iii) range truncation, then (iv) dropout.
    let mut rng = stream(w.seed, "weather-dropout", &[]);
    let mut out_points = Vec::with_capacity(points.len());
    let mut out_labels = Vec::with_capacity(labels.len());
    for (idx, p) in points.iter().enumerate() {
        if f64::from(p.range()) > w.max_range {
            continue;
        }
        if w.dropout_prob > 0.0 && rng.random_range(0.0..1.0) < w.dropout_prob {
            continue;
        }
        out_points.push(*p);
        if has_labels {
            out_labels.push(labels[idx]);
        }
    }

    Ok(PointCloud {
        points: out_points,
        labels: has_labels.then_some(out_labels),
        condition: w.condition,
    })
}
