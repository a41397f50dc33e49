//! Spherical range-view projection of LiDAR point clouds.
//!
//! A cloud is projected onto an `H x W` grid: azimuth maps to columns,
//! elevation to rows, and pixel collisions resolve to the nearest point
//! (ties go to the lower point index). The projection keeps enough
//! bookkeeping to map per-pixel predictions back onto every input point.
//!
//! Pixel math runs at `f64` regardless of the storage type so that pixel
//! assignment is stable and exactly reproducible.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::str::FromStr;

use crate::tensor::{ChannelStats, LabelImage, Mask, ShapeError, Tensor};

/// Number of image planes produced by projection: x, y, z, depth, intensity.
pub const NUM_PLANES: usize = 5;

/// Weather condition tag carried by a scan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    Fog,
    Rain,
    Snow,
}

impl Condition {
    pub const ALL: [Condition; 4] = [
        Condition::Clean,
        Condition::Fog,
        Condition::Rain,
        Condition::Snow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::Fog => "fog",
            Condition::Rain => "rain",
            Condition::Snow => "snow",
        }
    }
}

impl core::fmt::Display for Condition {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown condition {0:?} (expected clean, fog, rain or snow)")]
pub struct ParseConditionError(alloc::string::String);

impl FromStr for Condition {
    type Err = ParseConditionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "clean" => Ok(Condition::Clean),
            "fog" => Ok(Condition::Fog),
            "rain" => Ok(Condition::Rain),
            "snow" => Ok(Condition::Snow),
            other => Err(ParseConditionError(alloc::string::String::from(other))),
        }
    }
}

/// One LiDAR return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub fn range(&self) -> f32 {
        let (x, y, z) = (f64::from(self.x), f64::from(self.y), f64::from(self.z));
        ((x * x + y * y + z * z).sqrt()) as f32
    }
}

/// A scan: points, optional per-point class labels, and its condition tag.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub labels: Option<Vec<u16>>,
    pub condition: Condition,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            labels: None,
            condition: Condition::Clean,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Projection geometry. Field-of-view angles are positive magnitudes in
/// degrees; the vertical span covers elevations in the closed interval
/// `[-fov_down_deg, +fov_up_deg]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionConfig {
    pub width: usize,
    pub height: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    /// Label written to pixels no point claimed.
    pub ignore_label: u16,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            width: 512,
            height: 32,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            ignore_label: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProjectionError {
    #[error("projection grid {height}x{width} must be non-empty")]
    EmptyGrid { height: usize, width: usize },
    #[error("vertical field of view must be positive (fov_up {up} + fov_down {down} <= 0)")]
    BadFov { up: f64, down: f64 },
    #[error("cloud has {labels} labels for {points} points")]
    LabelCountMismatch { labels: usize, points: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<(), ProjectionError> {
        if self.width == 0 || self.height == 0 {
            return Err(ProjectionError::EmptyGrid {
                height: self.height,
                width: self.width,
            });
        }
        if self.fov_up_deg + self.fov_down_deg <= 0.0 {
            return Err(ProjectionError::BadFov {
                up: self.fov_up_deg,
                down: self.fov_down_deg,
            });
        }
        Ok(())
    }
}

/// Sentinel for pixels that no point claimed.
pub const NO_WINNER: u32 = u32::MAX;

/// Why a point did not land in the image.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DropCounts {
    /// Points with exactly zero range.
    pub zero_range: usize,
    /// Points whose elevation falls outside the vertical field of view.
    pub out_of_fov: usize,
}

/// Result of projecting one cloud.
#[derive(Debug, Clone)]
pub struct RangeImage {
    /// `5 x H x W` planes: x, y, z, depth, intensity of the winning point;
    /// zero at invalid pixels.
    pub planes: Tensor<f32>,
    /// True where some point won the pixel.
    pub valid: Mask,
    /// Per-pixel winning point index, row-major; [`NO_WINNER`] when empty.
    pub winner: Vec<u32>,
    /// Per-pixel label of the winning point (the configured ignore label at
    /// empty pixels). Present when the cloud carried labels.
    pub labels: Option<LabelImage>,
    /// Pixel each point landed in, including points that lost the depth
    /// contest; `None` for dropped points.
    pub point_pixel: Vec<Option<(u16, u16)>>,
    pub dropped: DropCounts,
}

/// Map one point to its pixel, or record why it was dropped.
fn pixel_of(p: Point, cfg: &ProjectionConfig, drops: &mut DropCounts) -> Option<(usize, usize, f64)> {
    let (x, y, z) = (f64::from(p.x), f64::from(p.y), f64::from(p.z));
    let d = (x * x + y * y + z * z).sqrt();
    if d == 0.0 {
        drops.zero_range += 1;
        return None;
    }
    let fov_up = cfg.fov_up_deg.to_radians();
    let fov_down = cfg.fov_down_deg.to_radians();
    let elevation = (z / d).clamp(-1.0, 1.0).asin();
    if elevation < -fov_down || elevation > fov_up {
        drops.out_of_fov += 1;
        return None;
    }

    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let u = 0.5 * (1.0 - x.atan2(y) / PI) * w;
    let v = (1.0 - (elevation + fov_down) / (fov_up + fov_down)) * h;
    let col = (u.floor() as i64).clamp(0, cfg.width as i64 - 1) as usize;
    let row = (v.floor() as i64).clamp(0, cfg.height as i64 - 1) as usize;
    Some((row, col, d))
}

/// Project a cloud onto the range-view grid.
///
/// Collisions resolve to the nearest point; at exactly equal depth the
/// lower point index wins.
pub fn project(cloud: &PointCloud, cfg: &ProjectionConfig) -> Result<RangeImage, ProjectionError> {
    cfg.validate()?;
    if let Some(labels) = &cloud.labels {
        if labels.len() != cloud.points.len() {
            return Err(ProjectionError::LabelCountMismatch {
                labels: labels.len(),
                points: cloud.points.len(),
            });
        }
    }

    let (h, w) = (cfg.height, cfg.width);
    let mut winner = vec![NO_WINNER; h * w];
    let mut depth = vec![f64::INFINITY; h * w];
    let mut point_pixel = vec![None; cloud.points.len()];
    let mut drops = DropCounts::default();

    for (idx, &p) in cloud.points.iter().enumerate() {
        let Some((row, col, d)) = pixel_of(p, cfg, &mut drops) else {
            continue;
        };
        point_pixel[idx] = Some((col as u16, row as u16));
        let at = row * w + col;
        // Ascending index order makes "first strictly nearer point wins"
        // equivalent to the lowest-index tie rule.
        if d < depth[at] {
            depth[at] = d;
            winner[at] = idx as u32;
        }
    }

    let mut planes = Tensor::zeros(NUM_PLANES, h, w);
    let mut valid = Mask::new_false(h, w);
    let mut labels_img = cloud
        .labels
        .as_ref()
        .map(|_| LabelImage::filled(h, w, cfg.ignore_label));
    for row in 0..h {
        for col in 0..w {
            let at = row * w + col;
            if winner[at] == NO_WINNER {
                continue;
            }
            let idx = winner[at] as usize;
            let p = cloud.points[idx];
            *planes.at_mut(0, row, col) = p.x;
            *planes.at_mut(1, row, col) = p.y;
            *planes.at_mut(2, row, col) = p.z;
            *planes.at_mut(3, row, col) = depth[at] as f32;
            *planes.at_mut(4, row, col) = p.intensity;
            valid.set(row, col, true);
            if let (Some(img), Some(labels)) = (&mut labels_img, &cloud.labels) {
                img.set(row, col, labels[idx]);
            }
        }
    }

    Ok(RangeImage {
        planes,
        valid,
        winner,
        labels: labels_img,
        point_pixel,
        dropped: drops,
    })
}

/// Read a per-pixel prediction back onto every point of the cloud that
/// produced the range image. Dropped points receive `fallback`.
pub fn backproject_labels(
    prediction: &LabelImage,
    image: &RangeImage,
    fallback: u16,
) -> Vec<u16> {
    image
        .point_pixel
        .iter()
        .map(|px| match px {
            Some((col, row)) => prediction.get(usize::from(*row), usize::from(*col)),
            None => fallback,
        })
        .collect()
}

/// Frozen per-plane standardization statistics, estimated once over the
/// training split and reused verbatim at evaluation time.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneStats {
    pub stats: ChannelStats<f32>,
}

/// Streaming accumulator for [`PlaneStats`] over many range images.
#[derive(Debug, Clone, Default)]
pub struct PlaneStatsAccumulator {
    sum: [f64; NUM_PLANES],
    sum_sq: [f64; NUM_PLANES],
    count: u64,
}

impl PlaneStatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, image: &RangeImage) {
        for plane in 0..NUM_PLANES {
            let ch = image.planes.channel(plane);
            let mut s = 0.0f64;
            let mut sq = 0.0f64;
            for (&v, &keep) in ch.iter().zip(image.valid.as_slice()) {
                if keep {
                    let v = f64::from(v);
                    s += v;
                    sq += v * v;
                }
            }
            self.sum[plane] += s;
            self.sum_sq[plane] += sq;
        }
        self.count += image.valid.count_valid() as u64;
    }

    /// Population statistics over every valid pixel seen so far.
    pub fn finish(&self) -> Result<PlaneStats, ShapeError> {
        if self.count == 0 {
            return Err(ShapeError::EmptyMask {
                context: "plane_stats",
            });
        }
        let n = self.count as f64;
        let mut mean = Vec::with_capacity(NUM_PLANES);
        let mut std = Vec::with_capacity(NUM_PLANES);
        for plane in 0..NUM_PLANES {
            let mu = self.sum[plane] / n;
            let var = (self.sum_sq[plane] / n - mu * mu).max(0.0);
            mean.push(mu as f32);
            std.push(var.sqrt() as f32);
        }
        let mut stats = ChannelStats { mean, std };
        stats.floor_std();
        Ok(PlaneStats { stats })
    }
}

/// Standardize the five planes with frozen statistics and zero invalid
/// pixels. This is the network input.
pub fn make_input_planes(image: &RangeImage, stats: &PlaneStats) -> Tensor<f32> {
    let mut out = crate::kernels::normalize_channels(&image.planes, &stats.stats);
    crate::kernels::mask_channels(&mut out, &image.valid);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn test_config() -> ProjectionConfig {
        ProjectionConfig {
            width: 64,
            height: 16,
            fov_up_deg: 3.0,
            fov_down_deg: 25.0,
            ignore_label: 4,
        }
    }

    fn random_cloud(n: usize, seed_id: u64) -> PointCloud {
        let mut rng = stream(11, "projection-test", &[seed_id]);
        let points = (0..n)
            .map(|_| {
                let azimuth = rng.random_range(-PI..PI);
                let elevation = rng.random_range(-30f64.to_radians()..6f64.to_radians());
                let d = rng.random_range(0.5..60.0);
                Point {
                    x: (d * elevation.cos() * azimuth.sin()) as f32,
                    y: (d * elevation.cos() * azimuth.cos()) as f32,
                    z: (d * elevation.sin()) as f32,
                    intensity: rng.random_range(0.0..1.0),
                }
            })
            .collect();
        let labels = (0..n).map(|_| rng.random_range(0..4u16)).collect();
        PointCloud {
            points,
            labels: Some(labels),
            condition: Condition::Clean,
        }
    }

    /// Naive per-pixel scan used as the projection oracle: for each pixel,
    /// find every point mapping to it and pick the nearest, lowest-index one.
    fn oracle_winners(cloud: &PointCloud, cfg: &ProjectionConfig) -> (Vec<u32>, DropCounts) {
        let mut drops = DropCounts::default();
        let assigned: Vec<Option<(usize, usize, f64)>> = cloud
            .points
            .iter()
            .map(|&p| pixel_of(p, cfg, &mut drops))
            .collect();
        let mut winner = vec![NO_WINNER; cfg.height * cfg.width];
        for row in 0..cfg.height {
            for col in 0..cfg.width {
                let mut best: Option<(f64, usize)> = None;
                for (idx, a) in assigned.iter().enumerate() {
                    if let Some((r, c, d)) = a {
                        if *r == row && *c == col {
                            let better = match best {
                                None => true,
                                Some((bd, bi)) => *d < bd || (*d == bd && idx < bi),
                            };
                            if better {
                                best = Some((*d, idx));
                            }
                        }
                    }
                }
                if let Some((_, idx)) = best {
                    winner[row * cfg.width + col] = idx as u32;
                }
            }
        }
        (winner, drops)
    }

    #[test]
    fn axis_aligned_points_land_on_expected_columns() {
        let cfg = ProjectionConfig {
            width: 8,
            height: 4,
            fov_up_deg: 10.0,
            fov_down_deg: 10.0,
            ignore_label: 4,
        };
        // atan2(x, y): +y axis gives 0 (image center), +x axis gives pi/2
        // (quarter turn toward the left edge).
        let cases = [
            (Point { x: 0.0, y: 10.0, z: 0.0, intensity: 0.0 }, 4usize),
            (Point { x: 10.0, y: 0.0, z: 0.0, intensity: 0.0 }, 2),
            (Point { x: 0.0, y: -10.0, z: 0.0, intensity: 0.0 }, 0),
            (Point { x: -10.0, y: 0.0, z: 0.0, intensity: 0.0 }, 6),
        ];
        for (p, expected_col) in cases {
            let cloud = PointCloud::new(vec![p]);
            let img = project(&cloud, &cfg).unwrap();
            let at = img.winner.iter().position(|&w| w != NO_WINNER).unwrap();
            assert_eq!(at % cfg.width, expected_col, "point {p:?}");
            // Zero elevation in a symmetric fov gives v = H/2 exactly, which
            // floors into the first lower-half row.
            assert_eq!(at / cfg.width, 2);
        }
    }

    #[test]
    fn elevation_maps_top_and_bottom_rows() {
        let cfg = test_config();
        let up = 3f64.to_radians();
        let down = 25f64.to_radians();
        for (elev, row) in [(up, 0usize), (-down, cfg.height - 1)] {
            let p = Point {
                x: 0.0,
                y: (10.0 * elev.cos()) as f32,
                z: (10.0 * elev.sin()) as f32,
                intensity: 0.0,
            };
            let img = project(&PointCloud::new(vec![p]), &cfg).unwrap();
            assert_eq!(img.dropped, DropCounts::default());
            let at = img.winner.iter().position(|&w| w != NO_WINNER).unwrap();
            assert_eq!(at / cfg.width, row, "elevation {elev}");
        }
    }

    #[test]
    fn drops_are_counted_by_reason() {
        let cfg = test_config();
        let cloud = PointCloud::new(vec![
            Point { x: 0.0, y: 0.0, z: 0.0, intensity: 0.0 },
            Point { x: 0.0, y: 1.0, z: 5.0, intensity: 0.0 },
            Point { x: 0.0, y: 1.0, z: -5.0, intensity: 0.0 },
            Point { x: 0.0, y: 5.0, z: 0.0, intensity: 0.0 },
        ]);
        let img = project(&cloud, &cfg).unwrap();
        assert_eq!(img.dropped.zero_range, 1);
        assert_eq!(img.dropped.out_of_fov, 2);
        assert_eq!(img.point_pixel[0], None);
        assert_eq!(img.point_pixel[1], None);
        assert_eq!(img.point_pixel[2], None);
        assert!(img.point_pixel[3].is_some());
    }

    #[test]
    fn nearer_point_wins_and_ties_go_to_lower_index() {
        let cfg = test_config();
        let far = Point { x: 0.0, y: 20.0, z: 0.0, intensity: 0.3 };
        let near = Point { x: 0.0, y: 10.0, z: 0.0, intensity: 0.7 };
        let img = project(&PointCloud::new(vec![far, near]), &cfg).unwrap();
        let at = img.winner.iter().position(|&w| w != NO_WINNER).unwrap();
        assert_eq!(img.winner[at], 1);
        assert_eq!(img.planes.data()[3 * cfg.height * cfg.width + at], 10.0);

        let img = project(&PointCloud::new(vec![far, far]), &cfg).unwrap();
        let at = img.winner.iter().position(|&w| w != NO_WINNER).unwrap();
        assert_eq!(img.winner[at], 0);
    }

    #[test]
    fn matches_naive_oracle_on_random_clouds() {
        let cfg = test_config();
        for seed in 0..5 {
            let cloud = random_cloud(2000, seed);
            let img = project(&cloud, &cfg).unwrap();
            let (expect, drops) = oracle_winners(&cloud, &cfg);
            assert_eq!(img.winner, expect, "seed {seed}");
            assert_eq!(img.dropped, drops, "seed {seed}");
        }
    }

    #[test]
    fn every_point_is_projected_or_counted() {
        let cfg = test_config();
        let cloud = random_cloud(3000, 99);
        let img = project(&cloud, &cfg).unwrap();
        let landed = img.point_pixel.iter().filter(|p| p.is_some()).count();
        assert_eq!(
            landed + img.dropped.zero_range + img.dropped.out_of_fov,
            cloud.len()
        );
        // Winners are real points that landed in their own pixel.
        for (at, &widx) in img.winner.iter().enumerate() {
            if widx == NO_WINNER {
                assert!(!img.valid.as_slice()[at]);
                continue;
            }
            assert!(img.valid.as_slice()[at]);
            let (col, row) = img.point_pixel[widx as usize].unwrap();
            assert_eq!(usize::from(row) * cfg.width + usize::from(col), at);
        }
    }

    #[test]
    fn winner_labels_round_trip_through_backprojection() {
        let cfg = test_config();
        let cloud = random_cloud(2000, 7);
        let img = project(&cloud, &cfg).unwrap();
        let labels_img = img.labels.clone().unwrap();
        let back = backproject_labels(&labels_img, &img, cfg.ignore_label);
        assert_eq!(back.len(), cloud.len());
        let cloud_labels = cloud.labels.as_ref().unwrap();
        for (at, &widx) in img.winner.iter().enumerate() {
            if widx != NO_WINNER {
                assert_eq!(back[widx as usize], cloud_labels[widx as usize], "pixel {at}");
            }
        }
        for (idx, px) in img.point_pixel.iter().enumerate() {
            if px.is_none() {
                assert_eq!(back[idx], cfg.ignore_label);
            }
        }
    }

    #[test]
    fn plane_stats_standardize_valid_pixels() {
        let cfg = test_config();
        let mut acc = PlaneStatsAccumulator::new();
        let clouds: Vec<_> = (0..3).map(|s| random_cloud(1500, 200 + s)).collect();
        let images: Vec<_> = clouds.iter().map(|c| project(c, &cfg).unwrap()).collect();
        for img in &images {
            acc.add(img);
        }
        let stats = acc.finish().unwrap();

        // Re-standardizing the whole set should give mean ~0, std ~1 per plane.
        let mut check = PlaneStatsAccumulator::new();
        for img in &images {
            let mut normed = img.clone();
            normed.planes = make_input_planes(img, &stats);
            check.add(&normed);
        }
        let after = check.finish().unwrap();
        for plane in 0..NUM_PLANES {
            assert!(after.stats.mean[plane].abs() < 1e-3, "plane {plane}");
            assert!((after.stats.std[plane] - 1.0).abs() < 1e-3, "plane {plane}");
        }
    }

    #[test]
    fn empty_stats_and_bad_configs_are_rejected() {
        assert!(PlaneStatsAccumulator::new().finish().is_err());
        let mut cfg = test_config();
        cfg.width = 0;
        assert!(matches!(
            project(&PointCloud::new(vec![]), &cfg),
            Err(ProjectionError::EmptyGrid { .. })
        ));
        let cfg = ProjectionConfig {
            fov_up_deg: -5.0,
            fov_down_deg: 5.0,
            ..test_config()
        };
        assert!(matches!(
            project(&PointCloud::new(vec![]), &cfg),
            Err(ProjectionError::BadFov { .. })
        ));
        let mut cloud = random_cloud(10, 1);
        cloud.labels = Some(vec![0; 3]);
        assert!(matches!(
            project(&cloud, &test_config()),
            Err(ProjectionError::LabelCountMismatch { labels: 3, points: 10 })
        ));
    }

    #[test]
    fn condition_parses_and_prints() {
        for c in Condition::ALL {
            assert_eq!(c.as_str().parse::<Condition>().unwrap(), c);
        }
        assert!("drizzle".parse::<Condition>().is_err());
    }
}
