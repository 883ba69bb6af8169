//! Stochastic view construction: resample, flip, rotate, crop and drop.
//!
//! Every stage is a pure function of `(cloud, rng stream, config)`, so two
//! views built from independent stream keys are reproducible bit-for-bit no
//! matter how samples are scheduled across workers.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{bounding_box, PointCloud};
use crate::rng::RngStream;

/// Knobs for the augmentation family; defaults follow the crop scale
/// `[0.5, 1.0]`, aspect `[0.75, 1.0]` and drop scale `0.2` recipe.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Every view is resampled to exactly this many points.
    pub target_points: usize,
    pub flip_prob_x: f64,
    pub flip_prob_y: f64,
    /// Rotation about the vertical axis is uniform in `[-max, max]`.
    pub rotation_max_radians: f64,
    pub cuboid_scale_range: [f64; 2],
    pub cuboid_aspect_range: [f64; 2],
    /// Dropped patch side length as a fraction of the scene extent.
    pub drop_scale: f64,
    pub drop_prob: f64,
    /// Crop/drop stages that would leave fewer points fall back to identity.
    pub min_points_after_crop: usize,
    pub enable_resample: bool,
    pub enable_flip: bool,
    pub enable_rotation: bool,
    pub enable_cuboid: bool,
    pub enable_drop_patch: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        let target_points = 256;
        AugmentationConfig {
            target_points,
            flip_prob_x: 0.5,
            flip_prob_y: 0.5,
            rotation_max_radians: std::f64::consts::PI,
            cuboid_scale_range: [0.5, 1.0],
            cuboid_aspect_range: [0.75, 1.0],
            drop_scale: 0.2,
            drop_prob: 0.5,
            min_points_after_crop: target_points / 4,
            enable_resample: true,
            enable_flip: true,
            enable_rotation: true,
            enable_cuboid: true,
            enable_drop_patch: true,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.target_points == 0 || self.min_points_after_crop == 0 {
            return Err(Error::Config(
                "target_points and min_points_after_crop must be >= 1".into(),
            ));
        }
        if self.target_points < self.min_points_after_crop {
            return Err(Error::Config(format!(
                "target_points {} < min_points_after_crop {}",
                self.target_points, self.min_points_after_crop
            )));
        }
        for (name, range) in [
            ("cuboid_scale_range", self.cuboid_scale_range),
            ("cuboid_aspect_range", self.cuboid_aspect_range),
        ] {
            if range[0] > range[1] || range[0] <= 0.0 {
                return Err(Error::Config(format!("{name} {range:?} ill-ordered")));
            }
        }
        for (name, p) in [
            ("flip_prob_x", self.flip_prob_x),
            ("flip_prob_y", self.flip_prob_y),
            ("drop_prob", self.drop_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Resample to exactly `n` points: without replacement when `n <= N`,
/// otherwise keep every point and top up with replacement.
pub fn random_resample(pc: &PointCloud, n: usize, rng: &mut RngStream) -> Result<PointCloud> {
    let total = pc.len();
    let mut indices: Vec<usize>;
    if n <= total {
        let mut all: Vec<usize> = (0..total).collect();
        rng.shuffle(&mut all);
        all.truncate(n);
        indices = all;
    } else {
        indices = (0..total).collect();
        for _ in total..n {
            indices.push(rng.index(total));
        }
    }
    pc.select(&indices)
}

/// Independently mirrors x and/or y about the centroid; z is never flipped.
pub fn random_flip(
    pc: &PointCloud,
    rng: &mut RngStream,
    config: &AugmentationConfig,
) -> PointCloud {
    let centroid = pc.centroid();
    let flip_x = rng.chance(config.flip_prob_x);
    let flip_y = rng.chance(config.flip_prob_y);
    if !flip_x && !flip_y {
        return pc.clone();
    }
    pc.map_points(|p| {
        [
            if flip_x { 2.0 * centroid[0] - p[0] } else { p[0] },
            if flip_y { 2.0 * centroid[1] - p[1] } else { p[1] },
            p[2],
        ]
    })
}

/// Rotates about the vertical axis through the centroid by a uniform angle
/// in `[-rotation_max, rotation_max]`.
pub fn random_rotation(
    pc: &PointCloud,
    rng: &mut RngStream,
    config: &AugmentationConfig,
) -> PointCloud {
    let angle = rng.range(-config.rotation_max_radians, config.rotation_max_radians);
    rotate_z(pc, angle)
}

/// Deterministic z-rotation used by the random stage and by tests.
pub fn rotate_z(pc: &PointCloud, angle: f64) -> PointCloud {
    let centroid = pc.centroid();
    let (sin, cos) = angle.sin_cos();
    pc.map_points(|p| {
        let dx = p[0] - centroid[0];
        let dy = p[1] - centroid[1];
        [
            centroid[0] + cos * dx - sin * dy,
            centroid[1] + sin * dx + cos * dy,
            p[2],
        ]
    })
}

/// Keeps the points strictly inside a random sub-cuboid of the bounding
/// box (side = scale * aspect * extent per axis). Retries up to 100 draws
/// for a crop that keeps `min_points_after_crop` points, then falls back to
/// the unmodified input.
pub fn random_cuboid(
    pc: &PointCloud,
    rng: &mut RngStream,
    config: &AugmentationConfig,
) -> Result<PointCloud> {
    let (lo, hi) = bounding_box(pc);
    for _ in 0..100 {
        let scale = rng.range(config.cuboid_scale_range[0], config.cuboid_scale_range[1]);
        let mut corner = [0.0f64; 3];
        let mut side = [0.0f64; 3];
        for a in 0..3 {
            let aspect = rng.range(config.cuboid_aspect_range[0], config.cuboid_aspect_range[1]);
            let extent = hi[a] - lo[a];
            side[a] = scale * aspect * extent;
            corner[a] = lo[a] + rng.uniform() * (extent - side[a]);
        }
        let kept: Vec<usize> = pc
            .points()
            .iter()
            .enumerate()
            .filter(|(_, p)| {
                (0..3).all(|a| p[a] > corner[a] && p[a] < corner[a] + side[a])
            })
            .map(|(i, _)| i)
            .collect();
        if kept.len() >= config.min_points_after_crop {
            return pc.select(&kept);
        }
    }
    Ok(pc.clone())
}

/// With probability `drop_prob`, erases the points inside an axis-aligned
/// patch (side = drop_scale * extent) centered on a uniformly chosen point.
/// Skipped when it would leave fewer than `min_points_after_crop` points.
pub fn random_drop_patch(
    pc: &PointCloud,
    rng: &mut RngStream,
    config: &AugmentationConfig,
) -> Result<PointCloud> {
    if !rng.chance(config.drop_prob) {
        return Ok(pc.clone());
    }
    let (lo, hi) = bounding_box(pc);
    let center = pc.points()[rng.index(pc.len())];
    let mut half = [0.0f64; 3];
    for a in 0..3 {
        half[a] = 0.5 * config.drop_scale * (hi[a] - lo[a]);
    }
    let kept: Vec<usize> = pc
        .points()
        .iter()
        .enumerate()
        .filter(|(_, p)| (0..3).any(|a| (p[a] - center[a]).abs() > half[a]))
        .map(|(i, _)| i)
        .collect();
    if kept.len() < config.min_points_after_crop {
        return Ok(pc.clone());
    }
    pc.select(&kept)
}

/// Runs the full pipeline for one view:
/// cuboid crop -> drop patch -> rotation -> flip -> resample.
pub fn augment_view(
    pc: &PointCloud,
    rng: &mut RngStream,
    config: &AugmentationConfig,
) -> Result<PointCloud> {
    let mut current = pc.clone();
    if config.enable_cuboid {
        current = random_cuboid(&current, rng, config)?;
    }
    if config.enable_drop_patch {
        current = random_drop_patch(&current, rng, config)?;
    }
    if config.enable_rotation {
        current = random_rotation(&current, rng, config);
    }
    if config.enable_flip {
        current = random_flip(&current, rng, config);
    }
    if config.enable_resample {
        current = random_resample(&current, config.target_points, rng)?;
    }
    Ok(current)
}

/// Builds the two augmented views of one sample from independent streams.
pub fn make_views(
    pc: &PointCloud,
    rng_view1: &mut RngStream,
    rng_view2: &mut RngStream,
    config: &AugmentationConfig,
) -> Result<(PointCloud, PointCloud)> {
    Ok((
        augment_view(pc, rng_view1, config)?,
        augment_view(pc, rng_view2, config)?,
    ))
}
