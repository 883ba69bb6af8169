//! Procedural single-view depth scans: a floor, two walls and a handful of
//! primitive objects rendered by per-pixel ray casting against analytic
//! shapes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::rng::{Domain, RngStream};

const HIT_EPS: f64 = 1e-9;

/// Object classes the generator can place. The first entry of a scene's
/// object list is the dominant (largest, label-defining) object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Box,
    Sphere,
    Cylinder,
    Cone,
    TallBox,
    FlatBox,
    ThinCylinder,
    Dome,
}

/// Generator knobs; defaults give 48x48 scans of rooms with four shape
/// classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneConfig {
    /// Per-axis room extent in meters, sampled per scene.
    pub room_extent_range: [f64; 2],
    /// Distractor objects beyond the dominant one.
    pub distractor_count_range: [usize; 2],
    pub shape_classes: Vec<ShapeClass>,
    /// Characteristic object half-size in meters.
    pub object_size_range: [f64; 2],
    pub camera_height_range: [f64; 2],
    /// Downward pitch in radians.
    pub camera_pitch_range: [f64; 2],
    pub image_width: usize,
    pub image_height: usize,
    pub horizontal_fov_degrees: f64,
    /// Gaussian depth noise in meters; negatives after noise become invalid.
    pub noise_stddev: f64,
    pub wall_height: f64,
}

impl Default for SyntheticSceneConfig {
    fn default() -> Self {
        SyntheticSceneConfig {
            room_extent_range: [4.0, 7.0],
            distractor_count_range: [1, 4],
            shape_classes: vec![
                ShapeClass::Box,
                ShapeClass::Sphere,
                ShapeClass::Cylinder,
                ShapeClass::Cone,
            ],
            object_size_range: [0.35, 0.7],
            camera_height_range: [1.2, 2.2],
            camera_pitch_range: [0.35, 0.75],
            image_width: 48,
            image_height: 48,
            horizontal_fov_degrees: 62.0,
            noise_stddev: 0.004,
            wall_height: 2.8,
        }
    }
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_width < 32 || self.image_height < 32 {
            return Err(Error::Config(format!(
                "resolution {}x{} below the 32x32 minimum",
                self.image_width, self.image_height
            )));
        }
        if self.shape_classes.is_empty() || self.shape_classes.len() > 8 {
            return Err(Error::Config(format!(
                "{} shape classes, need 1..=8",
                self.shape_classes.len()
            )));
        }
        for (name, r) in [
            ("room_extent_range", self.room_extent_range),
            ("object_size_range", self.object_size_range),
            ("camera_height_range", self.camera_height_range),
            ("camera_pitch_range", self.camera_pitch_range),
        ] {
            if r[0] > r[1] || r[0] <= 0.0 {
                return Err(Error::Config(format!("{name} {r:?} ill-ordered")));
            }
        }
        if self.distractor_count_range[0] > self.distractor_count_range[1] {
            return Err(Error::Config("distractor_count_range ill-ordered".into()));
        }
        if self.noise_stddev < 0.0 {
            return Err(Error::Config("noise_stddev must be >= 0".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        let fov = self.horizontal_fov_degrees.to_radians();
        let fx = self.image_width as f64 / (2.0 * (fov / 2.0).tan());
        CameraIntrinsics {
            fx,
            fy: fx,
            cx: self.image_width as f64 / 2.0,
            cy: self.image_height as f64 / 2.0,
            width: self.image_width,
            height: self.image_height,
        }
    }
}

/// World-space camera pose: right/down/forward orthonormal basis.
#[derive(Debug, Clone, Copy)]
pub struct CameraPose {
    pub position: [f64; 3],
    pub right: [f64; 3],
    pub down: [f64; 3],
    pub forward: [f64; 3],
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl CameraPose {
    /// Standard look-at with world +z up; image-down maps toward world-down.
    pub fn look_at(position: [f64; 3], target: [f64; 3]) -> Self {
        let forward = normalize(sub(target, position));
        let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
        let down = cross(forward, right);
        CameraPose {
            position,
            right,
            down,
            forward,
        }
    }

    /// World direction of the ray through pixel `(u, v)`, scaled so the
    /// ray parameter equals camera-frame z-depth.
    fn pixel_ray(&self, intr: &CameraIntrinsics, u: usize, v: usize) -> [f64; 3] {
        let dx = (u as f64 - intr.cx) / intr.fx;
        let dy = (v as f64 - intr.cy) / intr.fy;
        [
            dx * self.right[0] + dy * self.down[0] + self.forward[0],
            dx * self.right[1] + dy * self.down[1] + self.forward[1],
            dx * self.right[2] + dy * self.down[2] + self.forward[2],
        ]
    }
}

/// Analytic shapes the caster understands. Everything is axis-aligned in
/// world space with +z up.
#[derive(Debug, Clone)]
pub enum Primitive {
    /// Horizontal rectangle at height `z` (the floor).
    RectZ { z: f64, x: [f64; 2], y: [f64; 2] },
    /// Vertical rectangle perpendicular to x (a wall).
    RectX { x: f64, y: [f64; 2], z: [f64; 2] },
    /// Vertical rectangle perpendicular to y (a wall).
    RectY { y: f64, x: [f64; 2], z: [f64; 2] },
    Aabb { min: [f64; 3], max: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
    /// Capped vertical cylinder spanning `z[0]..z[1]`.
    Cylinder { cx: f64, cy: f64, radius: f64, z: [f64; 2] },
    /// Vertical cone: base disc of `radius` at `base_z`, apex `height` above.
    Cone { cx: f64, cy: f64, base_z: f64, radius: f64, height: f64 },
}

impl Primitive {
    /// Smallest ray parameter `t > eps` hitting the shape, if any.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Primitive::RectZ { z, x, y } => {
                if d[2].abs() < 1e-15 {
                    return None;
                }
                let t = (z - o[2]) / d[2];
                let (px, py) = (o[0] + t * d[0], o[1] + t * d[1]);
                (t > HIT_EPS && px >= x[0] && px <= x[1] && py >= y[0] && py <= y[1])
                    .then_some(t)
            }
            Primitive::RectX { x, y, z } => {
                if d[0].abs() < 1e-15 {
                    return None;
                }
                let t = (x - o[0]) / d[0];
                let (py, pz) = (o[1] + t * d[1], o[2] + t * d[2]);
                (t > HIT_EPS && py >= y[0] && py <= y[1] && pz >= z[0] && pz <= z[1])
                    .then_some(t)
            }
            Primitive::RectY { y, x, z } => {
                if d[1].abs() < 1e-15 {
                    return None;
                }
                let t = (y - o[1]) / d[1];
                let (px, pz) = (o[0] + t * d[0], o[2] + t * d[2]);
                (t > HIT_EPS && px >= x[0] && px <= x[1] && pz >= z[0] && pz <= z[1])
                    .then_some(t)
            }
            Primitive::Aabb { min, max } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for a in 0..3 {
                    if d[a].abs() < 1e-15 {
                        if o[a] < min[a] || o[a] > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (min[a] - o[a]) / d[a];
                    let t2 = (max[a] - o[a]) / d[a];
                    let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                    t_enter = t_enter.max(lo);
                    t_exit = t_exit.min(hi);
                }
                (t_enter > HIT_EPS && t_enter <= t_exit).then_some(t_enter)
            }
            Primitive::Sphere { center, radius } => {
                let oc = sub(o, center);
                let a = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                let b = 2.0 * (oc[0] * d[0] + oc[1] * d[1] + oc[2] * d[2]);
                let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sqrt_disc = disc.sqrt();
                let t1 = (-b - sqrt_disc) / (2.0 * a);
                let t2 = (-b + sqrt_disc) / (2.0 * a);
                if t1 > HIT_EPS {
                    Some(t1)
                } else if t2 > HIT_EPS {
                    Some(t2)
                } else {
                    None
                }
            }
            Primitive::Cylinder { cx, cy, radius, z } => {
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > HIT_EPS && best.map_or(true, |b| t < b) {
                        best = Some(t);
                    }
                };
                // Side surface.
                let (ox, oy) = (o[0] - cx, o[1] - cy);
                let a = d[0] * d[0] + d[1] * d[1];
                if a > 1e-15 {
                    let b = 2.0 * (ox * d[0] + oy * d[1]);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sqrt_disc = disc.sqrt();
                        for t in [(-b - sqrt_disc) / (2.0 * a), (-b + sqrt_disc) / (2.0 * a)] {
                            let pz = o[2] + t * d[2];
                            if pz >= z[0] && pz <= z[1] {
                                consider(t);
                            }
                        }
                    }
                }
                // Caps.
                if d[2].abs() > 1e-15 {
                    for zc in z {
                        let t = (zc - o[2]) / d[2];
                        let (px, py) = (o[0] + t * d[0] - cx, o[1] + t * d[1] - cy);
                        if px * px + py * py <= radius * radius {
                            consider(t);
                        }
                    }
                }
                best
            }
            Primitive::Cone {
                cx,
                cy,
                base_z,
                radius,
                height,
            } => {
                // Surface: px^2 + py^2 = k^2 (apex_z - pz)^2, pz in base..apex.
                let k = radius / height;
                let apex_z = base_z + height;
                let (ox, oy) = (o[0] - cx, o[1] - cy);
                let w = apex_z - o[2];
                let a = d[0] * d[0] + d[1] * d[1] - k * k * d[2] * d[2];
                let b = 2.0 * (ox * d[0] + oy * d[1]) + 2.0 * k * k * d[2] * w;
                let c = ox * ox + oy * oy - k * k * w * w;
                let mut best: Option<f64> = None;
                let mut consider = |t: f64| {
                    if t > HIT_EPS {
                        let pz = o[2] + t * d[2];
                        if pz >= base_z && pz <= apex_z && best.map_or(true, |bt| t < bt) {
                            best = Some(t);
                        }
                    }
                };
                if a.abs() < 1e-15 {
                    if b.abs() > 1e-15 {
                        consider(-c / b);
                    }
                } else {
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sqrt_disc = disc.sqrt();
                        consider((-b - sqrt_disc) / (2.0 * a));
                        consider((-b + sqrt_disc) / (2.0 * a));
                    }
                }
                best
            }
        }
    }
}

/// Casts one ray per pixel; returns z-depths (0 = miss) and the index of
/// the nearest-hit primitive per pixel.
pub fn render_depth(
    pose: &CameraPose,
    intr: &CameraIntrinsics,
    primitives: &[Primitive],
) -> (Vec<f64>, Vec<Option<usize>>) {
    let mut depths = vec![0.0; intr.width * intr.height];
    let mut hits = vec![None; intr.width * intr.height];
    for v in 0..intr.height {
        for u in 0..intr.width {
            let dir = pose.pixel_ray(intr, u, v);
            let mut best = f64::INFINITY;
            let mut best_id = None;
            for (i, prim) in primitives.iter().enumerate() {
                if let Some(t) = prim.intersect(pose.position, dir) {
                    if t < best {
                        best = t;
                        best_id = Some(i);
                    }
                }
            }
            if best_id.is_some() {
                depths[v * intr.width + u] = best;
                hits[v * intr.width + u] = best_id;
            }
        }
    }
    (depths, hits)
}

fn make_object(class: ShapeClass, x: f64, y: f64, s: f64) -> Primitive {
    match class {
        ShapeClass::Box => Primitive::Aabb {
            min: [x - s, y - s, 0.0],
            max: [x + s, y + s, 2.0 * s],
        },
        ShapeClass::TallBox => Primitive::Aabb {
            min: [x - 0.5 * s, y - 0.5 * s, 0.0],
            max: [x + 0.5 * s, y + 0.5 * s, 3.0 * s],
        },
        ShapeClass::FlatBox => Primitive::Aabb {
            min: [x - 1.4 * s, y - 1.4 * s, 0.0],
            max: [x + 1.4 * s, y + 1.4 * s, 0.6 * s],
        },
        ShapeClass::Sphere => Primitive::Sphere {
            center: [x, y, s],
            radius: s,
        },
        ShapeClass::Dome => Primitive::Sphere {
            center: [x, y, 0.0],
            radius: 1.3 * s,
        },
        ShapeClass::Cylinder => Primitive::Cylinder {
            cx: x,
            cy: y,
            radius: 0.7 * s,
            z: [0.0, 2.0 * s],
        },
        ShapeClass::ThinCylinder => Primitive::Cylinder {
            cx: x,
            cy: y,
            radius: 0.28 * s,
            z: [0.0, 2.8 * s],
        },
        ShapeClass::Cone => Primitive::Cone {
            cx: x,
            cy: y,
            base_z: 0.0,
            radius: s,
            height: 2.0 * s,
        },
    }
}

/// Minimum fraction of pixels the dominant object must cover for the scene
/// label to be trustworthy.
const MIN_DOMINANT_FRACTION: f64 = 0.02;

/// Renders one scene; the label indexes into `config.shape_classes`.
pub fn generate_scene(
    config: &SyntheticSceneConfig,
    global_seed: u64,
    scene_index: u64,
) -> Result<(DepthMap, usize)> {
    config.validate()?;
    let mut rng = RngStream::new(global_seed, Domain::Scene, scene_index, 0);
    let intr = config.intrinsics();

    let ex = rng.range(config.room_extent_range[0], config.room_extent_range[1]);
    let ey = rng.range(config.room_extent_range[0], config.room_extent_range[1]);
    let (hx, hy) = (ex / 2.0, ey / 2.0);

    let mut primitives = vec![
        Primitive::RectZ {
            z: 0.0,
            x: [-hx, hx],
            y: [-hy, hy],
        },
        Primitive::RectX {
            x: hx,
            y: [-hy, hy],
            z: [0.0, config.wall_height],
        },
        Primitive::RectY {
            y: hy,
            x: [-hx, hx],
            z: [0.0, config.wall_height],
        },
    ];
    let room_prims = primitives.len();

    // Dominant object first: boosted size, placed near the room center.
    let label = rng.index(config.shape_classes.len());
    let dominant_size = 1.6 * rng.range(config.object_size_range[0], config.object_size_range[1]);
    let dom_x = rng.range(-0.25 * hx, 0.25 * hx);
    let dom_y = rng.range(-0.25 * hy, 0.25 * hy);
    primitives.push(make_object(
        config.shape_classes[label],
        dom_x,
        dom_y,
        dominant_size,
    ));
    let dominant_id = primitives.len() - 1;

    let n_distractors = if config.distractor_count_range[1] > config.distractor_count_range[0] {
        config.distractor_count_range[0]
            + rng.index(config.distractor_count_range[1] - config.distractor_count_range[0] + 1)
    } else {
        config.distractor_count_range[0]
    };
    for _ in 0..n_distractors {
        let class = config.shape_classes[rng.index(config.shape_classes.len())];
        let size = rng.range(config.object_size_range[0], config.object_size_range[1]);
        // Keep distractors away from the dominant object's spot.
        let (mut x, mut y) = (0.0, 0.0);
        for _ in 0..20 {
            x = rng.range(-0.7 * hx, 0.7 * hx);
            y = rng.range(-0.7 * hy, 0.7 * hy);
            let dist = ((x - dom_x).powi(2) + (y - dom_y).powi(2)).sqrt();
            if dist > dominant_size + size + 0.2 {
                break;
            }
        }
        primitives.push(make_object(class, x, y, size));
    }

    let min_dominant_pixels =
        ((intr.width * intr.height) as f64 * MIN_DOMINANT_FRACTION).ceil() as usize;
    for attempt in 0..10 {
        let height = rng.range(config.camera_height_range[0], config.camera_height_range[1]);
        let pitch = rng.range(config.camera_pitch_range[0], config.camera_pitch_range[1]);
        let yaw_jitter = rng.range(-0.25, 0.25);
        // Camera in the open corner (negative x/y side), looking at the
        // dominant object.
        let cam_dist = rng.range(0.75, 0.95);
        let position = [
            -hx * cam_dist * (1.0 + yaw_jitter * 0.2),
            -hy * cam_dist * (1.0 - yaw_jitter * 0.2),
            height,
        ];
        let look_dist = ((position[0] - dom_x).powi(2) + (position[1] - dom_y).powi(2)).sqrt();
        let target_z = (height - look_dist * pitch.tan()).min(dominant_size);
        let target = [dom_x, dom_y, target_z.max(0.0)];
        let pose = CameraPose::look_at(position, target);

        let (mut depths, hit_ids) = render_depth(&pose, &intr, &primitives);
        let dominant_pixels = hit_ids
            .iter()
            .filter(|h| **h == Some(dominant_id))
            .count();
        let any_valid = depths.iter().any(|d| *d > 0.0);
        if !any_valid || dominant_pixels < min_dominant_pixels {
            if attempt == 9 {
                return Err(Error::DegenerateInput(format!(
                    "scene {scene_index}: dominant object not visible after 10 poses"
                )));
            }
            continue;
        }
        if config.noise_stddev > 0.0 {
            for d in depths.iter_mut() {
                if *d > 0.0 {
                    *d = (*d + rng.normal(0.0, config.noise_stddev)).max(0.0);
                }
            }
        }
        let _ = room_prims;
        let map = DepthMap::new(intr, depths)?;
        return Ok((map, label));
    }
    unreachable!("loop returns or errors");
}

#[cfg(test)]
mod tests {
    use super::*;

    fn center_pixel_depth(depths: &[f64], intr: &CameraIntrinsics) -> f64 {
        depths[(intr.cy as usize) * intr.width + intr.cx as usize]
    }

    #[test]
    fn unit_sphere_on_axis_center_depth_is_two() {
        let intr = SyntheticSceneConfig::default().intrinsics();
        let pose = CameraPose::look_at([0.0, 0.0, 1.0], [3.0, 0.0, 1.0]);
        let prims = vec![Primitive::Sphere {
            center: [3.0, 0.0, 1.0],
            radius: 1.0,
        }];
        let (depths, _) = render_depth(&pose, &intr, &prims);
        // cx = width/2 lands exactly on the optical axis for even widths.
        let d = center_pixel_depth(&depths, &intr);
        assert!((d - 2.0).abs() < 1e-12, "center depth {d}");
    }

    #[test]
    fn perpendicular_wall_center_depth_is_exact() {
        let intr = SyntheticSceneConfig::default().intrinsics();
        let pose = CameraPose::look_at([0.0, 0.0, 1.0], [2.0, 0.0, 1.0]);
        let prims = vec![Primitive::RectX {
            x: 2.0,
            y: [-10.0, 10.0],
            z: [0.0, 5.0],
        }];
        let (depths, _) = render_depth(&pose, &intr, &prims);
        let d = center_pixel_depth(&depths, &intr);
        assert!((d - 2.0).abs() < 1e-12, "center depth {d}");
        // Every hit is a z-depth of exactly 2 for a perpendicular plane.
        for &v in depths.iter().filter(|v| **v > 0.0) {
            assert!((v - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn box_face_depth_matches_closed_form() {
        let intr = SyntheticSceneConfig::default().intrinsics();
        let pose = CameraPose::look_at([0.0, 0.0, 0.5], [4.0, 0.0, 0.5]);
        let prims = vec![Primitive::Aabb {
            min: [2.5, -1.0, 0.0],
            max: [3.5, 1.0, 1.0],
        }];
        let (depths, _) = render_depth(&pose, &intr, &prims);
        let d = center_pixel_depth(&depths, &intr);
        assert!((d - 2.5).abs() < 1e-12);
    }

    #[test]
    fn cylinder_side_depth_matches_closed_form() {
        let intr = SyntheticSceneConfig::default().intrinsics();
        let pose = CameraPose::look_at([0.0, 0.0, 0.5], [5.0, 0.0, 0.5]);
        let prims = vec![Primitive::Cylinder {
            cx: 5.0,
            cy: 0.0,
            radius: 0.5,
            z: [0.0, 1.0],
        }];
        let (depths, _) = render_depth(&pose, &intr, &prims);
        let d = center_pixel_depth(&depths, &intr);
        assert!((d - 4.5).abs() < 1e-12);
    }

    #[test]
    fn cone_axis_hit_matches_closed_form() {
        let intr = SyntheticSceneConfig::default().intrinsics();
        // Looking horizontally at half height of a cone: surface radius
        // there is r/2, so the hit is at x = 4 - 0.25.
        let pose = CameraPose::look_at([0.0, 0.0, 0.5], [4.0, 0.0, 0.5]);
        let prims = vec![Primitive::Cone {
            cx: 4.0,
            cy: 0.0,
            base_z: 0.0,
            radius: 0.5,
            height: 1.0,
        }];
        let (depths, _) = render_depth(&pose, &intr, &prims);
        let d = center_pixel_depth(&depths, &intr);
        assert!((d - 3.75).abs() < 1e-12, "depth {d}");
    }

    #[test]
    fn generate_scene_is_deterministic() {
        let config = SyntheticSceneConfig::default();
        let (a, label_a) = generate_scene(&config, 42, 7).unwrap();
        let (b, label_b) = generate_scene(&config, 42, 7).unwrap();
        assert_eq!(label_a, label_b);
        assert_eq!(a.depths(), b.depths());
        let (c, _) = generate_scene(&config, 42, 8).unwrap();
        assert_ne!(a.depths(), c.depths());
    }

    #[test]
    fn generated_scenes_have_valid_depth_and_label() {
        let config = SyntheticSceneConfig::default();
        for i in 0..20 {
            let (map, label) = generate_scene(&config, 1, i).unwrap();
            assert!(label < config.shape_classes.len());
            assert!(map.valid_pixels() > 100);
            assert!(map.depths().iter().all(|d| d.is_finite() && *d >= 0.0));
        }
    }
}
