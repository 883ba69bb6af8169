//! Depth maps, point clouds, voxel grids and the sampling primitives the
//! point encoder is built on.
//!
//! All operations here are pure functions with deterministic tie rules, so
//! downstream consumers (farthest-point sampling, grouping, encoders) are
//! invariant to the order points arrive in.

mod io;

pub use io::{read_pcl1, read_pgm16, write_pcl1, write_pgm16};

use crate::error::{Error, Result};

/// Pinhole camera parameters in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Precondition(format!(
                "focal lengths must be positive: fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0..self.width as f64).contains(&self.cx)
            || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(Error::Precondition(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Single-view depth scan; depth in meters, 0 marks an invalid pixel.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub intrinsics: CameraIntrinsics,
    depths: Vec<f64>,
}

impl DepthMap {
    pub fn new(intrinsics: CameraIntrinsics, depths: Vec<f64>) -> Result<Self> {
        intrinsics.validate()?;
        if depths.len() != intrinsics.width * intrinsics.height {
            return Err(Error::Precondition(format!(
                "depth buffer has {} values for a {}x{} image",
                depths.len(),
                intrinsics.width,
                intrinsics.height
            )));
        }
        if depths.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Precondition(
                "depths must be finite and non-negative".into(),
            ));
        }
        Ok(DepthMap { intrinsics, depths })
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.depths[v * self.intrinsics.width + u]
    }

    pub fn valid_pixels(&self) -> usize {
        self.depths.iter().filter(|d| **d > 0.0).count()
    }
}

/// Points in meters with optional per-point RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, colors: Option<Vec<[f64; 3]>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateInput("empty point cloud".into()));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Precondition("non-finite point coordinate".into()));
        }
        if let Some(ref cols) = colors {
            if cols.len() != points.len() {
                return Err(Error::Precondition(format!(
                    "{} colors for {} points",
                    cols.len(),
                    points.len()
                )));
            }
        }
        Ok(PointCloud { points, colors })
    }

    pub fn from_points(points: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(points, None)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[[f64; 3]]> {
        self.colors.as_deref()
    }

    /// Sub-cloud at the given indices; colors follow points.
    pub fn select(&self, indices: &[usize]) -> Result<PointCloud> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let colors = self
            .colors
            .as_ref()
            .map(|cols| indices.iter().map(|&i| cols[i]).collect());
        PointCloud::new(points, colors)
    }

    /// Apply a rigid map to every point, keeping colors attached.
    pub fn map_points(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|&p| f(p)).collect(),
            colors: self.colors.clone(),
        }
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }
}

/// Dense occupancy grid with per-cell mean color.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    occupancy: Vec<f64>,
    rgb: Vec<[f64; 3]>,
}

impl VoxelGrid {
    /// Grid with no occupied cells (rgb all zero by the type invariant).
    pub fn empty(dims: [usize; 3], voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        if voxel_size <= 0.0 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Precondition(format!(
                "bad grid geometry: dims {dims:?}, voxel_size {voxel_size}"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(VoxelGrid {
            dims,
            voxel_size,
            origin,
            occupancy: vec![0.0; n],
            rgb: vec![[0.0; 3]; n],
        })
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Row-major flat index for cell `(x, y, z)`.
    pub fn flat_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn occupancy(&self) -> &[f64] {
        &self.occupancy
    }

    pub fn rgb(&self) -> &[[f64; 3]] {
        &self.rgb
    }

    pub fn occupied_cells(&self) -> usize {
        self.occupancy.iter().filter(|o| **o > 0.0).count()
    }
}

fn lex_less(a: &[f64; 3], b: &[f64; 3]) -> bool {
    (a[0], a[1], a[2]) < (b[0], b[1], b[2])
}

/// Per-axis min/max corners of a cloud.
pub fn bounding_box(pc: &PointCloud) -> ([f64; 3], [f64; 3]) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in pc.points() {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

/// Diagonal length of the bounding box; the scale reference for relative
/// grouping radii.
pub fn scene_scale(pc: &PointCloud) -> f64 {
    let (lo, hi) = bounding_box(pc);
    let mut sq = 0.0;
    for a in 0..3 {
        sq += (hi[a] - lo[a]).powi(2);
    }
    sq.sqrt()
}

/// Voxel edge length that lets `dims` cover the cloud's bounding box:
/// the preferred size when the scene already fits, otherwise just large
/// enough per the widest axis.
pub fn fit_voxel_size(pc: &PointCloud, dims: [usize; 3], preferred: f64) -> f64 {
    let (lo, hi) = bounding_box(pc);
    let mut needed = 0.0f64;
    for a in 0..3 {
        needed = needed.max((hi[a] - lo[a]) / dims[a] as f64);
    }
    preferred.max(needed)
}

/// Back-project every valid pixel through the pinhole model:
/// `x = (u - cx) * d / fx`, `y = (v - cy) * d / fy`, `z = d`.
pub fn unproject(depth: &DepthMap) -> Result<PointCloud> {
    let intr = &depth.intrinsics;
    let mut points = Vec::with_capacity(depth.valid_pixels());
    for v in 0..intr.height {
        for u in 0..intr.width {
            let d = depth.at(u, v);
            if d > 0.0 {
                points.push([
                    (u as f64 - intr.cx) * d / intr.fx,
                    (v as f64 - intr.cy) * d / intr.fy,
                    d,
                ]);
            }
        }
    }
    if points.is_empty() {
        return Err(Error::DegenerateInput(
            "depth map has no valid pixels".into(),
        ));
    }
    PointCloud::from_points(points)
}

/// Bin points into a grid anchored at the cloud's min corner. Out-of-range
/// points clamp into the boundary cell, so nothing is dropped. Cell color is
/// the mean of its points (zero when the cloud has no colors).
pub fn voxelize(pc: &PointCloud, voxel_size: f64, dims: [usize; 3]) -> Result<VoxelGrid> {
    if voxel_size <= 0.0 {
        return Err(Error::Precondition(format!(
            "voxel_size {voxel_size} must be positive"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Precondition(format!("zero dim in {dims:?}")));
    }
    let (origin, _) = bounding_box(pc);
    let n_cells = dims[0] * dims[1] * dims[2];
    let mut occupancy = vec![0.0; n_cells];
    let mut rgb_sum = vec![[0.0f64; 3]; n_cells];
    let mut counts = vec![0usize; n_cells];

    for (i, p) in pc.points().iter().enumerate() {
        let mut cell = [0usize; 3];
        for a in 0..3 {
            let idx = ((p[a] - origin[a]) / voxel_size).floor();
            cell[a] = (idx.max(0.0) as usize).min(dims[a] - 1);
        }
        let flat = (cell[0] * dims[1] + cell[1]) * dims[2] + cell[2];
        occupancy[flat] = 1.0;
        counts[flat] += 1;
        if let Some(cols) = pc.colors() {
            for a in 0..3 {
                rgb_sum[flat][a] += cols[i][a];
            }
        }
    }

    let rgb = rgb_sum
        .into_iter()
        .zip(&counts)
        .map(|(sum, &c)| {
            if c > 0 && pc.colors().is_some() {
                [sum[0] / c as f64, sum[1] / c as f64, sum[2] / c as f64]
            } else {
                [0.0; 3]
            }
        })
        .collect();

    Ok(VoxelGrid {
        dims,
        voxel_size,
        origin,
        occupancy,
        rgb,
    })
}

/// Greedy max-min subsampling. The first seed is the lexicographically
/// smallest point; every max-min tie also breaks toward the
/// lexicographically smallest coordinates, so the selected point set depends
/// only on the input as a set.
pub fn farthest_point_sample(pc: &PointCloud, n: usize) -> Result<Vec<usize>> {
    let points = pc.points();
    if n == 0 || n > points.len() {
        return Err(Error::Precondition(format!(
            "cannot sample {n} of {} points",
            points.len()
        )));
    }
    let mut seed = 0usize;
    for (i, p) in points.iter().enumerate() {
        if lex_less(p, &points[seed]) {
            seed = i;
        }
    }
    let mut selected = Vec::with_capacity(n);
    selected.push(seed);
    let mut min_sq = vec![f64::INFINITY; points.len()];
    let mut last = seed;
    while selected.len() < n {
        let lp = points[last];
        for (i, p) in points.iter().enumerate() {
            let d = (p[0] - lp[0]).powi(2) + (p[1] - lp[1]).powi(2) + (p[2] - lp[2]).powi(2);
            if d < min_sq[i] {
                min_sq[i] = d;
            }
        }
        let mut best = usize::MAX;
        for (i, p) in points.iter().enumerate() {
            if min_sq[i] == 0.0 {
                continue;
            }
            if best == usize::MAX
                || min_sq[i] > min_sq[best]
                || (min_sq[i] == min_sq[best] && lex_less(p, &points[best]))
            {
                best = i;
            }
        }
        if best == usize::MAX {
            // All remaining points coincide with selected ones; pad with
            // duplicates so the caller still gets n indices.
            best = seed;
        }
        selected.push(best);
        last = best;
    }
    Ok(selected)
}

/// For each center, the up-to-`max_k` nearest points within `radius`,
/// ordered by `(distance, lexicographic coordinates)`. A center with no
/// neighbor in range falls back to its single globally nearest point, so
/// every group is non-empty.
pub fn ball_query(
    pc: &PointCloud,
    centers: &[[f64; 3]],
    radius: f64,
    max_k: usize,
) -> Result<Vec<Vec<usize>>> {
    if radius <= 0.0 {
        return Err(Error::Precondition(format!(
            "radius {radius} must be positive"
        )));
    }
    if max_k == 0 {
        return Err(Error::Precondition("max_k must be at least 1".into()));
    }
    let points = pc.points();
    let radius_sq = radius * radius;
    let mut groups = Vec::with_capacity(centers.len());
    for c in centers {
        let mut in_range: Vec<(f64, usize)> = Vec::new();
        let mut nearest = (f64::INFINITY, 0usize);
        for (i, p) in points.iter().enumerate() {
            let d = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d < nearest.0 || (d == nearest.0 && lex_less(p, &points[nearest.1])) {
                nearest = (d, i);
            }
            if d <= radius_sq {
                in_range.push((d, i));
            }
        }
        if in_range.is_empty() {
            groups.push(vec![nearest.1]);
            continue;
        }
        in_range.sort_by(|(da, ia), (db, ib)| {
            da.partial_cmp(db)
                .expect("finite distances")
                .then_with(|| {
                    let (pa, pb) = (&points[*ia], &points[*ib]);
                    (pa[0], pa[1], pa[2])
                        .partial_cmp(&(pb[0], pb[1], pb[2]))
                        .expect("finite coordinates")
                })
        });
        in_range.truncate(max_k);
        groups.push(in_range.into_iter().map(|(_, i)| i).collect());
    }
    Ok(groups)
}
