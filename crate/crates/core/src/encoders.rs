//! Format-specific encoders producing pooled, projected, unit-norm global
//! embeddings, plus the online/momentum parameter pairing.
//!
//! The point branch stacks set-abstraction layers (farthest-point sampling,
//! ball-query grouping, a shared per-point MLP on center-relative
//! coordinates, per-group max). The voxel branch stacks stride-2 kernel-3
//! convolutions built as matmul over gathered neighbor patches. Both end in
//! global max pooling, a two-layer projection head and L2 normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ball_query, farthest_point_sample, scene_scale, PointCloud, VoxelGrid};
use crate::rng::{Domain, RngStream};
use crate::tensor::{NodeId, Tape, Tensor};

/// Contrastive embedding width.
pub const EMBED_DIM: usize = 128;

/// Voxel input channels: occupancy plus RGB.
pub const VOXEL_IN_CHANNELS: usize = 4;

const CONV_KERNEL: usize = 3;
const CONV_STRIDE: usize = 2;
const CONV_PAD: usize = 1;

/// One set-abstraction stage: sample `n_centers`, group within
/// `radius_scale * scene_scale`, run the shared MLP, max-pool per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaLayerSpec {
    pub n_centers: usize,
    /// Grouping radius as a fraction of the bounding-box diagonal.
    pub radius_scale: f64,
    /// Channel widths of the shared MLP, before the width multiplier.
    pub widths: Vec<usize>,
    /// Points gathered per group (padded by repeating the nearest).
    pub group_size: usize,
}

/// Architecture of both branches; trainer-level config supplies the width
/// multiplier and grid dims.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub point_sa: Vec<SaLayerSpec>,
    pub voxel_channels: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            point_sa: vec![
                SaLayerSpec {
                    n_centers: 128,
                    radius_scale: 0.2,
                    widths: vec![32, 32, 64],
                    group_size: 16,
                },
                SaLayerSpec {
                    n_centers: 32,
                    radius_scale: 0.4,
                    widths: vec![64, 64, 128],
                    group_size: 16,
                },
                SaLayerSpec {
                    n_centers: 8,
                    radius_scale: 0.8,
                    widths: vec![128, 128, 256],
                    group_size: 8,
                },
            ],
            voxel_channels: vec![32, 64, 128],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.point_sa.is_empty() || self.voxel_channels.is_empty() {
            return Err(Error::Config("encoder stages must be non-empty".into()));
        }
        for pair in self.point_sa.windows(2) {
            if pair[1].n_centers >= pair[0].n_centers {
                return Err(Error::Config(format!(
                    "n_centers must strictly decrease: {} then {}",
                    pair[0].n_centers, pair[1].n_centers
                )));
            }
        }
        for layer in &self.point_sa {
            if layer.widths.is_empty()
                || layer.group_size == 0
                || layer.n_centers == 0
                || layer.radius_scale <= 0.0
            {
                return Err(Error::Config(format!("bad SA layer {layer:?}")));
            }
        }
        Ok(())
    }
}

/// Weight `[in, out]` and bias `[out]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    fn init(in_dim: usize, out_dim: usize, rng: &mut RngStream, trainable: bool) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let values: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| rng.range(-bound, bound))
            .collect();
        let mut weight = Tensor::new(vec![in_dim, out_dim], values).expect("shape agrees");
        let mut bias = Tensor::zeros(vec![out_dim]);
        weight.set_requires_grad(trainable);
        bias.set_requires_grad(trainable);
        LinearLayer { weight, bias }
    }
}

/// Point-branch parameters: one MLP per SA layer.
#[derive(Debug, Clone)]
pub struct PointEncoderParams {
    pub layers: Vec<SaLayerSpec>,
    pub mlps: Vec<Vec<LinearLayer>>,
    pub width_multiplier: usize,
    /// Pooled feature width after the last SA layer.
    pub feature_width: usize,
}

/// Voxel-branch parameters: one unfold-matmul convolution per stage.
#[derive(Debug, Clone)]
pub struct VoxelEncoderParams {
    pub dims: [usize; 3],
    pub channels: Vec<usize>,
    pub stages: Vec<LinearLayer>,
    pub feature_width: usize,
}

/// Two linear layers with a ReLU between, then (outside) L2 normalization.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub fc1: LinearLayer,
    pub fc2: LinearLayer,
}

/// Both branches plus their projection heads; one optimization unit.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub point: PointEncoderParams,
    pub point_head: ProjectionHead,
    pub voxel: VoxelEncoderParams,
    pub voxel_head: ProjectionHead,
}

/// Online encoder plus its slowly-trailing momentum copy.
///
/// The momentum tensors never require gradients; they are only ever written
/// by [`momentum_update`].
#[derive(Debug, Clone)]
pub struct ModelPair {
    pub online: DualEncoder,
    pub momentum: DualEncoder,
    pub momentum_coef: f64,
}

impl DualEncoder {
    /// Fresh parameters from the seeded stream. `trainable` distinguishes
    /// online from momentum copies.
    pub fn init(
        config: &EncoderConfig,
        width_multiplier: usize,
        voxel_dims: [usize; 3],
        seed: u64,
        trainable: bool,
    ) -> Result<Self> {
        config.validate()?;
        if width_multiplier == 0 {
            return Err(Error::Config("width_multiplier must be >= 1".into()));
        }
        let mut layer_counter = 0u64;
        let next_rng = |counter: &mut u64| {
            let rng = RngStream::new(seed, Domain::ParamInit, *counter, 0);
            *counter += 1;
            rng
        };

        let mut mlps = Vec::new();
        let mut in_dim = 3;
        for layer in &config.point_sa {
            let mut mlp = Vec::new();
            for &w in &layer.widths {
                let out_dim = w * width_multiplier;
                let mut rng = next_rng(&mut layer_counter);
                mlp.push(LinearLayer::init(in_dim, out_dim, &mut rng, trainable));
                in_dim = out_dim;
            }
            mlps.push(mlp);
            in_dim += 3; // next layer consumes relative coords concat features
        }
        let point_c = config.point_sa.last().expect("non-empty").widths.clone();
        let point_width = point_c.last().copied().expect("non-empty") * width_multiplier;

        let mut stages = Vec::new();
        let mut c_in = VOXEL_IN_CHANNELS;
        for &c_out in &config.voxel_channels {
            let mut rng = next_rng(&mut layer_counter);
            stages.push(LinearLayer::init(
                CONV_KERNEL.pow(3) * c_in,
                c_out,
                &mut rng,
                trainable,
            ));
            c_in = c_out;
        }
        let voxel_width = *config.voxel_channels.last().expect("non-empty");

        let head = |c: usize, counter: &mut u64| -> ProjectionHead {
            let mut rng1 = next_rng(counter);
            let fc1 = LinearLayer::init(c, c, &mut rng1, trainable);
            let mut rng2 = next_rng(counter);
            let fc2 = LinearLayer::init(c, EMBED_DIM, &mut rng2, trainable);
            ProjectionHead { fc1, fc2 }
        };
        let point_head = head(point_width, &mut layer_counter);
        let voxel_head = head(voxel_width, &mut layer_counter);

        Ok(DualEncoder {
            point: PointEncoderParams {
                layers: config.point_sa.clone(),
                mlps,
                width_multiplier,
                feature_width: point_width,
            },
            point_head,
            voxel: VoxelEncoderParams {
                dims: voxel_dims,
                channels: config.voxel_channels.clone(),
                stages,
                feature_width: voxel_width,
            },
            voxel_head,
        })
    }

    /// Tensors in a fixed, name-prefixed order. The order is the checkpoint
    /// serialization order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (li, mlp) in self.point.mlps.iter().enumerate() {
            for (mi, lin) in mlp.iter().enumerate() {
                out.push((format!("point.sa{li}.mlp{mi}.weight"), &lin.weight));
                out.push((format!("point.sa{li}.mlp{mi}.bias"), &lin.bias));
            }
        }
        for (name, lin) in [
            ("point_head.fc1", &self.point_head.fc1),
            ("point_head.fc2", &self.point_head.fc2),
        ] {
            out.push((format!("{name}.weight"), &lin.weight));
            out.push((format!("{name}.bias"), &lin.bias));
        }
        for (si, lin) in self.voxel.stages.iter().enumerate() {
            out.push((format!("voxel.conv{si}.weight"), &lin.weight));
            out.push((format!("voxel.conv{si}.bias"), &lin.bias));
        }
        for (name, lin) in [
            ("voxel_head.fc1", &self.voxel_head.fc1),
            ("voxel_head.fc2", &self.voxel_head.fc2),
        ] {
            out.push((format!("{name}.weight"), &lin.weight));
            out.push((format!("{name}.bias"), &lin.bias));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (li, mlp) in self.point.mlps.iter_mut().enumerate() {
            for (mi, lin) in mlp.iter_mut().enumerate() {
                out.push((format!("point.sa{li}.mlp{mi}.weight"), &mut lin.weight));
                out.push((format!("point.sa{li}.mlp{mi}.bias"), &mut lin.bias));
            }
        }
        for (name, lin) in [
            ("point_head.fc1", &mut self.point_head.fc1),
            ("point_head.fc2", &mut self.point_head.fc2),
        ] {
            out.push((format!("{name}.weight"), &mut lin.weight));
            out.push((format!("{name}.bias"), &mut lin.bias));
        }
        for (si, lin) in self.voxel.stages.iter_mut().enumerate() {
            out.push((format!("voxel.conv{si}.weight"), &mut lin.weight));
            out.push((format!("voxel.conv{si}.bias"), &mut lin.bias));
        }
        for (name, lin) in [
            ("voxel_head.fc1", &mut self.voxel_head.fc1),
            ("voxel_head.fc2", &mut self.voxel_head.fc2),
        ] {
            out.push((format!("{name}.weight"), &mut lin.weight));
            out.push((format!("{name}.bias"), &mut lin.bias));
        }
        out
    }
}

impl ModelPair {
    /// Momentum copy starts as an exact clone of the online parameters.
    pub fn new(online: DualEncoder, momentum_coef: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum_coef) {
            return Err(Error::Precondition(format!(
                "momentum coefficient {momentum_coef} outside [0, 1]"
            )));
        }
        let mut momentum = online.clone();
        for (_, t) in momentum.named_params_mut() {
            t.set_requires_grad(false);
        }
        Ok(ModelPair {
            online,
            momentum,
            momentum_coef,
        })
    }
}

/// `theta_m <- m * theta_m + (1 - m) * theta_online`, elementwise over the
/// structurally matched parameter lists.
pub fn momentum_update(pair: &mut ModelPair) -> Result<()> {
    let m = pair.momentum_coef;
    let online = pair.online.named_params();
    let mut momentum = pair.momentum.named_params_mut();
    if online.len() != momentum.len() {
        return Err(Error::Precondition(format!(
            "parameter count mismatch: online {} vs momentum {}",
            online.len(),
            momentum.len()
        )));
    }
    for ((on_name, on), (mo_name, mo)) in online.iter().zip(momentum.iter_mut()) {
        if on_name != mo_name || on.shape() != mo.shape() {
            return Err(Error::Precondition(format!(
                "structural mismatch at {on_name}/{mo_name}"
            )));
        }
        for (mv, &ov) in mo.values_mut().iter_mut().zip(on.values()) {
            *mv = m * *mv + (1.0 - m) * ov;
        }
    }
    Ok(())
}

// ── graph construction ──────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub weight: NodeId,
    pub bias: NodeId,
}

fn insert_linear(tape: &mut Tape, lin: &LinearLayer) -> LinearIds {
    LinearIds {
        weight: tape.leaf(&lin.weight),
        bias: tape.leaf(&lin.bias),
    }
}

/// Point branch inserted on a tape: parameter node ids plus the specs
/// needed to run the forward pass.
pub struct PointGraph {
    pub(crate) layers: Vec<SaLayerSpec>,
    pub(crate) mlps: Vec<Vec<LinearIds>>,
    pub(crate) head: [LinearIds; 2],
    pub(crate) feature_width: usize,
}

pub struct VoxelGraph {
    pub(crate) dims: [usize; 3],
    pub(crate) stages: Vec<LinearIds>,
    pub(crate) head: [LinearIds; 2],
}

/// Both branch graphs plus parameter node ids in `named_params` order.
pub struct EncoderGraphs {
    pub point: PointGraph,
    pub voxel: VoxelGraph,
    pub param_ids: Vec<NodeId>,
}

impl DualEncoder {
    /// Insert every parameter once; the returned id list is aligned with
    /// [`DualEncoder::named_params`], which is what the optimizer consumes.
    pub fn insert_all(&self, tape: &mut Tape) -> EncoderGraphs {
        let point = self.insert_point(tape);
        let voxel = self.insert_voxel(tape);
        let mut param_ids = Vec::new();
        for mlp in &point.mlps {
            for lin in mlp {
                param_ids.push(lin.weight);
                param_ids.push(lin.bias);
            }
        }
        for lin in &point.head {
            param_ids.push(lin.weight);
            param_ids.push(lin.bias);
        }
        for lin in &voxel.stages {
            param_ids.push(lin.weight);
            param_ids.push(lin.bias);
        }
        for lin in &voxel.head {
            param_ids.push(lin.weight);
            param_ids.push(lin.bias);
        }
        debug_assert_eq!(param_ids.len(), self.named_params().len());
        EncoderGraphs {
            point,
            voxel,
            param_ids,
        }
    }

    pub fn insert_point(&self, tape: &mut Tape) -> PointGraph {
        PointGraph {
            layers: self.point.layers.clone(),
            mlps: self
                .point
                .mlps
                .iter()
                .map(|mlp| mlp.iter().map(|lin| insert_linear(tape, lin)).collect())
                .collect(),
            head: [
                insert_linear(tape, &self.point_head.fc1),
                insert_linear(tape, &self.point_head.fc2),
            ],
            feature_width: self.point.feature_width,
        }
    }

    pub fn insert_voxel(&self, tape: &mut Tape) -> VoxelGraph {
        VoxelGraph {
            dims: self.voxel.dims,
            stages: self
                .voxel
                .stages
                .iter()
                .map(|lin| insert_linear(tape, lin))
                .collect(),
            head: [
                insert_linear(tape, &self.voxel_head.fc1),
                insert_linear(tape, &self.voxel_head.fc2),
            ],
        }
    }
}

/// Pooled backbone feature and projected unit-norm embedding for one input.
#[derive(Debug, Clone, Copy)]
pub struct EncodeOut {
    /// Pre-projection global feature, shape `[1, C]`.
    pub pooled: NodeId,
    /// L2-normalized 128-d embedding, shape `[1, 128]`.
    pub embedding: NodeId,
}

fn apply_head(tape: &mut Tape, head: &[LinearIds; 2], pooled: NodeId) -> Result<NodeId> {
    let h = tape.matmul(pooled, head[0].weight)?;
    let h = tape.bias_add(h, head[0].bias)?;
    let h = tape.relu(h)?;
    let e = tape.matmul(h, head[1].weight)?;
    let e = tape.bias_add(e, head[1].bias)?;
    tape.l2_normalize_rows(e)
}

/// Encode a point cloud through the SA stack and projection head.
pub fn point_encode(tape: &mut Tape, graph: &PointGraph, pc: &PointCloud) -> Result<EncodeOut> {
    let scale = scene_scale(pc).max(1e-9);
    let mut positions: Vec<[f64; 3]> = pc.points().to_vec();
    let mut features: Option<NodeId> = None;

    for (layer, mlp) in graph.layers.iter().zip(&graph.mlps) {
        let m = layer.n_centers;
        if positions.len() < m {
            return Err(Error::Precondition(format!(
                "point encoder needs >= {m} points, got {}",
                positions.len()
            )));
        }
        let stage_cloud = PointCloud::from_points(positions.clone())?;
        let center_idx = farthest_point_sample(&stage_cloud, m)?;
        let centers: Vec<[f64; 3]> = center_idx.iter().map(|&i| positions[i]).collect();
        let radius = layer.radius_scale * scale;
        let groups = ball_query(&stage_cloud, &centers, radius, layer.group_size)?;

        let k = layer.group_size;
        let mut flat_idx = Vec::with_capacity(m * k);
        let mut rel = Vec::with_capacity(m * k * 3);
        for (center, group) in centers.iter().zip(&groups) {
            for slot in 0..k {
                // Pad short groups by repeating the nearest neighbor; the
                // per-group max is unchanged by duplicates.
                let idx = group[slot.min(group.len() - 1)];
                flat_idx.push(idx);
                let p = positions[idx];
                rel.extend_from_slice(&[p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
            }
        }
        let rel_node = tape.constant(vec![m * k, 3], rel)?;
        let mut x = match features {
            None => rel_node,
            Some(f) => {
                let gathered = tape.gather_rows(f, &flat_idx)?;
                tape.concat(&[rel_node, gathered], 1)?
            }
        };
        for lin in mlp {
            x = tape.matmul(x, lin.weight)?;
            x = tape.bias_add(x, lin.bias)?;
            x = tape.relu(x)?;
        }
        let c_out = tape.shape(x)[1];
        let grouped = tape.reshape(x, vec![m, k, c_out])?;
        features = Some(tape.max_axis(grouped, 1)?);
        positions = centers;
    }

    let last = features.expect("at least one SA layer");
    let pooled_vec = tape.max_axis(last, 0)?;
    let pooled = tape.reshape(pooled_vec, vec![1, graph.feature_width])?;
    let embedding = apply_head(tape, &graph.head, pooled)?;
    Ok(EncodeOut { pooled, embedding })
}

fn conv_out_dim(d: usize) -> usize {
    (d + 2 * CONV_PAD - CONV_KERNEL) / CONV_STRIDE + 1
}

/// Neighbor gather indices for one stride-2 kernel-3 stage over an
/// x-major `[dx, dy, dz]` grid; out-of-range taps map to the zero row.
fn unfold_indices(dims: [usize; 3]) -> (Vec<usize>, [usize; 3]) {
    let out_dims = [
        conv_out_dim(dims[0]),
        conv_out_dim(dims[1]),
        conv_out_dim(dims[2]),
    ];
    let mut indices =
        Vec::with_capacity(out_dims[0] * out_dims[1] * out_dims[2] * CONV_KERNEL.pow(3));
    for ox in 0..out_dims[0] {
        for oy in 0..out_dims[1] {
            for oz in 0..out_dims[2] {
                for kx in 0..CONV_KERNEL {
                    for ky in 0..CONV_KERNEL {
                        for kz in 0..CONV_KERNEL {
                            let ix = (CONV_STRIDE * ox + kx) as isize - CONV_PAD as isize;
                            let iy = (CONV_STRIDE * oy + ky) as isize - CONV_PAD as isize;
                            let iz = (CONV_STRIDE * oz + kz) as isize - CONV_PAD as isize;
                            let in_range = ix >= 0
                                && iy >= 0
                                && iz >= 0
                                && (ix as usize) < dims[0]
                                && (iy as usize) < dims[1]
                                && (iz as usize) < dims[2];
                            indices.push(if in_range {
                                (ix as usize * dims[1] + iy as usize) * dims[2] + iz as usize
                            } else {
                                crate::tensor::GATHER_ZERO_ROW
                            });
                        }
                    }
                }
            }
        }
    }
    (indices, out_dims)
}

/// Encode a voxel grid through the strided convolution stack and head.
pub fn voxel_encode(tape: &mut Tape, graph: &VoxelGraph, grid: &VoxelGrid) -> Result<EncodeOut> {
    if grid.dims != graph.dims {
        return Err(Error::Precondition(format!(
            "grid dims {:?} do not match encoder dims {:?}",
            grid.dims, graph.dims
        )));
    }
    let cells = grid.cell_count();
    let mut input = Vec::with_capacity(cells * VOXEL_IN_CHANNELS);
    for (occ, rgb) in grid.occupancy().iter().zip(grid.rgb()) {
        input.push(*occ);
        input.extend_from_slice(rgb);
    }
    let mut x = tape.constant(vec![cells, VOXEL_IN_CHANNELS], input)?;
    let mut dims = grid.dims;
    for stage in &graph.stages {
        let (indices, out_dims) = unfold_indices(dims);
        let c_in = tape.shape(x)[1];
        let out_cells = out_dims[0] * out_dims[1] * out_dims[2];
        let gathered = tape.gather_rows(x, &indices)?;
        let patches = tape.reshape(gathered, vec![out_cells, CONV_KERNEL.pow(3) * c_in])?;
        let conv = tape.matmul(patches, stage.weight)?;
        let conv = tape.bias_add(conv, stage.bias)?;
        x = tape.relu(conv)?;
        dims = out_dims;
    }
    let c = tape.shape(x)[1];
    let pooled_vec = tape.max_axis(x, 0)?;
    let pooled = tape.reshape(pooled_vec, vec![1, c])?;
    let embedding = apply_head(tape, &graph.head, pooled)?;
    Ok(EncodeOut { pooled, embedding })
}

/// One-shot point encode on a private tape; returns (pooled, embedding).
pub fn encode_point_once(model: &DualEncoder, pc: &PointCloud) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let graph = model.insert_point(&mut tape);
    let out = point_encode(&mut tape, &graph, pc)?;
    Ok((tape.to_tensor(out.pooled), tape.to_tensor(out.embedding)))
}

/// One-shot voxel encode on a private tape; returns (pooled, embedding).
pub fn encode_voxel_once(model: &DualEncoder, grid: &VoxelGrid) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let graph = model.insert_voxel(&mut tape);
    let out = voxel_encode(&mut tape, &graph, grid)?;
    Ok((tape.to_tensor(out.pooled), tape.to_tensor(out.embedding)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::voxelize;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            point_sa: vec![
                SaLayerSpec {
                    n_centers: 16,
                    radius_scale: 0.3,
                    widths: vec![8, 16],
                    group_size: 8,
                },
                SaLayerSpec {
                    n_centers: 4,
                    radius_scale: 0.6,
                    widths: vec![16, 32],
                    group_size: 4,
                },
            ],
            voxel_channels: vec![8, 16],
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = RngStream::new(seed, Domain::Scene, 0, 0);
        PointCloud::from_points(
            (0..n)
                .map(|_| {
                    [
                        rng.range(-1.0, 1.0),
                        rng.range(-1.0, 1.0),
                        rng.range(0.0, 2.0),
                    ]
                })
                .collect(),
        )
        .unwrap()
    }

    fn tiny_model(seed: u64) -> DualEncoder {
        DualEncoder::init(&tiny_config(), 1, [8, 8, 8], seed, true).unwrap()
    }

    #[test]
    fn point_embedding_is_unit_norm_128() {
        let model = tiny_model(3);
        let pc = random_cloud(64, 5);
        let (pooled, emb) = encode_point_once(&model, &pc).unwrap();
        assert_eq!(emb.shape(), &[1, EMBED_DIM]);
        assert_eq!(pooled.shape(), &[1, 32]);
        let norm: f64 = emb.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn point_encode_is_permutation_invariant() {
        let model = tiny_model(4);
        let pc = random_cloud(48, 6);
        let mut reversed = pc.points().to_vec();
        reversed.reverse();
        let pc2 = PointCloud::from_points(reversed).unwrap();
        let (_, e1) = encode_point_once(&model, &pc).unwrap();
        let (_, e2) = encode_point_once(&model, &pc2).unwrap();
        assert_eq!(e1.values(), e2.values());
    }

    #[test]
    fn point_encode_is_translation_invariant() {
        let model = tiny_model(5);
        let pc = random_cloud(48, 7);
        let shifted = pc.map_points(|p| [p[0] + 3.5, p[1] - 1.25, p[2] + 10.0]);
        let (_, e1) = encode_point_once(&model, &pc).unwrap();
        let (_, e2) = encode_point_once(&model, &shifted).unwrap();
        for (a, b) in e1.values().iter().zip(e2.values()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn point_encode_rejects_too_few_points() {
        let model = tiny_model(6);
        let pc = random_cloud(8, 8); // first layer wants 16 centers
        let result = encode_point_once(&model, &pc);
        assert!(matches!(result, Err(Error::Precondition(_))));
    }

    #[test]
    fn voxel_embedding_is_unit_norm_128() {
        let model = tiny_model(7);
        let pc = random_cloud(64, 9);
        let grid = voxelize(&pc, 0.3, [8, 8, 8]).unwrap();
        let (pooled, emb) = encode_voxel_once(&model, &grid).unwrap();
        assert_eq!(emb.shape(), &[1, EMBED_DIM]);
        assert_eq!(pooled.shape(), &[1, 16]);
        let norm: f64 = emb.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_zero_grid_encodes_finite() {
        let model = tiny_model(8);
        let grid = VoxelGrid::empty([8, 8, 8], 0.1, [0.0; 3]).unwrap();
        let (_, emb) = encode_voxel_once(&model, &grid).unwrap();
        assert!(emb.is_finite());
        let norm: f64 = emb.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn voxel_dim_mismatch_is_precondition() {
        let model = tiny_model(9);
        let pc = random_cloud(32, 10);
        let grid = voxelize(&pc, 0.3, [4, 4, 4]).unwrap();
        assert!(matches!(
            encode_voxel_once(&model, &grid),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn momentum_update_identity_copy_and_convex() {
        let online = tiny_model(10);
        // m = 1: momentum unchanged.
        let mut pair = ModelPair::new(online.clone(), 1.0).unwrap();
        let before: Vec<f64> = pair.momentum.named_params()[0].1.values().to_vec();
        // Shift online weights so the update would be visible.
        for (_, t) in pair.online.named_params_mut() {
            for v in t.values_mut() {
                *v += 1.0;
            }
        }
        momentum_update(&mut pair).unwrap();
        assert_eq!(pair.momentum.named_params()[0].1.values(), &before[..]);

        // m = 0: momentum becomes the online copy.
        let mut pair = ModelPair::new(online.clone(), 0.0).unwrap();
        for (_, t) in pair.online.named_params_mut() {
            for v in t.values_mut() {
                *v = 7.5;
            }
        }
        momentum_update(&mut pair).unwrap();
        for (_, t) in pair.momentum.named_params() {
            assert!(t.values().iter().all(|&v| v == 7.5));
        }

        // m = 0.9 convex combination on a single value.
        let mut pair = ModelPair::new(online, 0.9).unwrap();
        for (_, t) in pair.momentum.named_params_mut() {
            for v in t.values_mut() {
                *v = 1.0;
            }
        }
        for (_, t) in pair.online.named_params_mut() {
            for v in t.values_mut() {
                *v = 0.0;
            }
        }
        momentum_update(&mut pair).unwrap();
        for (_, t) in pair.momentum.named_params() {
            assert!(t.values().iter().all(|&v| (v - 0.9).abs() < 1e-15));
        }
    }

    #[test]
    fn gradients_never_reach_momentum_params() {
        let pair = ModelPair::new(tiny_model(11), 0.9).unwrap();
        let pc = random_cloud(48, 12);
        let mut tape = Tape::new();
        let online_graph = pair.online.insert_point(&mut tape);
        let momentum_graph = pair.momentum.insert_point(&mut tape);
        let on = point_encode(&mut tape, &online_graph, &pc).unwrap();
        let mo = point_encode(&mut tape, &momentum_graph, &pc).unwrap();
        let joined = tape.concat(&[on.embedding, mo.embedding], 1).unwrap();
        let loss = tape.sum_all(joined).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(online_graph.mlps[0][0].weight).is_some());
        assert!(grads.get(momentum_graph.mlps[0][0].weight).is_none());
    }

    #[test]
    fn width_multiplier_scales_widths_only() {
        let cfg = tiny_config();
        let single = DualEncoder::init(&cfg, 1, [8, 8, 8], 13, true).unwrap();
        let double = DualEncoder::init(&cfg, 2, [8, 8, 8], 13, true).unwrap();
        assert_eq!(single.point.feature_width * 2, double.point.feature_width);
        let pc = random_cloud(48, 14);
        let (_, emb) = encode_point_once(&double, &pc).unwrap();
        assert_eq!(emb.shape(), &[1, EMBED_DIM]);
    }

    #[test]
    fn unoccupied_cell_rgb_cannot_leak() {
        // Two clouds that voxelize to the same occupancy; colored points in
        // occupied cells only. The VoxelGrid invariant zeroes unoccupied
        // rgb, so embeddings must agree.
        let model = tiny_model(15);
        let points = vec![[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]];
        let a = voxelize(
            &PointCloud::new(points.clone(), Some(vec![[0.2; 3], [0.8; 3]])).unwrap(),
            0.1,
            [8, 8, 8],
        )
        .unwrap();
        let b = voxelize(
            &PointCloud::new(points, Some(vec![[0.2; 3], [0.8; 3]])).unwrap(),
            0.1,
            [8, 8, 8],
        )
        .unwrap();
        let (_, e1) = encode_voxel_once(&model, &a).unwrap();
        let (_, e2) = encode_voxel_once(&model, &b).unwrap();
        assert_eq!(e1.values(), e2.values());
    }
}
