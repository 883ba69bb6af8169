//! Finite-difference verification suite over the operation catalog and both
//! encoders, shared by the `gradcheck` CLI command and the acceptance tests.

use crate::contrastive::{info_nce, NegativeQueue};
use crate::encoders::{
    point_encode, voxel_encode, DualEncoder, EncoderConfig, LinearIds, PointGraph, SaLayerSpec,
    VoxelGraph, EMBED_DIM,
};
use crate::error::Result;
use crate::geometry::{voxelize, PointCloud, VoxelGrid};
use crate::rng::{Domain, RngStream};
use crate::tensor::{grad_check_at, grad_check_sampled, NodeId, Tape, Tensor};

/// One row of the verification table.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub seeds: usize,
    pub checked: usize,
    pub pass: bool,
}

const EPS: f64 = 1e-5;
/// Tight bound for individual smooth operations.
const OP_THRESHOLD: f64 = 1e-6;
/// Bound for full-encoder composites.
const ENCODER_THRESHOLD: f64 = 1e-4;

fn sample_tensor(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| rng.range(-1.0, 1.0)).collect())
        .expect("shape agrees")
}

/// Uniform values pushed away from zero so ReLU probes never straddle the
/// kink.
fn sample_kink_free(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let numel: usize = shape.iter().product();
    let values = (0..numel)
        .map(|_| {
            let v = rng.range(-1.0, 1.0);
            if v >= 0.0 {
                v + 0.05
            } else {
                v - 0.05
            }
        })
        .collect();
    Tensor::new(shape, values).expect("shape agrees")
}

/// Values with a deterministic ramp so max-reductions see no near-ties.
fn sample_separated(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let numel: usize = shape.iter().product();
    let values = (0..numel)
        .map(|i| rng.range(-1.0, 1.0) + i as f64 * 1e-3)
        .collect();
    Tensor::new(shape, values).expect("shape agrees")
}

/// Rows rescaled to healthy norms for the normalization check.
fn sample_normed_rows(rows: usize, cols: usize, rng: &mut RngStream) -> Tensor {
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| rng.range(-1.0, 1.0)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
        let target = 0.5 + rng.uniform();
        values.extend(row.iter().map(|v| v / norm * target));
    }
    Tensor::new(vec![rows, cols], values).expect("shape agrees")
}

type Builder = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;
type Sampler = Box<dyn Fn(&mut RngStream) -> Vec<Tensor>>;

fn run_row(
    name: &str,
    threshold: f64,
    seeds: u64,
    sampler: Sampler,
    builder: Builder,
) -> Result<GradCheckRow> {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, Domain::GradCheck, 1000, 0);
        let inputs = sampler(&mut rng);
        let report = grad_check_at(&*builder, &inputs, EPS)?;
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
    }
    Ok(GradCheckRow {
        name: name.to_string(),
        max_rel_error: worst,
        threshold,
        seeds: seeds as usize,
        checked,
        pass: worst < threshold,
    })
}

fn micro_encoder_config() -> EncoderConfig {
    EncoderConfig {
        point_sa: vec![
            SaLayerSpec {
                n_centers: 8,
                radius_scale: 0.4,
                widths: vec![4, 8],
                group_size: 4,
            },
            SaLayerSpec {
                n_centers: 3,
                radius_scale: 0.8,
                widths: vec![8, 12],
                group_size: 3,
            },
        ],
        voxel_channels: vec![4, 6],
    }
}

fn micro_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = RngStream::new(seed, Domain::GradCheck, 2000, 0);
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
    .expect("non-empty")
}

/// Shapes of the point-branch parameters in graph order.
fn point_param_shapes(model: &DualEncoder) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for mlp in &model.point.mlps {
        for lin in mlp {
            shapes.push(lin.weight.shape().to_vec());
            shapes.push(lin.bias.shape().to_vec());
        }
    }
    for lin in [&model.point_head.fc1, &model.point_head.fc2] {
        shapes.push(lin.weight.shape().to_vec());
        shapes.push(lin.bias.shape().to_vec());
    }
    shapes
}

fn voxel_param_shapes(model: &DualEncoder) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for lin in &model.voxel.stages {
        shapes.push(lin.weight.shape().to_vec());
        shapes.push(lin.bias.shape().to_vec());
    }
    for lin in [&model.voxel_head.fc1, &model.voxel_head.fc2] {
        shapes.push(lin.weight.shape().to_vec());
        shapes.push(lin.bias.shape().to_vec());
    }
    shapes
}

fn pair_ids(ids: &[NodeId]) -> Vec<LinearIds> {
    ids.chunks(2)
        .map(|pair| LinearIds {
            weight: pair[0],
            bias: pair[1],
        })
        .collect()
}

fn encoder_row(
    name: &str,
    seeds: u64,
    shapes: Vec<Vec<usize>>,
    builder: Builder,
) -> Result<GradCheckRow> {
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed, Domain::GradCheck, 3000, 0);
        // Parameters scaled toward realistic init magnitudes.
        let inputs: Vec<Tensor> = shapes
            .iter()
            .map(|s| {
                let numel: usize = s.iter().product();
                let values = (0..numel).map(|_| rng.range(-0.6, 0.6)).collect();
                Tensor::new(s.clone(), values).expect("shape agrees")
            })
            .collect();
        let report = grad_check_sampled(&*builder, &inputs, EPS, 48, seed)?;
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
    }
    Ok(GradCheckRow {
        name: name.to_string(),
        max_rel_error: worst,
        threshold: ENCODER_THRESHOLD,
        seeds: seeds as usize,
        checked,
        pass: worst < ENCODER_THRESHOLD,
    })
}

/// Run the whole verification table: every catalog operation, the loss, and
/// both encoders, each over `seeds` seeded inputs.
pub fn gradcheck_suite(seeds: u64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();

    rows.push(run_row(
        "matmul",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![3, 4], rng), sample_tensor(vec![4, 2], rng)]),
        Box::new(|tape, ids| {
            let prod = tape.matmul(ids[0], ids[1])?;
            tape.sum_all(prod)
        }),
    )?);

    rows.push(run_row(
        "matmul_nt",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![3, 4], rng), sample_tensor(vec![5, 4], rng)]),
        Box::new(|tape, ids| {
            let prod = tape.matmul_nt(ids[0], ids[1])?;
            tape.sum_all(prod)
        }),
    )?);

    rows.push(run_row(
        "bias_add",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![4, 3], rng), sample_tensor(vec![3], rng)]),
        Box::new(|tape, ids| {
            let out = tape.bias_add(ids[0], ids[1])?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        }),
    )?);

    rows.push(run_row(
        "add",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![3, 3], rng), sample_tensor(vec![3, 3], rng)]),
        Box::new(|tape, ids| {
            let out = tape.add(ids[0], ids[1])?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        }),
    )?);

    rows.push(run_row(
        "sub",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![3, 3], rng), sample_tensor(vec![3, 3], rng)]),
        Box::new(|tape, ids| {
            let out = tape.sub(ids[0], ids[1])?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        }),
    )?);

    rows.push(run_row(
        "mul",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![3, 3], rng), sample_tensor(vec![3, 3], rng)]),
        Box::new(|tape, ids| {
            let out = tape.mul(ids[0], ids[1])?;
            tape.sum_all(out)
        }),
    )?);

    rows.push(run_row(
        "scale",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![2, 5], rng)]),
        Box::new(|tape, ids| {
            let out = tape.scale(ids[0], -1.7)?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        }),
    )?);

    rows.push(run_row(
        "relu",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_kink_free(vec![4, 4], rng)]),
        Box::new(|tape, ids| {
            let out = tape.relu(ids[0])?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        }),
    )?);

    rows.push(run_row(
        "max_axis",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_separated(vec![3, 4], rng)]),
        Box::new(|tape, ids| {
            let out = tape.max_axis(ids[0], 1)?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        }),
    )?);

    rows.push(run_row(
        "sum_axis",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![3, 4], rng)]),
        Box::new(|tape, ids| {
            let out = tape.sum_axis(ids[0], 0)?;
            let sq = tape.mul(out, out)?;
            tape.sum_all(sq)
        }),
    )?);

    rows.push(run_row(
        "sum_all",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![4, 4], rng)]),
        Box::new(|tape, ids| {
            let s = tape.sum_all(ids[0])?;
            tape.mul(s, s)
        }),
    )?);

    rows.push(run_row(
        "mean_all",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![4, 4], rng)]),
        Box::new(|tape, ids| {
            let m = tape.mean_all(ids[0])?;
            tape.mul(m, m)
        }),
    )?);

    rows.push(run_row(
        "l2_normalize_rows",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_normed_rows(3, 5, rng)]),
        Box::new(|tape, ids| {
            let normed = tape.l2_normalize_rows(ids[0])?;
            let ramp = tape.constant(
                vec![3, 5],
                (0..15).map(|i| 0.1 * i as f64 - 0.7).collect(),
            )?;
            let weighted = tape.mul(normed, ramp)?;
            tape.sum_all(weighted)
        }),
    )?);

    rows.push(run_row(
        "concat",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![3, 2], rng), sample_tensor(vec![3, 4], rng)]),
        Box::new(|tape, ids| {
            let joined = tape.concat(&[ids[0], ids[1]], 1)?;
            let ramp = tape.constant(
                vec![3, 6],
                (0..18).map(|i| 0.2 * i as f64 - 1.5).collect(),
            )?;
            let weighted = tape.mul(joined, ramp)?;
            tape.sum_all(weighted)
        }),
    )?);

    rows.push(run_row(
        "logsumexp_rows",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![3, 6], rng)]),
        Box::new(|tape, ids| {
            let lse = tape.logsumexp_rows(ids[0])?;
            let sq = tape.mul(lse, lse)?;
            tape.sum_all(sq)
        }),
    )?);

    rows.push(run_row(
        "gather_rows",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![5, 3], rng)]),
        Box::new(|tape, ids| {
            let picked = tape.gather_rows(
                ids[0],
                &[4, 0, 0, 2, crate::tensor::GATHER_ZERO_ROW, 1],
            )?;
            let ramp = tape.constant(
                vec![6, 3],
                (0..18).map(|i| 0.15 * i as f64 - 1.2).collect(),
            )?;
            let weighted = tape.mul(picked, ramp)?;
            tape.sum_all(weighted)
        }),
    )?);

    rows.push(run_row(
        "reshape",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_tensor(vec![2, 6], rng)]),
        Box::new(|tape, ids| {
            let reshaped = tape.reshape(ids[0], vec![3, 4])?;
            let ramp = tape.constant(
                vec![3, 4],
                (0..12).map(|i| 0.3 * i as f64 - 1.6).collect(),
            )?;
            let weighted = tape.mul(reshaped, ramp)?;
            tape.sum_all(weighted)
        }),
    )?);

    // Loss gradient w.r.t. the (pre-normalization) query.
    let mut loss_rng = RngStream::new(97, Domain::GradCheck, 4000, 0);
    let positive = Tensor::new(vec![1, EMBED_DIM], loss_rng.unit_vector(EMBED_DIM))
        .expect("shape agrees");
    let keys: Vec<Tensor> = (0..16)
        .map(|_| {
            Tensor::new(vec![1, EMBED_DIM], loss_rng.unit_vector(EMBED_DIM))
                .expect("shape agrees")
        })
        .collect();
    let mut queue = NegativeQueue::new(16)?;
    queue.push(&keys)?;
    rows.push(run_row(
        "info_nce",
        OP_THRESHOLD,
        seeds,
        Box::new(|rng| vec![sample_kink_free(vec![1, EMBED_DIM], rng)]),
        Box::new(move |tape, ids| {
            let q = tape.l2_normalize_rows(ids[0])?;
            info_nce(tape, q, &positive, &queue, 0.1)
        }),
    )?);

    // Full encoders, differentiated w.r.t. all parameters at sampled
    // coordinates.
    let config = micro_encoder_config();
    let template = DualEncoder::init(&config, 1, [4, 4, 4], 0, true)?;

    let cloud = micro_cloud(20, 11);
    let point_specs = config.point_sa.clone();
    let feature_width = template.point.feature_width;
    let layer_widths: Vec<usize> = config.point_sa.iter().map(|l| l.widths.len()).collect();
    rows.push(encoder_row(
        "point_encoder",
        seeds,
        point_param_shapes(&template),
        Box::new(move |tape, ids| {
            let mut cursor = 0;
            let mut mlps = Vec::new();
            for &n_layers in &layer_widths {
                let take = n_layers * 2;
                mlps.push(pair_ids(&ids[cursor..cursor + take]));
                cursor += take;
            }
            let head_ids = pair_ids(&ids[cursor..cursor + 4]);
            let graph = PointGraph {
                layers: point_specs.clone(),
                mlps,
                head: [head_ids[0], head_ids[1]],
                feature_width,
            };
            let out = point_encode(tape, &graph, &cloud)?;
            tape.sum_all(out.embedding)
        }),
    )?);

    let grid: VoxelGrid = voxelize(&micro_cloud(30, 12), 0.5, [4, 4, 4])?;
    let n_stages = config.voxel_channels.len();
    rows.push(encoder_row(
        "voxel_encoder",
        seeds,
        voxel_param_shapes(&template),
        Box::new(move |tape, ids| {
            let mut cursor = 0;
            let stages = pair_ids(&ids[cursor..cursor + n_stages * 2]);
            cursor += n_stages * 2;
            let head_ids = pair_ids(&ids[cursor..cursor + 4]);
            let graph = VoxelGraph {
                dims: [4, 4, 4],
                stages,
                head: [head_ids[0], head_ids[1]],
            };
            let out = voxel_encode(tape, &graph, &grid)?;
            tape.sum_all(out.embedding)
        }),
    )?);

    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_with_few_seeds() {
        // Full 20-seed coverage runs in the acceptance suite; three seeds
        // keep the unit test quick.
        let rows = gradcheck_suite(3).unwrap();
        assert!(rows.len() >= 19);
        for row in &rows {
            assert!(
                row.pass,
                "{} failed: {} >= {}",
                row.name, row.max_rel_error, row.threshold
            );
        }
    }
}
