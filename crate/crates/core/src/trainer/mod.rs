//! The pretraining loop: batching, two-view augmentation, dual-format
//! encoding, the joint loss, SGD with cosine schedule, momentum updates and
//! queue pushes.
//!
//! Every random draw is keyed by `(seed, purpose, index)`, so a run is a
//! pure function of its config and resuming from a checkpoint continues the
//! uninterrupted trajectory bit-for-bit.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentationConfig};
use crate::contrastive::{joint_loss, LossConfig, LossMode, NegativeQueue};
use crate::data::{load_record, DatasetManifest, SyntheticSceneConfig};
use crate::encoders::{
    point_encode, voxel_encode, DualEncoder, EncoderConfig, ModelPair,
};
use crate::error::{Error, Result};
use crate::eval::ProbeConfig;
use crate::geometry::{fit_voxel_size, voxelize, PointCloud, VoxelGrid};
use crate::rng::{Domain, RngStream};
use crate::tensor::{cosine_lr, sgd_momentum_step, OptimizerState, Tape};

/// Optimization hyperparameters and run identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub optimizer_momentum: f64,
    pub weight_decay: f64,
    /// Momentum-encoder trailing coefficient.
    pub encoder_momentum: f64,
    /// Negative-queue capacity per format.
    pub queue_capacity: usize,
    pub temperature: f64,
    pub loss_mode: LossMode,
    pub width_multiplier: usize,
    pub voxel_dims: [usize; 3],
    /// Preferred voxel edge; grows per sample when the scene overflows.
    pub voxel_size: f64,
    pub seed: u64,
    /// When false, `wall_ms` is written as 0 so metrics logs are
    /// byte-reproducible.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Batch-ratio-scaled learning rate: 0.12 * 32 / 1024.
        let lr_max = 0.12 * 32.0 / 1024.0;
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr_max,
            lr_min: lr_max / 1000.0,
            optimizer_momentum: 0.9,
            weight_decay: 0.0,
            encoder_momentum: 0.9,
            queue_capacity: 1024,
            temperature: 0.1,
            loss_mode: LossMode::Both,
            width_multiplier: 1,
            voxel_dims: [16, 16, 16],
            voxel_size: 0.05,
            seed: 0,
            record_timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // epochs == 0 is allowed: it initializes and checkpoints without
        // training (used to produce untrained baselines).
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lr_max <= 0.0 || self.lr_min < 0.0 || self.lr_min > self.lr_max {
            return Err(Error::Config(format!(
                "bad lr range [{}, {}]",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..1.0).contains(&self.optimizer_momentum) {
            return Err(Error::Config("optimizer_momentum outside [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.encoder_momentum) {
            return Err(Error::Config("encoder_momentum outside [0, 1]".into()));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be >= 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.width_multiplier == 0 {
            return Err(Error::Config("width_multiplier must be >= 1".into()));
        }
        if self.voxel_size <= 0.0 || self.voxel_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("bad voxel geometry".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            mode: self.loss_mode,
        }
    }
}

/// The full effective configuration of a run; echoed into checkpoints and
/// reports for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub encoder: EncoderConfig,
    pub data: SyntheticSceneConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.data.validate()?;
        self.probe.validate()?;
        self.train.loss_config().validate()?;
        Ok(())
    }
}

/// One JSON-lines record per optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_aa: f64,
    pub l_bb: f64,
    pub l_ab: f64,
    pub l_ba: f64,
    pub queue_fill: u64,
    pub wall_ms: f64,
}

/// Streaming events during a run.
pub enum PretrainEvent<'a> {
    Step(&'a StepMetrics),
    /// Fired every `save_every` steps (when requested).
    Snapshot(&'a Checkpoint),
}

/// Callbacks and cadence for a run.
pub struct PretrainOptions {
    /// Emit a [`PretrainEvent::Snapshot`] every this many steps.
    pub save_every: Option<u64>,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions { save_every: None }
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Fresh run state from a config: initialized encoders, zero velocities,
/// seeded queues.
pub fn init_state(config: &RunConfig) -> Result<Checkpoint> {
    config.validate()?;
    let train = &config.train;
    let online = DualEncoder::init(
        &config.encoder,
        train.width_multiplier,
        train.voxel_dims,
        train.seed,
        true,
    )?;
    let model = ModelPair::new(online, train.encoder_momentum)?;
    let params: Vec<&crate::tensor::Tensor> =
        model.online.named_params().into_iter().map(|(_, t)| t).collect();
    let optimizer = OptimizerState::new(&params, train.optimizer_momentum, train.weight_decay)?;
    let mut rng_point = RngStream::new(train.seed, Domain::QueueInit, 0, 0);
    let mut rng_voxel = RngStream::new(train.seed, Domain::QueueInit, 1, 0);
    let queue_point = NegativeQueue::seeded(train.queue_capacity, &mut rng_point)?;
    let queue_voxel = NegativeQueue::seeded(train.queue_capacity, &mut rng_voxel)?;
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        model,
        optimizer,
        queue_point,
        queue_voxel,
        step: 0,
    })
}

/// Run pretraining from scratch, collecting all metrics.
pub fn pretrain(
    manifest: &DatasetManifest,
    data_root: &Path,
    config: &RunConfig,
) -> Result<PretrainOutcome> {
    pretrain_with(manifest, data_root, config, &PretrainOptions::default(), &mut |_| {
        Ok(())
    })
}

/// Run pretraining from scratch with streaming events.
pub fn pretrain_with(
    manifest: &DatasetManifest,
    data_root: &Path,
    config: &RunConfig,
    options: &PretrainOptions,
    sink: &mut dyn FnMut(PretrainEvent) -> Result<()>,
) -> Result<PretrainOutcome> {
    let mut state = init_state(config)?;
    let metrics = run_loop(&mut state, manifest, data_root, options, sink)?;
    Ok(PretrainOutcome {
        checkpoint: state,
        metrics,
    })
}

/// Continue a checkpointed run to its configured epoch count.
pub fn resume_pretrain(
    mut state: Checkpoint,
    manifest: &DatasetManifest,
    data_root: &Path,
    options: &PretrainOptions,
    sink: &mut dyn FnMut(PretrainEvent) -> Result<()>,
) -> Result<PretrainOutcome> {
    let metrics = run_loop(&mut state, manifest, data_root, options, sink)?;
    Ok(PretrainOutcome {
        checkpoint: state,
        metrics,
    })
}

/// Deterministic per-epoch sample order.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = RngStream::new(seed, Domain::Shuffle, epoch, 0);
    rng.shuffle(&mut order);
    order
}

struct PreparedSample {
    view1: PointCloud,
    grid1: VoxelGrid,
    view2: PointCloud,
    grid2: VoxelGrid,
    sample_id: u64,
}

fn prepare_sample(
    manifest: &DatasetManifest,
    data_root: &Path,
    config: &RunConfig,
    index: usize,
    epoch: u64,
) -> Result<PreparedSample> {
    let record = &manifest.records[index];
    let cloud = load_record(record, data_root)?;
    let seed = config.train.seed;
    let mut rng1 = RngStream::for_view(seed, record.sample_id, epoch, 0);
    let mut rng2 = RngStream::for_view(seed, record.sample_id, epoch, 1);
    let (view1, view2) = make_views(&cloud, &mut rng1, &mut rng2, &config.augment)?;
    let dims = config.train.voxel_dims;
    let grid1 = voxelize(
        &view1,
        fit_voxel_size(&view1, dims, config.train.voxel_size),
        dims,
    )?;
    let grid2 = voxelize(
        &view2,
        fit_voxel_size(&view2, dims, config.train.voxel_size),
        dims,
    )?;
    Ok(PreparedSample {
        view1,
        grid1,
        view2,
        grid2,
        sample_id: record.sample_id,
    })
}

fn run_loop(
    state: &mut Checkpoint,
    manifest: &DatasetManifest,
    data_root: &Path,
    options: &PretrainOptions,
    sink: &mut dyn FnMut(PretrainEvent) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    let config = state.config.clone();
    let train = &config.train;
    let batch = train.batch_size;
    if manifest.len() < batch {
        return Err(Error::Precondition(format!(
            "dataset has {} samples, need at least batch_size = {batch}",
            manifest.len()
        )));
    }
    let steps_per_epoch = (manifest.len() / batch) as u64;
    let total_steps = train.epochs * steps_per_epoch;
    // The schedule hits lr_max at the first step and lr_min at the last.
    let lr_denominator = total_steps.saturating_sub(1).max(1);
    let loss_config = train.loss_config();

    let mut all_metrics = Vec::new();
    let mut cached_epoch = u64::MAX;
    let mut order = Vec::new();

    while state.step < total_steps {
        let step = state.step;
        let epoch = step / steps_per_epoch;
        let batch_index = (step % steps_per_epoch) as usize;
        if epoch != cached_epoch {
            order = epoch_order(train.seed, epoch, manifest.len());
            cached_epoch = epoch;
        }
        let started = Instant::now();
        let indices = &order[batch_index * batch..(batch_index + 1) * batch];

        let prepared: Vec<PreparedSample> = indices
            .par_iter()
            .map(|&i| prepare_sample(manifest, data_root, &config, i, epoch))
            .collect::<Result<_>>()?;

        let step_result = (|| -> Result<(f64, [f64; 4])> {
            let mut tape = Tape::new();
            let graphs = state.model.online.insert_all(&mut tape);
            let mut sample_losses = Vec::with_capacity(batch);
            let mut term_sums = [0.0f64; 4]; // aa, bb, ab, ba
            let mut point_keys = Vec::with_capacity(batch);
            let mut voxel_keys = Vec::with_capacity(batch);

            for sample in &prepared {
                let point_out = point_encode(&mut tape, &graphs.point, &sample.view1)?;
                let voxel_out = voxel_encode(&mut tape, &graphs.voxel, &sample.grid1)?;

                // Momentum keys on a throwaway tape: no rules are recorded
                // because momentum parameters carry no gradient.
                let mut key_tape = Tape::new();
                let momentum_graphs = state.model.momentum.insert_all(&mut key_tape);
                let point_key = point_encode(&mut key_tape, &momentum_graphs.point, &sample.view2)?;
                let voxel_key = voxel_encode(&mut key_tape, &momentum_graphs.voxel, &sample.grid2)?;
                let point_key = key_tape.to_tensor(point_key.embedding);
                let voxel_key = key_tape.to_tensor(voxel_key.embedding);

                let (loss, terms) = joint_loss(
                    &mut tape,
                    point_out.embedding,
                    &point_key,
                    voxel_out.embedding,
                    &voxel_key,
                    &state.queue_point,
                    &state.queue_voxel,
                    &loss_config,
                )?;
                sample_losses.push(loss);
                term_sums[0] += terms.within_point;
                term_sums[1] += terms.within_voxel;
                term_sums[2] += terms.across_pv;
                term_sums[3] += terms.across_vp;
                point_keys.push(point_key);
                voxel_keys.push(voxel_key);
            }

            let stacked = tape.concat(&sample_losses, 0)?;
            let batch_loss = tape.mean_all(stacked)?;
            let loss_value = tape.values(batch_loss)[0];
            if !loss_value.is_finite() {
                return Err(Error::NonFinite(format!("batch loss {loss_value}")));
            }

            let grads = tape.backward(batch_loss)?;
            let lr = cosine_lr(step, lr_denominator, train.lr_max, train.lr_min)?;
            let grad_tensors: Vec<crate::tensor::Tensor> = graphs
                .param_ids
                .iter()
                .map(|&id| grads.get_or_zero(id))
                .collect();
            let mut param_refs: Vec<&mut crate::tensor::Tensor> = state
                .model
                .online
                .named_params_mut()
                .into_iter()
                .map(|(_, t)| t)
                .collect();
            sgd_momentum_step(&mut param_refs, &grad_tensors, &mut state.optimizer, lr)?;

            crate::encoders::momentum_update(&mut state.model)?;
            state.queue_point.push(&point_keys)?;
            state.queue_voxel.push(&voxel_keys)?;

            let n = batch as f64;
            Ok((
                loss_value,
                [
                    term_sums[0] / n,
                    term_sums[1] / n,
                    term_sums[2] / n,
                    term_sums[3] / n,
                ],
            ))
        })();

        let (loss_value, term_means) = step_result.map_err(|err| {
            let sample_ids: Vec<u64> = prepared.iter().map(|s| s.sample_id).collect();
            match err {
                Error::NonFinite(msg) => Error::NonFinite(format!(
                    "aborting at step {step} (epoch {epoch}): {msg}; batch sample ids {sample_ids:?}"
                )),
                other => other,
            }
        })?;

        let lr = cosine_lr(step, lr_denominator, train.lr_max, train.lr_min)?;
        let wall_ms = if train.record_timing {
            started.elapsed().as_secs_f64() * 1000.0
        } else {
            0.0
        };
        let metrics = StepMetrics {
            step,
            epoch,
            lr,
            loss: loss_value,
            l_aa: term_means[0],
            l_bb: term_means[1],
            l_ab: term_means[2],
            l_ba: term_means[3],
            queue_fill: state
                .queue_point
                .pushed_total()
                .min(train.queue_capacity as u64),
            wall_ms,
        };
        state.step = step + 1;
        sink(PretrainEvent::Step(&metrics))?;
        all_metrics.push(metrics);

        if let Some(every) = options.save_every {
            if every > 0 && state.step % every == 0 && state.step < total_steps {
                sink(PretrainEvent::Snapshot(state))?;
            }
        }
    }
    Ok(all_metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, SplitTag};
    use crate::encoders::SaLayerSpec;
    use tempfile::tempdir;

    /// Small but real end-to-end config used across trainer tests.
    pub(crate) fn tiny_run_config(seed: u64) -> RunConfig {
        let mut config = RunConfig::default();
        config.train.seed = seed;
        config.train.epochs = 1;
        config.train.batch_size = 4;
        config.train.queue_capacity = 16;
        config.train.voxel_dims = [8, 8, 8];
        config.train.record_timing = false;
        config.augment.target_points = 64;
        config.augment.min_points_after_crop = 16;
        config.encoder = EncoderConfig {
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
        };
        config.data.image_width = 32;
        config.data.image_height = 32;
        config
    }

    #[test]
    fn smoke_one_epoch_produces_finite_metrics() {
        let dir = tempdir().unwrap();
        let config = tiny_run_config(1);
        let manifest = build_dataset(
            &config.data,
            8,
            config.train.seed,
            0,
            SplitTag::Pretrain,
            dir.path(),
        )
        .unwrap();
        let outcome = pretrain(&manifest, dir.path(), &config).unwrap();
        assert_eq!(outcome.metrics.len(), 2);
        for m in &outcome.metrics {
            assert!(m.loss.is_finite());
            assert!(m.l_aa.is_finite() && m.l_bb.is_finite());
            assert!(m.l_ab.is_finite() && m.l_ba.is_finite());
        }
        assert_eq!(outcome.checkpoint.step, 2);
    }

    #[test]
    fn identical_seeds_give_identical_metrics() {
        let dir = tempdir().unwrap();
        let config = tiny_run_config(7);
        let manifest = build_dataset(
            &config.data,
            8,
            config.train.seed,
            0,
            SplitTag::Pretrain,
            dir.path(),
        )
        .unwrap();
        let a = pretrain(&manifest, dir.path(), &config).unwrap();
        let b = pretrain(&manifest, dir.path(), &config).unwrap();
        let json_a: Vec<String> = a
            .metrics
            .iter()
            .map(|m| serde_json::to_string(m).unwrap())
            .collect();
        let json_b: Vec<String> = b
            .metrics
            .iter()
            .map(|m| serde_json::to_string(m).unwrap())
            .collect();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn lr_schedule_hits_both_endpoints() {
        let dir = tempdir().unwrap();
        let mut config = tiny_run_config(3);
        config.train.epochs = 4;
        let manifest = build_dataset(
            &config.data,
            8,
            config.train.seed,
            0,
            SplitTag::Pretrain,
            dir.path(),
        )
        .unwrap();
        let outcome = pretrain(&manifest, dir.path(), &config).unwrap();
        let first = outcome.metrics.first().unwrap();
        let last = outcome.metrics.last().unwrap();
        assert!((first.lr - config.train.lr_max).abs() < 1e-12);
        assert!((last.lr - config.train.lr_min).abs() < 1e-12);
    }

    #[test]
    fn queue_fill_counts_pushed_keys() {
        let dir = tempdir().unwrap();
        let mut config = tiny_run_config(4);
        config.train.epochs = 2;
        config.train.queue_capacity = 6;
        let manifest = build_dataset(
            &config.data,
            8,
            config.train.seed,
            0,
            SplitTag::Pretrain,
            dir.path(),
        )
        .unwrap();
        let outcome = pretrain(&manifest, dir.path(), &config).unwrap();
        // batch 4, capacity 6: fills 4 then saturates at 6.
        let fills: Vec<u64> = outcome.metrics.iter().map(|m| m.queue_fill).collect();
        assert_eq!(fills, vec![4, 6, 6, 6]);
    }

    #[test]
    fn dataset_smaller_than_batch_is_rejected() {
        let dir = tempdir().unwrap();
        let config = tiny_run_config(5);
        let manifest = build_dataset(
            &config.data,
            2,
            config.train.seed,
            0,
            SplitTag::Pretrain,
            dir.path(),
        )
        .unwrap();
        assert!(matches!(
            pretrain(&manifest, dir.path(), &config),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn momentum_params_match_shadow_recursion() {
        // After t steps: theta_m(t) = m^t theta_0 + (1-m) sum m^(t-1-i) theta_i.
        let dir = tempdir().unwrap();
        let mut config = tiny_run_config(6);
        config.train.epochs = 5; // 10 steps at batch 4 over 8 samples... 2 per epoch
        let manifest = build_dataset(
            &config.data,
            8,
            config.train.seed,
            0,
            SplitTag::Pretrain,
            dir.path(),
        )
        .unwrap();

        // Shadow: replay training, capturing online params after each step.
        let init = init_state(&config).unwrap();
        let theta0: Vec<Vec<f64>> = init
            .model
            .online
            .named_params()
            .iter()
            .map(|(_, t)| t.values().to_vec())
            .collect();

        let outcome = pretrain(&manifest, dir.path(), &config).unwrap();
        let steps = outcome.checkpoint.step;

        // Re-run, recording the online trajectory via snapshots every step.
        let mut trajectory: Vec<Vec<Vec<f64>>> = Vec::new();
        let options = PretrainOptions { save_every: Some(1) };
        let mut sink = |event: PretrainEvent| -> Result<()> {
            if let PretrainEvent::Snapshot(ck) = event {
                trajectory.push(
                    ck.model
                        .online
                        .named_params()
                        .iter()
                        .map(|(_, t)| t.values().to_vec())
                        .collect(),
                );
            }
            Ok(())
        };
        let replay = pretrain_with(&manifest, dir.path(), &config, &options, &mut sink).unwrap();
        // Snapshots skip the final step; append the final online params.
        trajectory.push(
            replay
                .checkpoint
                .model
                .online
                .named_params()
                .iter()
                .map(|(_, t)| t.values().to_vec())
                .collect(),
        );
        assert_eq!(trajectory.len() as u64, steps);

        let m = config.train.encoder_momentum;
        let momentum_now = outcome.checkpoint.model.momentum.named_params();
        for (pi, (_, tensor)) in momentum_now.iter().enumerate() {
            for (vi, &actual) in tensor.values().iter().enumerate().take(5) {
                let mut expected = m.powi(steps as i32) * theta0[pi][vi];
                for (i, snap) in trajectory.iter().enumerate() {
                    expected += (1.0 - m) * m.powi((steps - 1 - i as u64) as i32) * snap[pi][vi];
                }
                assert!(
                    (actual - expected).abs() < 1e-12,
                    "param {pi} value {vi}: {actual} vs shadow {expected}"
                );
            }
        }
    }
}
