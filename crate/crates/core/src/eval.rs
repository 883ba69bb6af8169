//! Frozen-feature evaluation: linear probe, kNN classification and
//! embedding diagnostics on the labeled probe splits.
//!
//! Feature extraction never touches encoder parameters and is keyed per
//! sample, so repeated extraction is bitwise identical.

use serde::{Deserialize, Serialize};

use crate::augment::random_resample;
use crate::data::{load_record, DatasetManifest};
use crate::encoders::{encode_point_once, encode_voxel_once, DualEncoder};
use crate::error::{Error, Result};
use crate::geometry::{fit_voxel_size, voxelize, PointCloud};
use crate::rng::{Domain, RngStream};
use crate::tensor::{sgd_momentum_step, OptimizerState, Tape, Tensor};
use crate::trainer::{Checkpoint, RunConfig};

/// Which encoder feeds the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeEncoder {
    Point,
    Voxel,
}

/// Which feature the probe consumes: the pre-projection pooled backbone
/// feature (standard) or the projected 128-d embedding (for comparison).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Pooled,
    Projected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub encoder: ProbeEncoder,
    pub feature_source: FeatureSource,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 100,
            lr: 0.01,
            batch_size: 64,
            encoder: ProbeEncoder::Point,
            feature_source: FeatureSource::Pooled,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.lr <= 0.0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "bad probe config: epochs {}, lr {}, batch {}",
                self.epochs, self.lr, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Frozen features for one split, row-major `[n, dim]`.
pub struct FeatureSet {
    pub features: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// Deterministic per-sample resample so every scan meets the encoder's
/// minimum point count.
fn eval_cloud(
    record_cloud: PointCloud,
    sample_id: u64,
    seed: u64,
    target_points: usize,
) -> Result<PointCloud> {
    let mut rng = RngStream::new(seed, Domain::Eval, sample_id, 0);
    random_resample(&record_cloud, target_points, &mut rng)
}

fn encode_record(
    model: &DualEncoder,
    config: &RunConfig,
    probe: &ProbeConfig,
    cloud: PointCloud,
    sample_id: u64,
) -> Result<Vec<f64>> {
    let cloud = eval_cloud(
        cloud,
        sample_id,
        config.train.seed,
        config.augment.target_points,
    )?;
    let (pooled, projected) = match probe.encoder {
        ProbeEncoder::Point => encode_point_once(model, &cloud)?,
        ProbeEncoder::Voxel => {
            let dims = config.train.voxel_dims;
            let grid = voxelize(
                &cloud,
                fit_voxel_size(&cloud, dims, config.train.voxel_size),
                dims,
            )?;
            encode_voxel_once(model, &grid)?
        }
    };
    Ok(match probe.feature_source {
        FeatureSource::Pooled => pooled.values().to_vec(),
        FeatureSource::Projected => projected.values().to_vec(),
    })
}

/// Extract frozen features for every record of a labeled manifest.
pub fn extract_features(
    model: &DualEncoder,
    config: &RunConfig,
    probe: &ProbeConfig,
    manifest: &DatasetManifest,
    data_root: &std::path::Path,
) -> Result<FeatureSet> {
    use rayon::prelude::*;
    if manifest.is_empty() {
        return Err(Error::Precondition("empty manifest".into()));
    }
    let rows: Vec<(Vec<f64>, usize)> = manifest
        .records
        .par_iter()
        .map(|record| {
            let label = record.label.ok_or_else(|| {
                Error::Precondition(format!("sample {} has no label", record.sample_id))
            })?;
            let cloud = load_record(record, data_root)?;
            let feature = encode_record(model, config, probe, cloud, record.sample_id)?;
            Ok((feature, label))
        })
        .collect::<Result<_>>()?;
    let dim = rows[0].0.len();
    let mut features = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    for (f, l) in rows {
        features.extend_from_slice(&f);
        labels.push(l);
    }
    Ok(FeatureSet {
        features,
        dim,
        labels,
    })
}

/// Accuracy plus per-class breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
}

/// Train a single linear layer by softmax cross-entropy SGD on cached
/// features; encoder parameters are never touched.
pub fn fit_linear_probe(
    train: &FeatureSet,
    test: &FeatureSet,
    n_classes: usize,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    config.validate()?;
    if n_classes < 2 {
        return Err(Error::Precondition(format!(
            "need >= 2 classes, got {n_classes}"
        )));
    }
    if train.dim != test.dim {
        return Err(Error::Precondition(format!(
            "train dim {} != test dim {}",
            train.dim, test.dim
        )));
    }
    if let Some(&bad) = train
        .labels
        .iter()
        .chain(test.labels.iter())
        .find(|&&l| l >= n_classes)
    {
        return Err(Error::Precondition(format!(
            "label {bad} >= n_classes {n_classes}"
        )));
    }

    let dim = train.dim;
    let mut weight = Tensor::zeros(vec![dim, n_classes]).with_grad();
    let mut bias = Tensor::zeros(vec![n_classes]).with_grad();
    let mut optimizer = OptimizerState::new(&[&weight, &bias], 0.9, 0.0)?;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = RngStream::new(seed, Domain::Probe, epoch, 0);
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len();
            let mut x = Vec::with_capacity(b * dim);
            let mut onehot = vec![0.0; b * n_classes];
            for (row, &i) in chunk.iter().enumerate() {
                x.extend_from_slice(train.row(i));
                onehot[row * n_classes + train.labels[i]] = 1.0;
            }
            let mut tape = Tape::new();
            let w_id = tape.leaf(&weight);
            let b_id = tape.leaf(&bias);
            let x_id = tape.constant(vec![b, dim], x)?;
            let hot_id = tape.constant(vec![b, n_classes], onehot)?;
            let logits = tape.matmul(x_id, w_id)?;
            let logits = tape.bias_add(logits, b_id)?;
            let lse = tape.logsumexp_rows(logits)?;
            let picked = tape.mul(logits, hot_id)?;
            let true_logit = tape.sum_axis(picked, 1)?;
            let diff = tape.sub(lse, true_logit)?;
            let loss = tape.mean_all(diff)?;
            let grads = tape.backward(loss)?;
            let grad_w = grads.get_or_zero(w_id);
            let grad_b = grads.get_or_zero(b_id);
            sgd_momentum_step(
                &mut [&mut weight, &mut bias],
                &[grad_w, grad_b],
                &mut optimizer,
                config.lr,
            )?;
        }
    }

    // Top-1 on the test split.
    let mut correct = 0usize;
    let mut class_total = vec![0usize; n_classes];
    let mut class_correct = vec![0usize; n_classes];
    for i in 0..test.len() {
        let row = test.row(i);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for c in 0..n_classes {
            let mut score = bias.values()[c];
            for (d, &v) in row.iter().enumerate() {
                score += v * weight.values()[d * n_classes + c];
            }
            if score > best_score {
                best_score = score;
                best = c;
            }
        }
        let truth = test.labels[i];
        class_total[truth] += 1;
        if best == truth {
            correct += 1;
            class_correct[truth] += 1;
        }
    }
    Ok(ProbeReport {
        accuracy: correct as f64 / test.len() as f64,
        per_class_accuracy: (0..n_classes)
            .map(|c| {
                if class_total[c] == 0 {
                    0.0
                } else {
                    class_correct[c] as f64 / class_total[c] as f64
                }
            })
            .collect(),
    })
}

/// Full linear-probe protocol from a checkpoint: extract frozen features
/// once, train only the linear layer, report test accuracy.
pub fn linear_probe(
    checkpoint: &Checkpoint,
    probe_train: &DatasetManifest,
    probe_test: &DatasetManifest,
    data_root: &std::path::Path,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if probe_train.n_classes != probe_test.n_classes || probe_train.n_classes == 0 {
        return Err(Error::Precondition(format!(
            "class count mismatch: train {} vs test {}",
            probe_train.n_classes, probe_test.n_classes
        )));
    }
    let model = &checkpoint.model.online;
    let train = extract_features(model, &checkpoint.config, config, probe_train, data_root)?;
    let test = extract_features(model, &checkpoint.config, config, probe_test, data_root)?;
    fit_linear_probe(
        &train,
        &test,
        probe_train.n_classes,
        config,
        checkpoint.config.train.seed,
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KnnReport {
    pub accuracy: f64,
    pub k: usize,
    /// True when `k` equals the train size: every vote sees the whole
    /// train set, so the classifier degenerates toward the majority class.
    pub degenerate_majority: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Cosine-similarity kNN vote on cached features; label ties break toward
/// the larger summed similarity.
pub fn knn_classify(train: &FeatureSet, test: &FeatureSet, k: usize, n_classes: usize) -> Result<KnnReport> {
    if k == 0 || k > train.len() {
        return Err(Error::Precondition(format!(
            "k = {k} outside 1..={} (train size)",
            train.len()
        )));
    }
    let mut correct = 0usize;
    for i in 0..test.len() {
        let query = test.row(i);
        let mut sims: Vec<(f64, usize)> = (0..train.len())
            .map(|j| (cosine(query, train.row(j)), train.labels[j]))
            .collect();
        sims.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite similarity"));
        let mut votes = vec![0usize; n_classes];
        let mut sim_sums = vec![0.0f64; n_classes];
        for &(sim, label) in sims.iter().take(k) {
            votes[label] += 1;
            sim_sums[label] += sim;
        }
        let mut best = 0usize;
        for c in 1..n_classes {
            if votes[c] > votes[best]
                || (votes[c] == votes[best] && sim_sums[c] > sim_sums[best])
            {
                best = c;
            }
        }
        if best == test.labels[i] {
            correct += 1;
        }
    }
    Ok(KnnReport {
        accuracy: correct as f64 / test.len() as f64,
        k,
        degenerate_majority: k == train.len(),
    })
}

/// kNN evaluation from a checkpoint.
pub fn knn_eval(
    checkpoint: &Checkpoint,
    probe_train: &DatasetManifest,
    probe_test: &DatasetManifest,
    data_root: &std::path::Path,
    config: &ProbeConfig,
    k: usize,
) -> Result<KnnReport> {
    let model = &checkpoint.model.online;
    let train = extract_features(model, &checkpoint.config, config, probe_train, data_root)?;
    let test = extract_features(model, &checkpoint.config, config, probe_test, data_root)?;
    knn_classify(&train, &test, k, probe_train.n_classes)
}

/// Embedding-space diagnostics over a seeded sample of scenes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingStats {
    /// Mean squared distance between the two augmented views' point
    /// embeddings.
    pub alignment: f64,
    /// `log mean exp(-2 ||zi - zj||^2)` over distinct view-1 embeddings.
    pub uniformity: f64,
    /// Mean cosine between the point and voxel embeddings of one scene.
    pub same_scene_cross_format_cos: f64,
    /// Mean cosine between point and voxel embeddings of different scenes.
    pub cross_scene_cos: f64,
    pub samples: usize,
}

const STATS_MAX_SAMPLES: usize = 512;

pub fn embedding_stats(
    checkpoint: &Checkpoint,
    manifest: &DatasetManifest,
    data_root: &std::path::Path,
) -> Result<EmbeddingStats> {
    use rayon::prelude::*;
    if manifest.is_empty() {
        return Err(Error::Precondition("empty manifest".into()));
    }
    let config = &checkpoint.config;
    let seed = config.train.seed;
    let model = &checkpoint.model.online;

    let mut indices: Vec<usize> = (0..manifest.len()).collect();
    let mut rng = RngStream::new(seed, Domain::Eval, u64::MAX, 0);
    rng.shuffle(&mut indices);
    indices.truncate(STATS_MAX_SAMPLES);

    struct SceneEmbeddings {
        view1_point: Vec<f64>,
        view2_point: Vec<f64>,
        scan_point: Vec<f64>,
        scan_voxel: Vec<f64>,
    }

    let per_scene: Vec<SceneEmbeddings> = indices
        .par_iter()
        .map(|&i| -> Result<SceneEmbeddings> {
            let record = &manifest.records[i];
            let cloud = load_record(record, data_root)?;
            let mut rng1 = RngStream::for_view(seed, record.sample_id, u64::MAX, 0);
            let mut rng2 = RngStream::for_view(seed, record.sample_id, u64::MAX, 1);
            let (v1, v2) = crate::augment::make_views(&cloud, &mut rng1, &mut rng2, &config.augment)?;
            let (_, e1) = encode_point_once(model, &v1)?;
            let (_, e2) = encode_point_once(model, &v2)?;

            let scan = eval_cloud(cloud, record.sample_id, seed, config.augment.target_points)?;
            let (_, point_emb) = encode_point_once(model, &scan)?;
            let dims = config.train.voxel_dims;
            let grid = voxelize(
                &scan,
                fit_voxel_size(&scan, dims, config.train.voxel_size),
                dims,
            )?;
            let (_, voxel_emb) = encode_voxel_once(model, &grid)?;
            Ok(SceneEmbeddings {
                view1_point: e1.values().to_vec(),
                view2_point: e2.values().to_vec(),
                scan_point: point_emb.values().to_vec(),
                scan_voxel: voxel_emb.values().to_vec(),
            })
        })
        .collect::<Result<_>>()?;

    let n = per_scene.len();
    let sq_dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    let alignment = per_scene
        .iter()
        .map(|s| sq_dist(&s.view1_point, &s.view2_point))
        .sum::<f64>()
        / n as f64;

    let mut uniformity = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                uniformity += (-2.0 * sq_dist(&per_scene[i].view1_point, &per_scene[j].view1_point)).exp();
                pairs += 1;
            }
        }
    }
    let uniformity = if pairs > 0 {
        (uniformity / pairs as f64).ln()
    } else {
        0.0
    };

    let same_scene = per_scene
        .iter()
        .map(|s| cosine(&s.scan_point, &s.scan_voxel))
        .sum::<f64>()
        / n as f64;
    let cross_scene = if n > 1 {
        (0..n)
            .map(|i| cosine(&per_scene[i].scan_point, &per_scene[(i + 1) % n].scan_voxel))
            .sum::<f64>()
            / n as f64
    } else {
        0.0
    };

    Ok(EmbeddingStats {
        alignment,
        uniformity,
        same_scene_cross_format_cos: same_scene,
        cross_scene_cos: cross_scene,
        samples: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot_features(labels: &[usize], n_classes: usize) -> FeatureSet {
        let mut features = Vec::new();
        for &l in labels {
            let mut row = vec![0.0; n_classes];
            row[l] = 1.0;
            features.extend_from_slice(&row);
        }
        FeatureSet {
            features,
            dim: n_classes,
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn separable_one_hot_features_reach_full_accuracy() {
        let labels: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let train = one_hot_features(&labels, 4);
        let test = one_hot_features(&labels, 4);
        let config = ProbeConfig {
            epochs: 50,
            ..Default::default()
        };
        let report = fit_linear_probe(&train, &test, 4, &config, 0).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert!(report.per_class_accuracy.iter().all(|&a| a == 1.0));
    }

    #[test]
    fn shuffled_labels_score_chance_level() {
        // Random features, random balanced labels: expect ~25% over seeds.
        let mut accuracies = Vec::new();
        for seed in 0..5 {
            let mut rng = RngStream::new(seed, Domain::Probe, 99, 0);
            let n = 200;
            let dim = 16;
            let features: Vec<f64> = (0..n * dim).map(|_| rng.range(-1.0, 1.0)).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
            let mut shuffled = labels.clone();
            rng.shuffle(&mut shuffled);
            let train = FeatureSet {
                features: features.clone(),
                dim,
                labels: shuffled.clone(),
            };
            let test_features: Vec<f64> =
                (0..n * dim).map(|_| rng.range(-1.0, 1.0)).collect();
            let mut test_labels = labels;
            rng.shuffle(&mut test_labels);
            let test = FeatureSet {
                features: test_features,
                dim,
                labels: test_labels,
            };
            let config = ProbeConfig {
                epochs: 30,
                ..Default::default()
            };
            let report = fit_linear_probe(&train, &test, 4, &config, seed).unwrap();
            accuracies.push(report.accuracy);
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        assert!(
            (mean - 0.25).abs() < 0.08,
            "mean accuracy {mean}, expected chance level"
        );
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let train = one_hot_features(&[0, 1, 5], 4);
        let test = one_hot_features(&[0], 4);
        assert!(fit_linear_probe(&train, &test, 4, &ProbeConfig::default(), 0).is_err());
    }

    /// Independent all-pairs oracle for the kNN vote.
    fn knn_oracle(train: &FeatureSet, test: &FeatureSet, k: usize, n_classes: usize) -> f64 {
        let mut correct = 0;
        for i in 0..test.len() {
            let mut sims: Vec<(f64, usize)> = (0..train.len())
                .map(|j| (cosine(test.row(i), train.row(j)), train.labels[j]))
                .collect();
            sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
            sims.truncate(k);
            let mut best = (0usize, 0usize, f64::NEG_INFINITY);
            for c in 0..n_classes {
                let votes = sims.iter().filter(|(_, l)| *l == c).count();
                let sum: f64 = sims
                    .iter()
                    .filter(|(_, l)| *l == c)
                    .map(|(s, _)| s)
                    .sum();
                if votes > best.1 || (votes == best.1 && sum > best.2) {
                    best = (c, votes, sum);
                }
            }
            if best.0 == test.labels[i] {
                correct += 1;
            }
        }
        correct as f64 / test.len() as f64
    }

    #[test]
    fn knn_matches_brute_force_oracle() {
        let mut rng = RngStream::new(3, Domain::Probe, 7, 0);
        let dim = 8;
        let make = |rng: &mut RngStream, n: usize| -> FeatureSet {
            FeatureSet {
                features: (0..n * dim).map(|_| rng.range(-1.0, 1.0)).collect(),
                dim,
                labels: (0..n).map(|_| rng.index(4)).collect(),
            }
        };
        let train = make(&mut rng, 60);
        let test = make(&mut rng, 30);
        for k in [1, 3, 7, 60] {
            let report = knn_classify(&train, &test, k, 4).unwrap();
            let oracle = knn_oracle(&train, &test, k, 4);
            assert_eq!(report.accuracy, oracle, "k = {k}");
        }
    }

    #[test]
    fn knn_k1_with_duplicate_is_correct() {
        let train = one_hot_features(&[0, 1, 2, 3], 4);
        let test = one_hot_features(&[2], 4);
        let report = knn_classify(&train, &test, 1, 4).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert!(!report.degenerate_majority);
    }

    #[test]
    fn knn_full_train_size_is_flagged_degenerate() {
        let train = one_hot_features(&[0, 0, 0, 1], 4);
        let test = one_hot_features(&[1], 4);
        let report = knn_classify(&train, &test, 4, 4).unwrap();
        assert!(report.degenerate_majority);
    }

    #[test]
    fn knn_rejects_oversized_k() {
        let train = one_hot_features(&[0, 1], 4);
        let test = one_hot_features(&[0], 4);
        assert!(knn_classify(&train, &test, 3, 4).is_err());
    }

    #[test]
    fn uniformity_of_orthonormal_embeddings_is_minus_four() {
        // All pairwise squared distances equal 2, so
        // log mean exp(-2 * 2) = -4 exactly.
        let n = 6;
        let dim = 8;
        let mut embeddings = Vec::new();
        for i in 0..n {
            let mut row = vec![0.0; dim];
            row[i] = 1.0;
            embeddings.push(row);
        }
        let mut uniformity = 0.0;
        let mut pairs = 0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let d: f64 = embeddings[i]
                        .iter()
                        .zip(&embeddings[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    uniformity += (-2.0 * d).exp();
                    pairs += 1;
                }
            }
        }
        let uniformity = (uniformity / pairs as f64).ln();
        assert!((uniformity - (-4.0)).abs() < 1e-12);
    }
}
