//! Instance-discrimination losses over momentum keys and negative queues.
//!
//! `info_nce` scores one query against its positive key and the queue of
//! stored negatives through a temperature-scaled softmax, evaluated via
//! log-sum-exp. Gradient flows only through the query; keys and negatives
//! enter the graph as detached constants. `joint_loss` combines the four
//! within/across-format terms.

use serde::{Deserialize, Serialize};

use crate::encoders::EMBED_DIM;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{NodeId, Tape, Tensor};

/// Which terms of the joint objective are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    WithinOnly,
    AcrossOnly,
    Both,
}

/// Temperature and term selection for the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.1,
            mode: LossMode::Both,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Fixed-capacity FIFO of unit-norm key embeddings.
///
/// The ring may be pre-filled with random unit vectors so the loss is
/// defined from the first step; `pushed_total` counts only real keys, which
/// is what the trainer reports as queue fill.
#[derive(Debug, Clone)]
pub struct NegativeQueue {
    capacity: usize,
    slots: Vec<f64>,
    cursor: usize,
    len: usize,
    pushed_total: u64,
}

const UNIT_NORM_TOL: f64 = 1e-6;

fn check_unit_norm(key: &[f64]) -> Result<()> {
    if key.len() != EMBED_DIM {
        return Err(Error::Precondition(format!(
            "key has {} dims, expected {EMBED_DIM}",
            key.len()
        )));
    }
    let norm = key.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Precondition(format!(
            "key norm {norm} deviates from 1 beyond {UNIT_NORM_TOL}"
        )));
    }
    Ok(())
}

impl NegativeQueue {
    /// Empty queue of the given capacity.
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Precondition("queue capacity must be >= 1".into()));
        }
        Ok(NegativeQueue {
            capacity,
            slots: vec![0.0; capacity * EMBED_DIM],
            cursor: 0,
            len: 0,
            pushed_total: 0,
        })
    }

    /// Queue pre-filled to capacity with random unit vectors; placeholders
    /// are evicted FIFO as real keys arrive.
    pub fn seeded(capacity: usize, rng: &mut RngStream) -> Result<Self> {
        let mut queue = Self::new(capacity)?;
        for i in 0..capacity {
            let v = rng.unit_vector(EMBED_DIM);
            queue.slots[i * EMBED_DIM..(i + 1) * EMBED_DIM].copy_from_slice(&v);
        }
        queue.len = capacity;
        Ok(queue)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Number of valid entries (placeholders included).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Total real keys ever pushed.
    pub fn pushed_total(&self) -> u64 {
        self.pushed_total
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Restore from checkpointed state.
    pub fn restore(
        capacity: usize,
        slots: Vec<f64>,
        cursor: usize,
        len: usize,
        pushed_total: u64,
    ) -> Result<Self> {
        if slots.len() != capacity * EMBED_DIM || len > capacity || cursor >= capacity.max(1) {
            return Err(Error::Format("inconsistent queue state".into()));
        }
        Ok(NegativeQueue {
            capacity,
            slots,
            cursor,
            len,
            pushed_total,
        })
    }

    /// Entries oldest-first as an `[len, 128]` row matrix.
    pub fn entries(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len * EMBED_DIM);
        let start = if self.len == self.capacity {
            self.cursor
        } else {
            0
        };
        for i in 0..self.len {
            let slot = (start + i) % self.capacity;
            out.extend_from_slice(&self.slots[slot * EMBED_DIM..(slot + 1) * EMBED_DIM]);
        }
        out
    }

    pub fn raw_slots(&self) -> &[f64] {
        &self.slots
    }

    /// Append keys in batch order, evicting the oldest entries when full.
    /// Every key must be unit-norm within `1e-6`.
    pub fn push(&mut self, keys: &[Tensor]) -> Result<()> {
        for key in keys {
            check_unit_norm(key.values())?;
        }
        for key in keys {
            self.slots[self.cursor * EMBED_DIM..(self.cursor + 1) * EMBED_DIM]
                .copy_from_slice(key.values());
            self.cursor = (self.cursor + 1) % self.capacity;
            self.len = (self.len + 1).min(self.capacity);
            self.pushed_total += 1;
        }
        Ok(())
    }
}

/// Detached copy of the queue as a `[len, 128]` constant on the tape.
fn queue_leaf(tape: &mut Tape, queue: &NegativeQueue) -> Result<NodeId> {
    if queue.is_empty() {
        return Err(Error::Precondition("negative queue is empty".into()));
    }
    tape.constant(vec![queue.len(), EMBED_DIM], queue.entries())
}

fn info_nce_from_leaves(
    tape: &mut Tape,
    query: NodeId,
    positive: NodeId,
    negatives: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    let pos_logit = tape.matmul_nt(query, positive)?; // [1, 1]
    let pos_logit = tape.scale(pos_logit, 1.0 / temperature)?;
    let neg_logits = tape.matmul_nt(query, negatives)?; // [1, K]
    let neg_logits = tape.scale(neg_logits, 1.0 / temperature)?;
    let all_logits = tape.concat(&[pos_logit, neg_logits], 1)?; // [1, 1 + K]
    let lse = tape.logsumexp_rows(all_logits)?; // [1]
    let pos_flat = tape.reshape(pos_logit, vec![1])?;
    tape.sub(lse, pos_flat)
}

/// Contrastive loss for one query; differentiable w.r.t. the query only.
///
/// `query` must already live on the tape (shape `[1, 128]`, unit norm);
/// `positive` and the queue contents enter as detached constants.
pub fn info_nce(
    tape: &mut Tape,
    query: NodeId,
    positive: &Tensor,
    queue: &NegativeQueue,
    temperature: f64,
) -> Result<NodeId> {
    if temperature <= 0.0 {
        return Err(Error::Precondition(format!(
            "temperature {temperature} must be positive"
        )));
    }
    if tape.shape(query) != [1, EMBED_DIM] || positive.shape() != [1, EMBED_DIM] {
        return Err(Error::Precondition(format!(
            "query {:?} / positive {:?} must be [1, {EMBED_DIM}]",
            tape.shape(query),
            positive.shape()
        )));
    }
    let negatives = queue_leaf(tape, queue)?;
    let pos = tape.constant(positive.shape().to_vec(), positive.values().to_vec())?;
    info_nce_from_leaves(tape, query, pos, negatives, temperature)
}

/// Detached scalar evaluation of the same loss, for metrics reporting.
pub fn info_nce_value(
    query: &[f64],
    positive: &[f64],
    queue: &NegativeQueue,
    temperature: f64,
) -> Result<f64> {
    if queue.is_empty() {
        return Err(Error::Precondition("negative queue is empty".into()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let pos = dot(query, positive) / temperature;
    let mut logits = vec![pos];
    for row in queue.entries().chunks(EMBED_DIM) {
        logits.push(dot(query, row) / temperature);
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - pos)
}

/// The four loss terms in the order they enter the objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    /// point query -> voxel key.
    pub across_pv: f64,
    /// voxel query -> point key.
    pub across_vp: f64,
    /// point query -> point key.
    pub within_point: f64,
    /// voxel query -> voxel key.
    pub within_voxel: f64,
}

/// Joint objective for one sample.
///
/// Queries are the online view-1 embeddings (`point_v1`, `voxel_v1`, on the
/// tape); keys are the detached momentum view-2 embeddings. Each term draws
/// its negatives from the queue of the key's format. All four term values
/// are always reported; the mode decides which contribute to the returned
/// loss node.
#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    tape: &mut Tape,
    point_v1: NodeId,
    point_v2_momentum: &Tensor,
    voxel_v1: NodeId,
    voxel_v2_momentum: &Tensor,
    queue_point: &NegativeQueue,
    queue_voxel: &NegativeQueue,
    config: &LossConfig,
) -> Result<(NodeId, LossTerms)> {
    config.validate().map_err(|e| match e {
        Error::Config(msg) => Error::Precondition(msg),
        other => other,
    })?;
    let tau = config.temperature;

    let l_ab = info_nce(tape, point_v1, voxel_v2_momentum, queue_voxel, tau)?;
    let l_ba = info_nce(tape, voxel_v1, point_v2_momentum, queue_point, tau)?;
    let l_aa = info_nce(tape, point_v1, point_v2_momentum, queue_point, tau)?;
    let l_bb = info_nce(tape, voxel_v1, voxel_v2_momentum, queue_voxel, tau)?;

    let terms = LossTerms {
        across_pv: tape.values(l_ab)[0],
        across_vp: tape.values(l_ba)[0],
        within_point: tape.values(l_aa)[0],
        within_voxel: tape.values(l_bb)[0],
    };

    let loss = match config.mode {
        LossMode::Both => {
            let across = tape.add(l_ab, l_ba)?;
            let within = tape.add(l_aa, l_bb)?;
            tape.add(across, within)?
        }
        LossMode::WithinOnly => tape.add(l_aa, l_bb)?,
        LossMode::AcrossOnly => tape.add(l_ab, l_ba)?,
    };
    Ok((loss, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Domain;

    fn unit(dim_hot: usize) -> Tensor {
        let mut v = vec![0.0; EMBED_DIM];
        v[dim_hot] = 1.0;
        Tensor::new(vec![1, EMBED_DIM], v).unwrap()
    }

    fn queue_with(keys: &[Tensor], capacity: usize) -> NegativeQueue {
        let mut q = NegativeQueue::new(capacity).unwrap();
        q.push(keys).unwrap();
        q
    }

    fn eval_info_nce(query: &Tensor, positive: &Tensor, queue: &NegativeQueue, tau: f64) -> f64 {
        let mut tape = Tape::new();
        let q = tape.leaf(&query.clone().with_grad());
        let loss = info_nce(&mut tape, q, positive, queue, tau).unwrap();
        tape.values(loss)[0]
    }

    #[test]
    fn symmetric_case_is_ln_k_plus_one() {
        // q = e0; positive and 3 negatives all orthogonal to q: every logit
        // zero, softmax uniform over 4 entries.
        let query = unit(0);
        let positive = unit(1);
        let negatives = vec![unit(2), unit(3), unit(4)];
        let queue = queue_with(&negatives, 8);
        let loss = eval_info_nce(&query, &positive, &queue, 0.1);
        assert!((loss - 4.0f64.ln()).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn aligned_positive_with_one_orthogonal_negative() {
        let query = unit(0);
        let positive = unit(0);
        let queue = queue_with(&[unit(1)], 4);
        let loss = eval_info_nce(&query, &positive, &queue, 0.1);
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "loss {loss}");
    }

    /// Independent oracle: materializes every logit and applies the softmax
    /// definition directly, no log-sum-exp shortcut.
    fn brute_force_loss(query: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let pos = (dot(query, positive) / tau).exp();
        let denom: f64 = pos
            + negatives
                .iter()
                .map(|n| (dot(query, n) / tau).exp())
                .sum::<f64>();
        -(pos / denom).ln()
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = RngStream::new(5, Domain::GradCheck, 0, 0);
        for trial in 0..200 {
            let k = 1 + (trial % 64);
            let query = rng.unit_vector(EMBED_DIM);
            let positive = rng.unit_vector(EMBED_DIM);
            let negatives: Vec<Vec<f64>> =
                (0..k).map(|_| rng.unit_vector(EMBED_DIM)).collect();
            let neg_tensors: Vec<Tensor> = negatives
                .iter()
                .map(|n| Tensor::new(vec![1, EMBED_DIM], n.clone()).unwrap())
                .collect();
            let queue = queue_with(&neg_tensors, 64);
            let q = Tensor::new(vec![1, EMBED_DIM], query.clone()).unwrap();
            let p = Tensor::new(vec![1, EMBED_DIM], positive.clone()).unwrap();
            let tau = 0.1;
            let ours = eval_info_nce(&q, &p, &queue, tau);
            let oracle = brute_force_loss(&query, &positive, &negatives, tau);
            assert!((ours - oracle).abs() < 1e-10, "trial {trial}: {ours} vs {oracle}");
            let detached = info_nce_value(&query, &positive, &queue, tau).unwrap();
            assert!((detached - oracle).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_is_finite_across_temperature_range() {
        let mut rng = RngStream::new(6, Domain::GradCheck, 1, 0);
        let query = Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap();
        let positive = Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap();
        let negs: Vec<Tensor> = (0..16)
            .map(|_| Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap())
            .collect();
        let queue = queue_with(&negs, 16);
        for tau in [0.01, 0.05, 0.1, 1.0, 10.0] {
            let loss = eval_info_nce(&query, &positive, &queue, tau);
            assert!(loss.is_finite(), "tau {tau}");
            assert!(loss > 0.0, "positive never sits in the queue, tau {tau}");
        }
    }

    #[test]
    fn loss_decreases_as_positive_aligns() {
        let mut rng = RngStream::new(7, Domain::GradCheck, 2, 0);
        let negs: Vec<Tensor> = (0..8)
            .map(|_| Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap())
            .collect();
        let queue = queue_with(&negs, 8);
        let query = unit(0);
        let mut prev = f64::INFINITY;
        // Sweep the positive from orthogonal toward the query.
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let mut v = vec![0.0; EMBED_DIM];
            v[0] = t;
            v[1] = (1.0 - t * t).sqrt();
            let positive = Tensor::new(vec![1, EMBED_DIM], v).unwrap();
            let loss = eval_info_nce(&query, &positive, &queue, 0.1);
            assert!(loss < prev, "step {step}: {loss} !< {prev}");
            prev = loss;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use crate::tensor::grad_check_at;
        let mut rng = RngStream::new(8, Domain::GradCheck, 3, 0);
        let positive = Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap();
        let negs: Vec<Tensor> = (0..12)
            .map(|_| Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap())
            .collect();
        let queue = queue_with(&negs, 12);
        let builder = move |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            // Normalize inside the graph so perturbed inputs stay valid.
            let q = tape.l2_normalize_rows(ids[0])?;
            info_nce(tape, q, &positive, &queue, 0.1)
        };
        let raw = Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap();
        let report = grad_check_at(&builder, &[raw], 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn empty_queue_is_precondition_error() {
        let queue = NegativeQueue::new(4).unwrap();
        let mut tape = Tape::new();
        let q = tape.leaf(&unit(0).with_grad());
        assert!(matches!(
            info_nce(&mut tape, q, &unit(1), &queue, 0.1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn queue_fifo_eviction() {
        let keys: Vec<Tensor> = (0..5).map(unit).collect();
        let mut q = NegativeQueue::new(4).unwrap();
        q.push(&keys).unwrap();
        let entries = q.entries();
        // a,b,c,d,e pushed into capacity 4: holds b,c,d,e oldest-first.
        for (row, expected_hot) in entries.chunks(EMBED_DIM).zip(1..5) {
            assert_eq!(row[expected_hot], 1.0);
        }
        assert_eq!(q.len(), 4);
        assert_eq!(q.pushed_total(), 5);
    }

    #[test]
    fn queue_push_into_empty_sets_fill_to_batch() {
        let mut q = NegativeQueue::new(16).unwrap();
        q.push(&(0..3).map(unit).collect::<Vec<_>>()).unwrap();
        assert_eq!(q.len(), 3);
    }

    #[test]
    fn queue_batch_larger_than_capacity_keeps_last_k() {
        let mut q = NegativeQueue::new(3).unwrap();
        q.push(&(0..7).map(unit).collect::<Vec<_>>()).unwrap();
        let entries = q.entries();
        for (row, expected_hot) in entries.chunks(EMBED_DIM).zip(4..7) {
            assert_eq!(row[expected_hot], 1.0, "expected e{expected_hot}");
        }
    }

    #[test]
    fn queue_rejects_non_unit_key() {
        let mut q = NegativeQueue::new(4).unwrap();
        let bad = Tensor::new(vec![1, EMBED_DIM], vec![0.5; EMBED_DIM]).unwrap();
        assert!(matches!(q.push(&[bad]), Err(Error::Precondition(_))));
    }

    #[test]
    fn joint_loss_identical_formats_is_four_times_within() {
        let mut rng = RngStream::new(9, Domain::GradCheck, 4, 0);
        let emb = Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap();
        let key = Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap();
        let negs: Vec<Tensor> = (0..8)
            .map(|_| Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap())
            .collect();
        let queue = queue_with(&negs, 8);

        let mut tape = Tape::new();
        let q = tape.leaf(&emb.clone().with_grad());
        let config = LossConfig::default();
        let (loss, terms) =
            joint_loss(&mut tape, q, &key, q, &key, &queue, &queue, &config).unwrap();
        let within = terms.within_point;
        assert_eq!(terms.within_voxel, within);
        assert_eq!(terms.across_pv, within);
        assert_eq!(terms.across_vp, within);
        assert_eq!(tape.values(loss)[0], 4.0 * within);
    }

    #[test]
    fn within_only_ignores_cross_format_inputs() {
        let mut rng = RngStream::new(10, Domain::GradCheck, 5, 0);
        let mut embeddings = Vec::new();
        for _ in 0..4 {
            embeddings.push(Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap());
        }
        let negs: Vec<Tensor> = (0..8)
            .map(|_| Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap())
            .collect();
        let queue_a = queue_with(&negs[..4].to_vec(), 4);
        let queue_b = queue_with(&negs[4..].to_vec(), 4);
        let config = LossConfig {
            temperature: 0.1,
            mode: LossMode::WithinOnly,
        };

        let mut tape = Tape::new();
        let pq = tape.leaf(&embeddings[0].clone().with_grad());
        let vq = tape.leaf(&embeddings[1].clone().with_grad());
        let (loss, _) = joint_loss(
            &mut tape,
            pq,
            &embeddings[2],
            vq,
            &embeddings[3],
            &queue_a,
            &queue_b,
            &config,
        )
        .unwrap();
        // The loss is exactly the two within terms; no cross term leaks in.
        let expect_aa =
            info_nce_value(embeddings[0].values(), embeddings[2].values(), &queue_a, 0.1).unwrap();
        let expect_bb =
            info_nce_value(embeddings[1].values(), embeddings[3].values(), &queue_b, 0.1).unwrap();
        assert!((tape.values(loss)[0] - (expect_aa + expect_bb)).abs() < 1e-12);
    }

    #[test]
    fn joint_loss_mode_both_matches_term_sum() {
        let mut rng = RngStream::new(11, Domain::GradCheck, 6, 0);
        let mk = |rng: &mut RngStream| {
            Tensor::new(vec![1, EMBED_DIM], rng.unit_vector(EMBED_DIM)).unwrap()
        };
        for trial in 0..50 {
            let (p1, p2, v1, v2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let negs_a: Vec<Tensor> = (0..16).map(|_| mk(&mut rng)).collect();
            let negs_b: Vec<Tensor> = (0..16).map(|_| mk(&mut rng)).collect();
            let queue_a = queue_with(&negs_a, 16);
            let queue_b = queue_with(&negs_b, 16);
            let mut tape = Tape::new();
            let pq = tape.leaf(&p1.clone().with_grad());
            let vq = tape.leaf(&v1.clone().with_grad());
            let (loss, terms) = joint_loss(
                &mut tape,
                pq,
                &p2,
                vq,
                &v2,
                &queue_a,
                &queue_b,
                &LossConfig::default(),
            )
            .unwrap();
            let sum =
                terms.across_pv + terms.across_vp + terms.within_point + terms.within_voxel;
            assert!((tape.values(loss)[0] - sum).abs() < 1e-10, "trial {trial}");
            // And every term agrees with the independent evaluation.
            let oracle_ab =
                info_nce_value(p1.values(), v2.values(), &queue_b, 0.1).unwrap();
            assert!((terms.across_pv - oracle_ab).abs() < 1e-10);
        }
    }
}
