//! Finite-difference verification of the backward pass.

use super::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{Domain, RngStream};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over
    /// every element of every input.
    pub max_rel_error: f64,
    /// Total number of compared gradient entries.
    pub checked: usize,
}

/// Checks the analytic gradient of `builder` against central finite
/// differences at explicitly provided inputs.
///
/// `builder` must construct a scalar output from its input nodes and be a
/// pure function of them.
pub fn grad_check_at(
    builder: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    inputs: &[Tensor],
    eps: f64,
) -> Result<GradCheckReport> {
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ei| (ti, ei)))
        .collect();
    grad_check_coords(builder, inputs, eps, &coords)
}

/// Like [`grad_check_at`] but compares only `probes` randomly chosen input
/// coordinates; used where the input is large (full encoder parameters).
pub fn grad_check_sampled(
    builder: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    inputs: &[Tensor],
    eps: f64,
    probes: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = RngStream::new(seed, Domain::GradCheck, u64::MAX, 0);
    let mut coords = Vec::with_capacity(probes);
    for _ in 0..probes {
        let ti = rng.index(inputs.len());
        let ei = rng.index(inputs[ti].numel());
        coords.push((ti, ei));
    }
    grad_check_coords(builder, inputs, eps, &coords)
}

fn grad_check_coords(
    builder: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    inputs: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = points.iter().map(|t| tape.leaf(t)).collect();
        let out = builder(&mut tape, &ids)?;
        if tape.values(out).len() != 1 {
            return Err(Error::Precondition(format!(
                "grad_check builder must produce a scalar, got shape {:?}",
                tape.shape(out)
            )));
        }
        Ok(tape.values(out)[0])
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_grad()))
        .collect();
    let out = builder(&mut tape, &ids)?;
    if tape.values(out).len() != 1 {
        return Err(Error::Precondition(format!(
            "grad_check builder must produce a scalar, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = ids.iter().map(|&id| grads.get_or_zero(id)).collect();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &(ti, ei) in coords {
        let original = inputs[ti].values()[ei];
        work[ti].values_mut()[ei] = original + eps;
        let f_plus = eval(&work)?;
        work[ti].values_mut()[ei] = original - eps;
        let f_minus = eval(&work)?;
        work[ti].values_mut()[ei] = original;

        let numeric = (f_plus - f_minus) / (2.0 * eps);
        let a = analytic[ti].values()[ei];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        checked,
    })
}

/// Samples inputs uniformly in `[-1, 1]` from the seeded stream and runs
/// [`grad_check_at`].
pub fn grad_check(
    builder: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    input_shapes: &[Vec<usize>],
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor> = input_shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let mut rng = RngStream::new(seed, Domain::GradCheck, i as u64, 0);
            let numel: usize = shape.iter().product();
            let values: Vec<f64> = (0..numel).map(|_| rng.range(-1.0, 1.0)).collect();
            Tensor::new(shape.clone(), values)
        })
        .collect::<Result<_>>()?;
    grad_check_at(builder, &inputs, eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_sum_gradient_is_tight() {
        let builder = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let prod = tape.matmul(ids[0], ids[1])?;
            tape.sum_all(prod)
        };
        let report = grad_check(&builder, &[vec![3, 4], vec![4, 2]], 1e-5, 42).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let builder = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let prod = tape.matmul(ids[0], ids[1])?;
            let biased = tape.bias_add(prod, ids[2])?;
            let normed = tape.l2_normalize_rows(biased)?;
            let lse = tape.logsumexp_rows(normed)?;
            tape.mean_all(lse)
        };
        for seed in 0..20 {
            let report =
                grad_check(&builder, &[vec![4, 3], vec![3, 5], vec![5]], 1e-5, seed).unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "seed {seed}: max rel error {}",
                report.max_rel_error
            );
        }
    }

    #[test]
    fn relu_away_from_kinks_is_tight() {
        let builder = |tape: &mut Tape, ids: &[NodeId]| -> Result<NodeId> {
            let y = tape.relu(ids[0])?;
            tape.sum_all(y)
        };
        // Inputs pushed away from the kink: |x| > 10 * eps.
        let mut rng = RngStream::new(7, Domain::GradCheck, 0, 0);
        let values: Vec<f64> = (0..64)
            .map(|_| {
                let v = rng.range(-1.0, 1.0);
                if v >= 0.0 {
                    v + 0.01
                } else {
                    v - 0.01
                }
            })
            .collect();
        let input = Tensor::new(vec![8, 8], values).unwrap();
        let report = grad_check_at(&builder, &[input], 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-6,
            "max rel error {}",
            report.max_rel_error
        );
    }
}
