//! Differentiable posterior over causal DAGs.
//!
//! A joint sample is assembled as `A = Pi^T U Pi`: a strictly upper-triangular
//! edge matrix `U` over rank positions (per-entry binary Gumbel-Softmax on the
//! edge logits) conjugated by a permutation `Pi` of nodes onto ranks
//! (Gumbel-perturbed scores, argsorted; relaxed by an iterated masked
//! softmax). Every hard sample is acyclic by construction. Hard values are
//! paired with their soft relaxations straight-through, so the likelihood
//! sees exact binary masks while gradients reach the logits.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ParamBinder;
use crate::rng::gumbel;
use crate::tape::{DiffValue, Tape};

/// Masking value that removes already-ranked nodes from a relaxed softmax row.
const MASK_LOGIT: f64 = 1e9;

/// Variational parameters of the DAG posterior: edge logits over rank pairs
/// (strict upper triangle; diagonal and lower triangle are ignored), node
/// ordering scores, and the two relaxation temperatures.
#[derive(Debug, Clone)]
pub struct DagPosteriorParams {
    pub edge_logits: Array2<f64>,
    pub order_scores: Array2<f64>,
    pub temperature_u: f64,
    pub temperature_pi: f64,
}

impl DagPosteriorParams {
    pub fn new(d: usize) -> Self {
        DagPosteriorParams {
            edge_logits: Array2::zeros((d, d)),
            order_scores: Array2::zeros((1, d)),
            temperature_u: 1.0,
            temperature_pi: 1.0,
        }
    }

    pub fn d(&self) -> usize {
        self.order_scores.dim().1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature_u > 0.0) || !(self.temperature_pi > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperatures must be strictly positive, got ({}, {})",
                self.temperature_u, self.temperature_pi
            )));
        }
        if self.edge_logits.dim() != (self.d(), self.d()) {
            return Err(Error::Dimension {
                what: "edge_logits",
                expected: self.d(),
                found: self.edge_logits.dim().0,
            });
        }
        Ok(())
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &Array2<f64>)) {
        f("dag.edge_logits", &self.edge_logits);
        f("dag.order_scores", &self.order_scores);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
        f("dag.edge_logits", &mut self.edge_logits);
        f("dag.order_scores", &mut self.order_scores);
    }
}

/// Tape handles for the posterior parameters.
pub struct DagHandles {
    pub edge_logits: DiffValue,
    pub order_scores: DiffValue,
    pub temperature_u: f64,
    pub temperature_pi: f64,
    d: usize,
}

impl DagPosteriorParams {
    pub fn register(&self, tape: &mut Tape, binder: &mut ParamBinder) -> Result<DagHandles> {
        self.validate()?;
        Ok(DagHandles {
            edge_logits: binder.leaf(tape, "dag.edge_logits", &self.edge_logits)?,
            order_scores: binder.leaf(tape, "dag.order_scores", &self.order_scores)?,
            temperature_u: self.temperature_u,
            temperature_pi: self.temperature_pi,
            d: self.d(),
        })
    }
}

/// One joint draw (U, Pi, A) with relaxations attached.
///
/// Invariants: `a_hard = pi_hard^T u_hard pi_hard` exactly, `a_hard` is
/// acyclic (its topological order is `order`), and `pi_hard` has exactly one
/// 1 per row and column. `a_st` carries the hard values forward and routes
/// gradients to `a_soft`.
pub struct DagSample {
    pub u_hard: Array2<f64>,
    pub pi_hard: Array2<f64>,
    pub a_hard: Array2<f64>,
    pub u_soft: DiffValue,
    pub pi_soft: DiffValue,
    pub a_soft: DiffValue,
    pub a_st: DiffValue,
    /// `order[r]` is the node placed at rank r.
    pub order: Vec<usize>,
}

/// Per-entry binary Gumbel-Softmax over the strict upper triangle:
/// `u_soft = sigmoid((phi + g1 - g0) / tau)`, hard-thresholded at 0.5.
pub fn sample_upper(tape: &mut Tape, h: &DagHandles) -> Result<(Array2<f64>, DiffValue)> {
    let d = h.d;
    let mut noise = Array2::zeros((d, d));
    let mut mask = Array2::zeros((d, d));
    for r in 0..d {
        for s in (r + 1)..d {
            let g1 = gumbel(tape.rng());
            let g0 = gumbel(tape.rng());
            noise[[r, s]] = g1 - g0;
            mask[[r, s]] = 1.0;
        }
    }
    let noise_v = tape.constant(noise)?;
    let mask_v = tape.constant(mask.clone())?;
    let z = tape.add(h.edge_logits, noise_v)?;
    let z = tape.scale(z, 1.0 / h.temperature_u)?;
    let s = tape.sigmoid(z)?;
    let u_soft = tape.hadamard(s, mask_v)?;
    let mut u_hard = Array2::zeros((d, d));
    {
        let soft = tape.data(u_soft);
        for r in 0..d {
            for c in (r + 1)..d {
                if soft[[r, c]] > 0.5 {
                    u_hard[[r, c]] = 1.0;
                }
            }
        }
    }
    Ok((u_hard, u_soft))
}

/// Gumbel-Top-k permutation: perturb scores, argsort descending for the hard
/// permutation; the relaxation rebuilds each rank row as a masked softmax of
/// the same perturbed scores so every soft row sums to 1.
pub fn sample_permutation(
    tape: &mut Tape,
    h: &DagHandles,
) -> Result<(Array2<f64>, DiffValue, Vec<usize>)> {
    let d = h.d;
    let mut noise = Array2::zeros((1, d));
    for j in 0..d {
        noise[[0, j]] = gumbel(tape.rng());
    }
    let noise_v = tape.constant(noise)?;
    let scores = tape.add(h.order_scores, noise_v)?;

    let perturbed: Vec<f64> = tape.data(scores).row(0).to_vec();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| perturbed[b].total_cmp(&perturbed[a]));

    let mut rows = Vec::with_capacity(d);
    let mut taken = vec![false; d];
    for &node in &order {
        let mut mask = Array2::zeros((1, d));
        for j in 0..d {
            if taken[j] {
                mask[[0, j]] = MASK_LOGIT;
            }
        }
        let mask_v = tape.constant(mask)?;
        let masked = tape.sub(scores, mask_v)?;
        let scaled = tape.scale(masked, 1.0 / h.temperature_pi)?;
        rows.push(tape.softmax(scaled, 1)?);
        taken[node] = true;
    }
    let pi_soft = tape.stack_rows(&rows)?;

    let mut pi_hard = Array2::zeros((d, d));
    for (r, &node) in order.iter().enumerate() {
        pi_hard[[r, node]] = 1.0;
    }
    Ok((pi_hard, pi_soft, order))
}

/// Joint draw of (U, Pi, A); `a_soft = pi_soft^T u_soft pi_soft` lives on the
/// tape for gradient flow.
pub fn sample_adjacency(tape: &mut Tape, h: &DagHandles) -> Result<DagSample> {
    let (u_hard, u_soft) = sample_upper(tape, h)?;
    let (pi_hard, pi_soft, order) = sample_permutation(tape, h)?;

    let pi_t = tape.transpose(pi_soft)?;
    let left = tape.matmul(pi_t, u_soft)?;
    let a_soft = tape.matmul(left, pi_soft)?;

    let d = h.d;
    let mut a_hard = Array2::zeros((d, d));
    for r in 0..d {
        for s in (r + 1)..d {
            if u_hard[[r, s]] != 0.0 {
                a_hard[[order[r], order[s]]] = 1.0;
            }
        }
    }
    let a_st = tape.straight_through(a_soft, a_hard.clone())?;
    Ok(DagSample {
        u_hard,
        pi_hard,
        a_hard,
        u_soft,
        pi_soft,
        a_soft,
        a_st,
        order,
    })
}

/// Hard-only draw without tape bookkeeping; same distribution as
/// [`sample_adjacency`]. Used for Monte-Carlo edge marginals and metric
/// estimation.
pub fn sample_hard(params: &DagPosteriorParams, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = params.d();
    let mut order: Vec<usize> = (0..d).collect();
    let perturbed: Vec<f64> = (0..d)
        .map(|j| params.order_scores[[0, j]] + gumbel(rng))
        .collect();
    order.sort_by(|&a, &b| perturbed[b].total_cmp(&perturbed[a]));
    let mut a_hard = Array2::zeros((d, d));
    for r in 0..d {
        for s in (r + 1)..d {
            let z = params.edge_logits[[r, s]] + gumbel(rng) - gumbel(rng);
            if z > 0.0 {
                a_hard[[order[r], order[s]]] = 1.0;
            }
        }
    }
    a_hard
}

/// Monte-Carlo edge marginals `P(A_ij = 1)` over hard samples.
pub fn edge_probabilities(
    params: &DagPosteriorParams,
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    if n_samples < 1 {
        return Err(Error::InvalidArgument(
            "edge_probabilities needs at least one sample".into(),
        ));
    }
    let d = params.d();
    let mut acc = Array2::zeros((d, d));
    for _ in 0..n_samples {
        acc += &sample_hard(params, rng);
    }
    Ok(acc / n_samples as f64)
}
