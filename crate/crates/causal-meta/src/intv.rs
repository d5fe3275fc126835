//! Intervention-target prediction from a support set.
//!
//! The pipeline per task: engineer a feature matrix `C` from the support data
//! and the likelihood model's predictions, pool it into a fixed-size vector
//! with two permutation-invariant Deep-Sets reductions (mean of embeddings
//! and embedding of the mean), and map that through the logit network to the
//! per-variable intervention logits. Targets are drawn with a per-coordinate
//! binary Gumbel-Softmax and paired straight-through.
//!
//! `C` stacks nine (N, d) blocks side by side, in this order: the data `D`,
//! the observational predictions, their residual and squared residual, the
//! interventional predictions, their residual and squared residual, and the
//! broadcast column mean and standard deviation of `D`.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::likelihood::{MechHandles, RidgeFit};
use crate::nn::{Activation, Mlp, MlpHandles, ParamBinder};
use crate::rng::gumbel;
use crate::tape::{mean_axis0_sorted, DiffValue, Tape};

/// Task-shared predictor parameters: the Deep-Sets embedding network
/// (9d -> k) and the logit network (2k -> d), plus the mask temperature.
#[derive(Debug, Clone)]
pub struct TargetPredictorParams {
    pub pool_net: Mlp,
    pub logit_net: Mlp,
    pub temperature_m: f64,
}

impl TargetPredictorParams {
    pub fn new(d: usize, k: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        TargetPredictorParams {
            pool_net: Mlp::new(
                &[9 * d, hidden, hidden, k],
                Activation::Tanh,
                Activation::Linear,
                rng,
            ),
            logit_net: Mlp::new(
                &[2 * k, hidden, hidden, d],
                Activation::Tanh,
                Activation::Linear,
                rng,
            ),
            temperature_m: 0.5,
        }
    }

    pub fn d(&self) -> usize {
        self.logit_net.output_dim()
    }

    pub fn k(&self) -> usize {
        self.pool_net.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_net.input_dim() != 9 * self.d() {
            return Err(Error::Dimension {
                what: "pool_net input",
                expected: 9 * self.d(),
                found: self.pool_net.input_dim(),
            });
        }
        if self.logit_net.input_dim() != 2 * self.k() {
            return Err(Error::Dimension {
                what: "logit_net input",
                expected: 2 * self.k(),
                found: self.logit_net.input_dim(),
            });
        }
        if !(self.temperature_m > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "mask temperature must be positive, got {}",
                self.temperature_m
            )));
        }
        Ok(())
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &Array2<f64>)) {
        self.pool_net.visit("intv.pool", f);
        self.logit_net.visit("intv.logit", f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
        self.pool_net.visit_mut("intv.pool", f);
        self.logit_net.visit_mut("intv.logit", f);
    }

    pub fn register(&self, tape: &mut Tape, binder: &mut ParamBinder) -> Result<PredictorHandles> {
        self.validate()?;
        Ok(PredictorHandles {
            pool: binder.mlp(tape, "intv.pool", &self.pool_net)?,
            logit: binder.mlp(tape, "intv.logit", &self.logit_net)?,
            temperature_m: self.temperature_m,
            d: self.d(),
        })
    }
}

pub struct PredictorHandles {
    pub pool: MlpHandles,
    pub logit: MlpHandles,
    pub temperature_m: f64,
    pub d: usize,
}

/// Per-task target sample: the logit vector and the relaxed / hard masks.
pub struct InterventionSample {
    /// Copy of the logit values.
    pub logits: Vec<f64>,
    pub zeta: DiffValue,
    pub m_soft: DiffValue,
    pub m_hard: Array2<f64>,
    /// Straight-through mask: hard forward, soft gradient.
    pub m_st: DiffValue,
}

/// Sort rows lexicographically (total order on the float sequence). The
/// canonical row order makes every downstream reduction over support rows
/// bitwise invariant to how the caller happened to order them.
pub fn canonicalize_rows(data: &Array2<f64>) -> Array2<f64> {
    let (n, d) = data.dim();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        for j in 0..d {
            let cmp = data[[a, j]].total_cmp(&data[[b, j]]);
            if cmp != std::cmp::Ordering::Equal {
                return cmp;
            }
        }
        std::cmp::Ordering::Equal
    });
    let mut out = Array2::zeros((n, d));
    for (r, &src) in idx.iter().enumerate() {
        out.row_mut(r).assign(&data.row(src));
    }
    out
}

/// Unbiased column standard deviation with order-invariant accumulation;
/// zero when there is a single row (the only permutation-invariant choice
/// carrying no spurious signal).
fn column_std_sorted(data: &Array2<f64>, mean: &Array2<f64>) -> Array2<f64> {
    let (n, d) = data.dim();
    let mut out = Array2::zeros((1, d));
    if n < 2 {
        return out;
    }
    let mut devs: Vec<f64> = Vec::with_capacity(n);
    for j in 0..d {
        devs.clear();
        for i in 0..n {
            let dv = data[[i, j]] - mean[[0, j]];
            devs.push(dv * dv);
        }
        devs.sort_unstable_by(f64::total_cmp);
        let mut s = 0.0;
        for v in &devs {
            s += v;
        }
        out[[0, j]] = (s / (n - 1) as f64).sqrt();
    }
    out
}

/// Build the (N, 9d) feature matrix for one support set.
///
/// `fit` supplies the task-adapted heads and the cached per-variable design
/// matrices and masked inputs (all computed on the same support rows).
pub fn build_features(
    tape: &mut Tape,
    mech: &MechHandles,
    fit: &RidgeFit,
    support: DiffValue,
) -> Result<DiffValue> {
    let n = tape.shape(support).0;
    if n < 1 {
        return Err(Error::InvalidArgument(
            "build_features needs at least one support row".into(),
        ));
    }
    let d = mech.d;
    let mut obs_cols = Vec::with_capacity(d);
    let mut int_cols = Vec::with_capacity(d);
    for i in 0..d {
        obs_cols.push(mech.obs[i].forward(tape, fit.masked[i])?);
        int_cols.push(tape.matmul(fit.design[i], fit.weights[i])?);
    }
    let x_obs = tape.concat_cols(&obs_cols)?;
    let x_int = tape.concat_cols(&int_cols)?;
    let r_obs = tape.sub(support, x_obs)?;
    let r_obs_sq = tape.square(r_obs)?;
    let r_int = tape.sub(support, x_int)?;
    let r_int_sq = tape.square(r_int)?;

    let mean = mean_axis0_sorted(tape.data(support));
    let std = column_std_sorted(tape.data(support), &mean);
    let mut mean_bc = Array2::zeros((n, d));
    let mut std_bc = Array2::zeros((n, d));
    for r in 0..n {
        mean_bc.row_mut(r).assign(&mean.row(0));
        std_bc.row_mut(r).assign(&std.row(0));
    }
    let mean_v = tape.constant(mean_bc)?;
    let std_v = tape.constant(std_bc)?;

    tape.concat_cols(&[
        support, x_obs, r_obs, r_obs_sq, x_int, r_int, r_int_sq, mean_v, std_v,
    ])
}

/// Deep-Sets pooling: concat(mean of embeddings, embedding of the mean).
pub fn pool(tape: &mut Tape, handles: &PredictorHandles, c: DiffValue) -> Result<DiffValue> {
    if tape.shape(c).0 < 1 {
        return Err(Error::InvalidArgument(
            "pool needs at least one feature row".into(),
        ));
    }
    let emb = handles.pool.forward(tape, c)?;
    let z_me = tape.mean_axis0(emb)?;
    let cbar = tape.mean_axis0(c)?;
    let z_em = handles.pool.forward(tape, cbar)?;
    tape.concat_cols(&[z_me, z_em])
}

/// Draw a target mask from given logits: per-coordinate binary Gumbel-Softmax
/// at the mask temperature, hard-thresholded and paired straight-through.
pub fn sample_mask(
    tape: &mut Tape,
    zeta: DiffValue,
    temperature: f64,
) -> Result<InterventionSample> {
    let (one, d) = tape.shape(zeta);
    if one != 1 {
        let got = tape.shape(zeta);
        return Err(Error::ShapeMismatch {
            op: "sample_mask",
            lhs: (1, d),
            rhs: got,
        });
    }
    let mut noise = Array2::zeros((1, d));
    for j in 0..d {
        let g1 = gumbel(tape.rng());
        let g0 = gumbel(tape.rng());
        noise[[0, j]] = g1 - g0;
    }
    let noise_v = tape.constant(noise)?;
    let z = tape.add(zeta, noise_v)?;
    let z = tape.scale(z, 1.0 / temperature)?;
    let m_soft = tape.sigmoid(z)?;
    let m_hard = tape.data(m_soft).mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
    let m_st = tape.straight_through(m_soft, m_hard.clone())?;
    Ok(InterventionSample {
        logits: tape.data(zeta).row(0).to_vec(),
        zeta,
        m_soft,
        m_hard,
        m_st,
    })
}

/// Map a pooled feature vector to logits and sample the target mask.
pub fn predict_targets(
    tape: &mut Tape,
    handles: &PredictorHandles,
    features: DiffValue,
) -> Result<InterventionSample> {
    let zeta = handles.logit.forward(tape, features)?;
    sample_mask(tape, zeta, handles.temperature_m)
}
