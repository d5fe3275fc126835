//! Additive-noise likelihood with parent masking and closed-form ridge
//! adaptation of the interventional heads.
//!
//! Each variable i has two mechanisms: an observational MLP `f_i` and an
//! interventional head `w_i^T h(.)` sharing one feature trunk across
//! variables. The per-task intervention mask switches between them:
//!
//! ```text
//! x_i_hat = (1 - m_i) * f_i(a_i o x) + m_i * w_i^T h(a_i o x)
//! ```
//!
//! where `a_i` is column i of the adjacency sample. The heads `w_i` are the
//! only task-specific parameters; [`ridge_adapt`] refits them on a support
//! set with the closed-form regularized least-squares solution, recorded
//! through the tape's solve primitive so outer-loop gradients reach the trunk
//! and the graph logits.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpHandles, ParamBinder};
use crate::tape::{DiffValue, Tape};

/// Task-shared likelihood parameters plus the ridge setting. The task heads
/// themselves are never stored here: they are recomputed per task (analytical
/// mode) or adapted from `head_init` (gradient-based ablations).
#[derive(Debug, Clone)]
pub struct MechanismParams {
    pub obs_mlps: Vec<Mlp>,
    pub int_trunk: Mlp,
    /// (d, d_h) shared initialization of the task-specific heads; only the
    /// MAML ablations train it.
    pub head_init: Array2<f64>,
    pub ridge_lambda: f64,
}

impl MechanismParams {
    pub fn new(
        d: usize,
        d_h: usize,
        hidden: usize,
        ridge_lambda: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let obs_mlps = (0..d)
            .map(|_| Mlp::new(&[d, hidden, hidden, 1], Activation::Tanh, Activation::Linear, rng))
            .collect();
        let int_trunk = Mlp::new(&[d, hidden, hidden, d_h], Activation::Tanh, Activation::Tanh, rng);
        MechanismParams {
            obs_mlps,
            int_trunk,
            head_init: Array2::zeros((d, d_h)),
            ridge_lambda,
        }
    }

    pub fn d(&self) -> usize {
        self.obs_mlps.len()
    }

    pub fn d_h(&self) -> usize {
        self.int_trunk.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ridge_lambda > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ridge lambda must be strictly positive, got {}",
                self.ridge_lambda
            )));
        }
        if self.head_init.dim() != (self.d(), self.d_h()) {
            return Err(Error::Dimension {
                what: "head_init",
                expected: self.d() * self.d_h(),
                found: self.head_init.len(),
            });
        }
        Ok(())
    }

    pub fn visit(&self, f: &mut impl FnMut(&str, &Array2<f64>)) {
        for (i, mlp) in self.obs_mlps.iter().enumerate() {
            mlp.visit(&format!("mech.obs{i}"), f);
        }
        self.int_trunk.visit("mech.trunk", f);
        f("mech.head_init", &self.head_init);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
        for (i, mlp) in self.obs_mlps.iter_mut().enumerate() {
            mlp.visit_mut(&format!("mech.obs{i}"), f);
        }
        self.int_trunk.visit_mut("mech.trunk", f);
        f("mech.head_init", &mut self.head_init);
    }

    pub fn register(&self, tape: &mut Tape, binder: &mut ParamBinder) -> Result<MechHandles> {
        self.validate()?;
        let mut obs = Vec::with_capacity(self.d());
        for (i, mlp) in self.obs_mlps.iter().enumerate() {
            obs.push(binder.mlp(tape, &format!("mech.obs{i}"), mlp)?);
        }
        let trunk = binder.mlp(tape, "mech.trunk", &self.int_trunk)?;
        let head_init = binder.leaf(tape, "mech.head_init", &self.head_init)?;
        Ok(MechHandles {
            obs,
            trunk,
            head_init,
            ridge_lambda: self.ridge_lambda,
            d: self.d(),
            d_h: self.d_h(),
        })
    }
}

/// Tape-side handles for [`MechanismParams`].
pub struct MechHandles {
    pub obs: Vec<MlpHandles>,
    pub trunk: MlpHandles,
    pub head_init: DiffValue,
    pub ridge_lambda: f64,
    pub d: usize,
    pub d_h: usize,
}

impl MechHandles {
    /// Column i of the adjacency value as a 1xd parent-mask row.
    pub fn parent_mask(&self, tape: &mut Tape, a_mask: DiffValue, i: usize) -> Result<DiffValue> {
        let col = tape.col(a_mask, i)?;
        tape.transpose(col)
    }
}

/// Closed-form per-task adaptation result: one fitted head per variable plus
/// the cached design matrices and masked inputs they were built from.
pub struct RidgeFit {
    /// Fitted heads, each (d_h, 1).
    pub weights: Vec<DiffValue>,
    /// Design matrices H_i, each (N, d_h).
    pub design: Vec<DiffValue>,
    /// Regression targets, each (N, 1).
    pub targets: Vec<DiffValue>,
    /// Parent-masked support per variable, each (N, d).
    pub masked: Vec<DiffValue>,
}

/// Solve one ridge problem `min_w ||y - H w||^2 + lambda ||w||^2` in closed
/// form on the tape.
pub fn ridge_solve(
    tape: &mut Tape,
    design: DiffValue,
    y: DiffValue,
    lambda: f64,
) -> Result<DiffValue> {
    let ht = tape.transpose(design)?;
    let gram = tape.matmul(ht, design)?;
    let rhs = tape.matmul(ht, y)?;
    tape.solve_spd(gram, rhs, lambda)
}

/// Fit every variable's interventional head on the support set.
///
/// `a_mask` is the adjacency sample (straight-through hard, or soft when a
/// gradient check asks for a fully smooth path); gradients flow through the
/// solve into the trunk and, via the mask, the graph logits.
pub fn ridge_adapt(
    tape: &mut Tape,
    mech: &MechHandles,
    support: DiffValue,
    a_mask: DiffValue,
) -> Result<RidgeFit> {
    let n = tape.shape(support).0;
    if n < 1 {
        return Err(Error::InvalidArgument(
            "ridge_adapt needs a non-empty support set".into(),
        ));
    }
    let d = mech.d;
    let mut weights = Vec::with_capacity(d);
    let mut design = Vec::with_capacity(d);
    let mut targets = Vec::with_capacity(d);
    let mut masked_all = Vec::with_capacity(d);
    for i in 0..d {
        let mask_row = mech.parent_mask(tape, a_mask, i)?;
        let masked = tape.hadamard(support, mask_row)?;
        let h_i = mech.trunk.forward(tape, masked)?;
        let y_i = tape.col(support, i)?;
        let w_i = ridge_solve(tape, h_i, y_i, mech.ridge_lambda)?;
        weights.push(w_i);
        design.push(h_i);
        targets.push(y_i);
        masked_all.push(masked);
    }
    Ok(RidgeFit {
        weights,
        design,
        targets,
        masked: masked_all,
    })
}

/// Predictions and residuals for a data batch.
pub struct BatchPrediction {
    pub pred: DiffValue,
    pub resid: DiffValue,
    /// Per-variable parent-masked inputs, each (N, d).
    pub masked: Vec<DiffValue>,
}

/// Vectorized switched prediction over all rows and variables.
///
/// `heads` supplies the interventional head for each variable (from a
/// [`RidgeFit`] or an adapted copy); `m` is the 1xd intervention mask, hard
/// or soft, and may sit anywhere in (0, 1) for gradient flow.
pub fn batch_predict(
    tape: &mut Tape,
    mech: &MechHandles,
    heads: &[DiffValue],
    data: DiffValue,
    a_mask: DiffValue,
    m: DiffValue,
) -> Result<BatchPrediction> {
    let d = mech.d;
    if heads.len() != d {
        return Err(Error::Dimension {
            what: "interventional heads",
            expected: d,
            found: heads.len(),
        });
    }
    if tape.shape(m) != (1, d) {
        let got = tape.shape(m);
        return Err(Error::ShapeMismatch {
            op: "batch_predict",
            lhs: (1, d),
            rhs: got,
        });
    }
    let one = tape.scalar(1.0)?;
    let mut cols = Vec::with_capacity(d);
    let mut masked_all = Vec::with_capacity(d);
    for i in 0..d {
        let mask_row = mech.parent_mask(tape, a_mask, i)?;
        let masked = tape.hadamard(data, mask_row)?;
        let obs_i = mech.obs[i].forward(tape, masked)?;
        let feats = mech.trunk.forward(tape, masked)?;
        let int_i = tape.matmul(feats, heads[i])?;
        let m_i = tape.col(m, i)?;
        let keep = tape.sub(one, m_i)?;
        let obs_part = tape.hadamard(obs_i, keep)?;
        let int_part = tape.hadamard(int_i, m_i)?;
        cols.push(tape.add(obs_part, int_part)?);
        masked_all.push(masked);
    }
    let pred = tape.concat_cols(&cols)?;
    let resid = tape.sub(data, pred)?;
    Ok(BatchPrediction {
        pred,
        resid,
        masked: masked_all,
    })
}

/// Single-observation prediction of variable `i` (thin wrapper over the
/// batched path, so the two agree bit for bit).
pub fn predict(
    tape: &mut Tape,
    mech: &MechHandles,
    heads: &[DiffValue],
    x: DiffValue,
    a_mask: DiffValue,
    m: DiffValue,
    i: usize,
) -> Result<DiffValue> {
    let batch = batch_predict(tape, mech, heads, x, a_mask, m)?;
    tape.col(batch.pred, i)
}
