//! Small dense networks and the parameter bookkeeping shared by all modules.
//!
//! Parameters live as plain arrays in the model structs; each forward pass
//! registers them as leaves on a fresh tape via a [`ParamBinder`], which keeps
//! the (name, handle) pairs so gradients can be collected by name afterwards.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng::normal;
use crate::tape::{DiffValue, GradientMap, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Linear,
}

/// One dense layer: `x @ w + b` with `w` of shape (fan_in, fan_out).
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

/// A multi-layer perceptron with a uniform hidden activation and a separate
/// output activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// Glorot-initialized MLP over the given layer dimensions
    /// (`dims = [in, h1, ..., out]`).
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for win in dims.windows(2) {
            let (fan_in, fan_out) = (win[0], win[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| normal(rng) * std);
            let b = Array2::zeros((1, fan_out));
            layers.push(Layer { w, b });
        }
        Mlp {
            layers,
            hidden,
            output,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.dim().0
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.dim().1
    }

    pub fn visit(&self, prefix: &str, f: &mut impl FnMut(&str, &Array2<f64>)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("{prefix}.l{i}.w"), &layer.w);
            f(&format!("{prefix}.l{i}.b"), &layer.b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut Array2<f64>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("{prefix}.l{i}.w"), &mut layer.w);
            f(&format!("{prefix}.l{i}.b"), &mut layer.b);
        }
    }
}

/// Tape-side handles for an [`Mlp`]'s parameters.
pub struct MlpHandles {
    pairs: Vec<(DiffValue, DiffValue)>,
    hidden: Activation,
    output: Activation,
}

impl MlpHandles {
    /// Forward an (n, fan_in) batch through the network.
    pub fn forward(&self, tape: &mut Tape, x: DiffValue) -> Result<DiffValue> {
        let mut h = x;
        let last = self.pairs.len() - 1;
        for (i, (w, b)) in self.pairs.iter().enumerate() {
            let z = tape.matmul(h, *w)?;
            let z = tape.add(z, *b)?;
            let act = if i == last { self.output } else { self.hidden };
            h = match act {
                Activation::Tanh => tape.tanh(z)?,
                Activation::Relu => tape.relu(z)?,
                Activation::Linear => z,
            };
        }
        Ok(h)
    }
}

/// Records (name, leaf) pairs while parameters are registered on a tape, then
/// turns a [`GradientMap`] back into named gradient arrays.
pub struct ParamBinder {
    entries: Vec<(String, DiffValue)>,
}

impl ParamBinder {
    pub fn new() -> Self {
        ParamBinder {
            entries: Vec::new(),
        }
    }

    pub fn leaf(&mut self, tape: &mut Tape, name: &str, data: &Array2<f64>) -> Result<DiffValue> {
        let v = tape.leaf(data.clone())?;
        self.entries.push((name.to_string(), v));
        Ok(v)
    }

    pub fn mlp(&mut self, tape: &mut Tape, prefix: &str, mlp: &Mlp) -> Result<MlpHandles> {
        let mut pairs = Vec::with_capacity(mlp.layers.len());
        for (i, layer) in mlp.layers.iter().enumerate() {
            let w = self.leaf(tape, &format!("{prefix}.l{i}.w"), &layer.w)?;
            let b = self.leaf(tape, &format!("{prefix}.l{i}.b"), &layer.b)?;
            pairs.push((w, b));
        }
        Ok(MlpHandles {
            pairs,
            hidden: mlp.hidden,
            output: mlp.output,
        })
    }

    /// Gradients by parameter name. Parameters that received no gradient are
    /// omitted.
    pub fn collect(&self, grads: &GradientMap) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        for (name, v) in &self.entries {
            if let Some(g) = grads.get(*v) {
                out.push((name.clone(), g.clone()));
            }
        }
        out
    }

    pub fn handles(&self) -> &[(String, DiffValue)] {
        &self.entries
    }
}

impl Default for ParamBinder {
    fn default() -> Self {
        Self::new()
    }
}
