//! Residual graph convolutional network with an explicit reverse pass.
//!
//! Each layer computes `Z = P X W` and emits `Z + ReLU(Z)`; the optional
//! [`ResidualMode::Input`] variant emits `X + ReLU(Z)` instead, with `X`
//! zero-padded on the right when it is narrower than `Z`. With [`GcnModel::with_layer_biases`] each layer adds a trainable
//! bias to `P X W`; without it the stack is positively homogeneous in its
//! input, and on constant inputs every embedding is a multiple of one vector.

mod adam;
mod serialize;

pub use adam::Adam;
pub use serialize::{deserialize_model, serialize_model, MODEL_FORMAT_VERSION};

use std::ops::AddAssign;

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FLOW_FEATURE_DIM;
use crate::graph::{Architecture, PropagationMatrix};
use crate::pipeline::NormalizationMode;

pub const HIDDEN_DIM: usize = 32;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// `Z + ReLU(Z)`.
    #[default]
    PreActivation,
    /// `X + ReLU(Z)`, with `X` zero-padded to the width of `Z`; plain `ReLU(Z)`
    /// if `X` is wider.
    Input,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub depth: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `W_0` is `input_dim x hidden_dim`, the rest `hidden_dim x hidden_dim`.
    pub weights: Vec<Array2<f64>>,
    /// Per-layer biases added to `P X W`; `None` keeps the layers bias-free.
    pub layer_biases: Option<Vec<Array1<f64>>>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub frozen: bool,
    pub residual: ResidualMode,
    /// Propagation uses `A + I` when set.
    pub self_loops: bool,
    pub normalization: NormalizationMode,
    pub architecture: Option<Architecture>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub layer_biases: Option<Vec<Array1<f64>>>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl Gradients {
    pub fn norm(&self) -> f64 {
        self.weights
            .iter()
            .chain(std::iter::once(&self.head_weight))
            .flat_map(|m| m.iter())
            .chain(self.layer_biases.iter().flatten().flat_map(|b| b.iter()))
            .chain(self.head_bias.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, limit: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit))
}

impl GcnModel {
    /// Seeded Glorot-uniform initialization.
    ///
    /// GCN layers are scaled by `sqrt(2/5)`: the pre-activation residual has a
    /// second-moment gain of `5/2` per layer for symmetric pre-activations.
    pub fn new(depth: usize, input_dim: usize, hidden_dim: usize, seed: u64) -> Result<GcnModel> {
        Self::with_residual(depth, input_dim, hidden_dim, ResidualMode::default(), seed)
    }

    pub fn with_residual(
        depth: usize,
        input_dim: usize,
        hidden_dim: usize,
        residual: ResidualMode,
        seed: u64,
    ) -> Result<GcnModel> {
        if depth == 0 || input_dim == 0 || hidden_dim == 0 {
            return Err(Error::InvalidArgument(
                "depth and dimensions must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = match residual {
            ResidualMode::PreActivation => (2.0f64 / 5.0).sqrt(),
            ResidualMode::Input => 0.5,
        };
        let weights = (0..depth)
            .map(|k| {
                let fan_in = if k == 0 { input_dim } else { hidden_dim };
                let limit = gain * (6.0 / (fan_in + hidden_dim) as f64).sqrt();
                uniform_matrix(&mut rng, fan_in, hidden_dim, limit)
            })
            .collect();
        let head_limit = (6.0 / (hidden_dim + NUM_CLASSES) as f64).sqrt();
        let head_weight = uniform_matrix(&mut rng, hidden_dim, NUM_CLASSES, head_limit);
        Ok(GcnModel {
            depth,
            input_dim,
            hidden_dim,
            weights,
            layer_biases: None,
            head_weight,
            head_bias: Array1::zeros(NUM_CLASSES),
            frozen: false,
            residual,
            self_loops: false,
            normalization: NormalizationMode::default(),
            architecture: None,
        })
    }

    /// Model with the default widths (5 flow features in, 32 hidden).
    pub fn for_architecture(arch: Architecture, seed: u64) -> Result<GcnModel> {
        let mut m = Self::new(arch.default_depth(), FLOW_FEATURE_DIM, HIDDEN_DIM, seed)?;
        m.architecture = Some(arch);
        Ok(m)
    }

    /// Enable zero-initialized per-layer biases.
    pub fn with_layer_biases(mut self) -> GcnModel {
        self.layer_biases = Some(vec![Array1::zeros(self.hidden_dim); self.depth]);
        self
    }

    fn layer_bias(&self, k: usize) -> Option<&Array1<f64>> {
        self.layer_biases.as_ref().map(|b| &b[k])
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.depth {
            return Err(Error::DimensionMismatch(format!(
                "{} weight matrices for depth {}",
                self.weights.len(),
                self.depth
            )));
        }
        let mut rows = self.input_dim;
        for (k, w) in self.weights.iter().enumerate() {
            if w.dim() != (rows, self.hidden_dim) {
                return Err(Error::DimensionMismatch(format!(
                    "W_{k} is {:?}, expected ({rows}, {})",
                    w.dim(),
                    self.hidden_dim
                )));
            }
            rows = w.ncols();
        }
        if let Some(b) = &self.layer_biases {
            if b.len() != self.depth || b.iter().any(|v| v.len() != self.hidden_dim) {
                return Err(Error::DimensionMismatch("layer biases".into()));
            }
        }
        if self.head_weight.dim() != (self.hidden_dim, NUM_CLASSES)
            || self.head_bias.len() != NUM_CLASSES
        {
            return Err(Error::DimensionMismatch("classification head".into()));
        }
        Ok(())
    }

    fn check_input(&self, p: &PropagationMatrix, x0: &Array2<f64>) -> Result<()> {
        if x0.ncols() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, model expects {}",
                x0.ncols(),
                self.input_dim
            )));
        }
        if x0.nrows() != p.n() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} rows, graph has {} nodes",
                x0.nrows(),
                p.n()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input features"));
        }
        Ok(())
    }

    /// Final hidden activations (`with_head = false`) or `n x 2` logits.
    pub fn forward(
        &self,
        p: &PropagationMatrix,
        x0: &Array2<f64>,
        with_head: bool,
    ) -> Result<Array2<f64>> {
        self.validate()?;
        self.check_input(p, x0)?;
        let mut x = x0.clone();
        for (k, w) in self.weights.iter().enumerate() {
            x = layer(p, &x, w, self.layer_bias(k), self.residual)?;
        }
        if with_head {
            Ok(self.head(&x))
        } else {
            Ok(x)
        }
    }

    fn head(&self, hidden: &Array2<f64>) -> Array2<f64> {
        hidden.dot(&self.head_weight) + &self.head_bias
    }

    /// Mean cross-entropy over masked nodes and its exact gradients.
    pub fn backward(
        &self,
        p: &PropagationMatrix,
        x0: &Array2<f64>,
        labels: &[bool],
        mask: &[bool],
    ) -> Result<(Gradients, f64)> {
        if self.frozen {
            return Err(Error::FrozenModel);
        }
        self.validate()?;
        self.check_input(p, x0)?;
        if labels.len() != p.n() || mask.len() != p.n() {
            return Err(Error::DimensionMismatch(format!(
                "{} labels / {} mask entries for {} nodes",
                labels.len(),
                mask.len(),
                p.n()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }

        // Forward, keeping P X and Z per layer.
        let mut inputs = Vec::with_capacity(self.depth);
        let mut propagated = Vec::with_capacity(self.depth);
        let mut pre = Vec::with_capacity(self.depth);
        let mut x = x0.clone();
        for (k, w) in self.weights.iter().enumerate() {
            let px = p.matmul(&x)?;
            let mut z = px.dot(w);
            if let Some(b) = self.layer_bias(k) {
                z += b;
            }
            let out = residual_combine(&x, &z, self.residual);
            inputs.push(x);
            propagated.push(px);
            pre.push(z);
            x = out;
        }
        let hidden = x;
        let logits = self.head(&hidden);

        let mut loss = 0.0;
        let mut d_logits = Array2::zeros(logits.dim());
        let scale = 1.0 / count as f64;
        for i in 0..logits.nrows() {
            if !mask[i] {
                continue;
            }
            let (a, b) = (logits[[i, 0]], logits[[i, 1]]);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let target = usize::from(labels[i]);
            loss -= logits[[i, target]] - lse;
            let p1 = (b - lse).exp();
            let probs = [1.0 - p1, p1];
            for c in 0..NUM_CLASSES {
                let y = if c == target { 1.0 } else { 0.0 };
                d_logits[[i, c]] = (probs[c] - y) * scale;
            }
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("loss is {loss}")));
        }

        let head_weight = hidden.t().dot(&d_logits);
        let head_bias = d_logits.sum_axis(Axis(0));
        let mut d_out = d_logits.dot(&self.head_weight.t());

        let mut weight_grads = vec![Array2::zeros((0, 0)); self.depth];
        let mut bias_grads = self
            .layer_biases
            .as_ref()
            .map(|_| vec![Array1::zeros(self.hidden_dim); self.depth]);
        for k in (0..self.depth).rev() {
            let z = &pre[k];
            let w = &self.weights[k];
            let x_in = &inputs[k];
            let mut d_z = d_out.clone();
            let carries_input = self.residual == ResidualMode::Input && x_in.ncols() <= z.ncols();
            match self.residual {
                ResidualMode::PreActivation => {
                    d_z.zip_mut_with(z, |g, &zv| *g *= if zv > 0.0 { 2.0 } else { 1.0 })
                }
                ResidualMode::Input => {
                    d_z.zip_mut_with(z, |g, &zv| *g *= if zv > 0.0 { 1.0 } else { 0.0 })
                }
            }
            weight_grads[k] = propagated[k].t().dot(&d_z);
            if let Some(g) = bias_grads.as_mut() {
                g[k] = d_z.sum_axis(Axis(0));
            }
            if k > 0 {
                // P is symmetric, so P^T = P.
                let mut d_x = p.matmul(&d_z.dot(&w.t()))?;
                if carries_input {
                    d_x += &d_out.slice(s![.., ..x_in.ncols()]);
                }
                d_out = d_x;
            }
        }
        Ok((
            Gradients {
                weights: weight_grads,
                layer_biases: bias_grads,
                head_weight,
                head_bias,
            },
            loss,
        ))
    }
}

fn residual_combine(x: &Array2<f64>, z: &Array2<f64>, mode: ResidualMode) -> Array2<f64> {
    match mode {
        ResidualMode::PreActivation => z.mapv(|v| v + v.max(0.0)),
        ResidualMode::Input if x.nrows() == z.nrows() && x.ncols() <= z.ncols() => {
            let mut out = z.mapv(|v| v.max(0.0));
            out.slice_mut(s![.., ..x.ncols()]).add_assign(x);
            out
        }
        ResidualMode::Input => z.mapv(|v| v.max(0.0)),
    }
}

/// One residual GCN layer: `Z + ReLU(Z)` with `Z = P X W`.
pub fn gcn_layer_forward(
    p: &PropagationMatrix,
    x: &Array2<f64>,
    w: &Array2<f64>,
) -> Result<Array2<f64>> {
    gcn_layer_forward_with(p, x, w, ResidualMode::PreActivation)
}

pub fn gcn_layer_forward_with(
    p: &PropagationMatrix,
    x: &Array2<f64>,
    w: &Array2<f64>,
    mode: ResidualMode,
) -> Result<Array2<f64>> {
    layer(p, x, w, None, mode)
}

fn layer(
    p: &PropagationMatrix,
    x: &Array2<f64>,
    w: &Array2<f64>,
    bias: Option<&Array1<f64>>,
    mode: ResidualMode,
) -> Result<Array2<f64>> {
    if x.ncols() != w.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "X has {} columns, W has {} rows",
            x.ncols(),
            w.nrows()
        )));
    }
    if x.iter().chain(w.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("layer input"));
    }
    let mut z = p.matmul(x)?.dot(w);
    if let Some(b) = bias {
        z += b;
    }
    Ok(residual_combine(x, &z, mode))
}
