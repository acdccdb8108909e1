//! Dense layers with explicit forward and backward passes.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;

/// Element-wise activation applied after the affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative as a function of the pre-activation value.
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-pre).exp());
                s * (1.0 - s)
            }
        }
    }
}

/// A dense layer `y = activation(x W^T + b)` with weights stored
/// row-per-output-unit, shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

/// Pre-activation (and input) retained by a forward pass for backward.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Matrix,
    pre_activation: Matrix,
}

/// Gradients produced by one layer's backward pass.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// Xavier-uniform initialization, seeded by the caller's stream.
    pub fn xavier(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::config("layer dimensions must be positive"));
        }
        let limit = (6.0 / (in_dim as f64 + out_dim as f64)).sqrt();
        let mut data = vec![0.0; in_dim * out_dim];
        for w in &mut data {
            *w = rng.gen_range(-limit..limit);
        }
        Ok(Self {
            weights: Matrix::from_vec(out_dim, in_dim, data)?,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    pub fn from_parts(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::shape(format!(
                "bias length {} does not match output dim {}",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (self.weights.data_mut(), &mut self.bias)
    }

    /// Forward pass over a batch, returning the output and the cache
    /// needed for the backward pass.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LayerCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape(format!(
                "input dim {} does not match layer input dim {}",
                x.cols(),
                self.in_dim()
            )));
        }
        let mut pre = x.mul_transpose(&self.weights)?;
        pre.add_row_broadcast(&self.bias)?;
        let mut out = pre.clone();
        for v in out.data_mut() {
            *v = self.activation.apply(*v);
        }
        let cache = LayerCache {
            input: x.clone(),
            pre_activation: pre,
        };
        Ok((out, cache))
    }

    /// Forward pass without retaining a cache.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward(x)?.0)
    }

    /// Exact gradients of the forward map.
    ///
    /// `upstream` is dL/d(output); returns dL/d(input) along with
    /// parameter gradients summed over the batch.
    pub fn backward(&self, upstream: &Matrix, cache: &LayerCache) -> Result<(Matrix, LayerGrads)> {
        if upstream.rows() != cache.pre_activation.rows() || upstream.cols() != self.out_dim() {
            return Err(Error::shape(format!(
                "upstream {}x{} does not match forward output {}x{}",
                upstream.rows(),
                upstream.cols(),
                cache.pre_activation.rows(),
                self.out_dim()
            )));
        }
        let mut d_pre = upstream.clone();
        for (d, p) in d_pre.data_mut().iter_mut().zip(cache.pre_activation.data()) {
            *d *= self.activation.derivative(*p);
        }
        let grad_w = d_pre.transpose_mul(&cache.input)?;
        let grad_b = d_pre.column_sums();
        let grad_x = d_pre.mul(&self.weights)?;
        Ok((
            grad_x,
            LayerGrads {
                weights: grad_w,
                bias: grad_b,
            },
        ))
    }
}

/// A stack of dense layers trained together (an encoder or a decoder).
#[derive(Debug, Clone)]
pub struct DenseStack {
    layers: Vec<DenseLayer>,
    caches: Option<Vec<LayerCache>>,
}

impl DenseStack {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::config(format!(
                    "layer output dim {} does not feed layer input dim {}",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self {
            layers,
            caches: None,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut Vec<DenseLayer> {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::in_dim)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    /// Forward pass that retains caches for a following `backward` call.
    pub fn forward_train(&mut self, x: &Matrix) -> Result<Matrix> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (out, cache) = layer.forward(&cur)?;
            caches.push(cache);
            cur = out;
        }
        self.caches = Some(caches);
        Ok(cur)
    }

    /// Deterministic forward pass with no cache side effects.
    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward_eval(&cur)?;
        }
        Ok(cur)
    }

    /// Backward pass consuming the caches of the last `forward_train`.
    ///
    /// Returns dL/d(input) and per-layer parameter gradients.
    pub fn backward(&mut self, upstream: &Matrix) -> Result<(Matrix, Vec<LayerGrads>)> {
        let caches = self.caches.take().ok_or_else(|| {
            Error::State("backward called without a preceding forward_train".into())
        })?;
        let mut grads = vec![None; self.layers.len()];
        let mut cur = upstream.clone();
        for (idx, (layer, cache)) in self.layers.iter().zip(&caches).enumerate().rev() {
            let (d_input, layer_grads) = layer.backward(&cur, cache)?;
            grads[idx] = Some(layer_grads);
            cur = d_input;
        }
        Ok((cur, grads.into_iter().map(Option::unwrap).collect()))
    }
}
