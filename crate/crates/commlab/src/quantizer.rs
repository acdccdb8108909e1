//! Multi-token vector quantization.
//!
//! The latent vector of length `M` is split into `N` equal segments, and
//! each segment is quantized independently against a single shared
//! codebook of `L` vectors of dimension `D = M / N`. The quantized
//! segments are concatenated back in order, so the result has the shape
//! of the original latent. At `N = 1` this reduces to standard
//! single-token vector quantization.
//!
//! The codebook learns by exponential moving averages of assignment
//! counts and segment sums rather than by gradient descent; the codebook
//! loss term is still computed so the full training objective can be
//! logged. Gradients reach the encoder through the straight-through
//! identity plus the commitment term.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::matrix::Matrix;
use crate::numeric::squared_distance;

const EMA_EPSILON: f64 = 1e-5;

/// Shared collection of `L` code vectors of segment dimension `D`,
/// together with the EMA accumulators that train them.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Matrix,
    ema_counts: Vec<f64>,
    ema_sums: Matrix,
}

impl Codebook {
    /// Seeded standard-normal initialization, matching the common EMA
    /// codebook convention: codes start at unit scale, so entries the
    /// data never claims remain clearly separate from trained ones.
    pub fn init(num_codes: usize, code_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if num_codes == 0 || code_dim == 0 {
            return Err(Error::config("codebook dimensions must be positive"));
        }
        let mut data = vec![0.0; num_codes * code_dim];
        for v in &mut data {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        let codes = Matrix::from_vec(num_codes, code_dim, data)?;
        Ok(Self::from_codes(codes))
    }

    /// Wraps existing code vectors, with EMA accumulators chosen so that
    /// `sums / (counts + eps)` reproduces the codes exactly.
    pub fn from_codes(codes: Matrix) -> Self {
        let ema_counts = vec![1.0; codes.rows()];
        let mut ema_sums = codes.clone();
        for v in ema_sums.data_mut() {
            *v *= 1.0 + EMA_EPSILON;
        }
        Self {
            codes,
            ema_counts,
            ema_sums,
        }
    }

    pub fn num_codes(&self) -> usize {
        self.codes.rows()
    }

    pub fn code_dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Matrix {
        &self.codes
    }

    pub fn code(&self, index: usize) -> &[f64] {
        self.codes.row(index)
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Matrix {
        &self.ema_sums
    }

    pub(crate) fn set_state(&mut self, codes: Matrix, counts: Vec<f64>, sums: Matrix) {
        self.codes = codes;
        self.ema_counts = counts;
        self.ema_sums = sums;
    }

    pub(crate) fn state(&self) -> (&Matrix, &[f64], &Matrix) {
        (&self.codes, &self.ema_counts, &self.ema_sums)
    }
}

/// Static configuration of the quantization layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantizerConfig {
    num_tokens: usize,
    beta: f64,
    ema_decay: f64,
    latent_dim: usize,
}

impl QuantizerConfig {
    /// All divisibility and range constraints are enforced here, never at
    /// quantization time.
    pub fn new(num_tokens: usize, beta: f64, ema_decay: f64, latent_dim: usize) -> Result<Self> {
        if num_tokens == 0 {
            return Err(Error::config("num_tokens must be at least 1"));
        }
        if latent_dim == 0 || latent_dim % num_tokens != 0 {
            return Err(Error::config(format!(
                "latent_dim {latent_dim} must be a positive multiple of num_tokens {num_tokens}"
            )));
        }
        if beta < 0.0 {
            return Err(Error::config(format!("beta must be >= 0, got {beta}")));
        }
        if !(ema_decay > 0.0 && ema_decay < 1.0) {
            return Err(Error::config(format!(
                "ema_decay must lie in (0, 1), got {ema_decay}"
            )));
        }
        Ok(Self {
            num_tokens,
            beta,
            ema_decay,
            latent_dim,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn ema_decay(&self) -> f64 {
        self.ema_decay
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Segment dimension `D = M / N`.
    pub fn code_dim(&self) -> usize {
        self.latent_dim / self.num_tokens
    }
}

/// Outcome of quantizing one latent vector.
#[derive(Debug, Clone)]
pub struct QuantizeResult {
    /// Concatenation of the selected code vectors, length `M`.
    pub quantized: Vec<f64>,
    /// Selected code index per segment, length `N`.
    pub indices: Vec<usize>,
    /// The raw input segments, length `N` each of dimension `D`.
    pub segments: Vec<Vec<f64>>,
    /// `(1/N) sum_i ||s_i - e_{o_i}||^2` — the commitment residual.
    pub commitment_loss: f64,
    /// Same residual measured on the codebook side; numerically equal to
    /// `commitment_loss`, kept separate because the two terms carry
    /// different gradients in the training objective.
    pub codebook_loss: f64,
}

/// Splits a latent vector into `n` equal consecutive segments.
///
/// Divisibility is guaranteed by [`QuantizerConfig::new`]; violating it
/// here is a programmer error.
pub fn split_latent(z: &[f64], n: usize) -> Vec<&[f64]> {
    assert!(n > 0 && z.len() % n == 0, "latent length {} not divisible by {n}", z.len());
    z.chunks_exact(z.len() / n).collect()
}

/// Index of the nearest code vector by Euclidean distance; ties break to
/// the lowest index.
pub fn nearest_code(segment: &[f64], codebook: &Codebook) -> Result<usize> {
    if codebook.num_codes() == 0 {
        return Err(Error::config("empty codebook"));
    }
    if segment.len() != codebook.code_dim() {
        return Err(Error::shape(format!(
            "segment length {} does not match code dimension {}",
            segment.len(),
            codebook.code_dim()
        )));
    }
    let mut best = 0;
    let mut best_dist = squared_distance(segment, codebook.code(0));
    for j in 1..codebook.num_codes() {
        let d = squared_distance(segment, codebook.code(j));
        if d < best_dist {
            best = j;
            best_dist = d;
        }
    }
    Ok(best)
}

/// Quantizes one latent vector: split, per-segment nearest neighbor
/// against the shared codebook, concatenate.
pub fn quantize(z: &[f64], codebook: &Codebook, cfg: &QuantizerConfig) -> Result<QuantizeResult> {
    if z.len() != cfg.latent_dim() {
        return Err(Error::shape(format!(
            "latent length {} does not match configured dim {}",
            z.len(),
            cfg.latent_dim()
        )));
    }
    if codebook.code_dim() != cfg.code_dim() {
        return Err(Error::shape(format!(
            "codebook dim {} does not match segment dim {}",
            codebook.code_dim(),
            cfg.code_dim()
        )));
    }
    let n = cfg.num_tokens() as f64;
    let mut quantized = Vec::with_capacity(z.len());
    let mut indices = Vec::with_capacity(cfg.num_tokens());
    let mut segments = Vec::with_capacity(cfg.num_tokens());
    let mut residual = 0.0;
    for segment in split_latent(z, cfg.num_tokens()) {
        let idx = nearest_code(segment, codebook)?;
        let code = codebook.code(idx);
        residual += squared_distance(segment, code);
        quantized.extend_from_slice(code);
        indices.push(idx);
        segments.push(segment.to_vec());
    }
    Ok(QuantizeResult {
        quantized,
        indices,
        segments,
        commitment_loss: residual / n,
        codebook_loss: residual / n,
    })
}

/// Total quantization penalty: codebook term plus `beta` times the
/// commitment term, each already averaged over tokens.
pub fn quantization_loss(result: &QuantizeResult, beta: f64) -> f64 {
    result.codebook_loss + beta * result.commitment_loss
}

/// The straight-through estimator: the gradient of the decoder input with
/// respect to the encoder output is treated as the identity, so the
/// upstream gradient passes through unchanged. The commitment-term
/// gradient is added to the encoder side separately (see
/// [`commitment_gradient`]).
pub fn straight_through(upstream_grad: &[f64]) -> Vec<f64> {
    upstream_grad.to_vec()
}

/// Gradient of the commitment term with respect to the latent:
/// `beta * 2 (s_i - e_{o_i}) / N` per segment, concatenated.
pub fn commitment_gradient(result: &QuantizeResult, codebook: &Codebook, beta: f64) -> Vec<f64> {
    let n = result.segments.len() as f64;
    let mut grad = Vec::with_capacity(result.quantized.len());
    for (segment, &idx) in result.segments.iter().zip(&result.indices) {
        let code = codebook.code(idx);
        for (s, e) in segment.iter().zip(code) {
            grad.push(beta * 2.0 * (s - e) / n);
        }
    }
    grad
}

/// One EMA codebook update from a batch of `(code index, segment)`
/// assignments.
///
/// For every code `i`:
/// `counts[i] <- decay*counts[i] + (1-decay)*n_i`,
/// `sums[i]   <- decay*sums[i]   + (1-decay)*sum of assigned segments`,
/// `codes[i]  <- sums[i] / (counts[i] + 1e-5)`.
pub fn ema_update(
    codebook: &mut Codebook,
    assignments: &[(usize, &[f64])],
    decay: f64,
) -> Result<()> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::config(format!(
            "ema decay must lie in (0, 1), got {decay}"
        )));
    }
    let (num_codes, dim) = (codebook.num_codes(), codebook.code_dim());
    let mut batch_counts = vec![0.0; num_codes];
    let mut batch_sums = Matrix::zeros(num_codes, dim);
    for &(idx, segment) in assignments {
        if idx >= num_codes {
            return Err(Error::shape(format!(
                "assignment index {idx} out of range for {num_codes} codes"
            )));
        }
        if segment.len() != dim {
            return Err(Error::shape(format!(
                "assigned segment length {} does not match code dimension {dim}",
                segment.len()
            )));
        }
        batch_counts[idx] += 1.0;
        for (acc, v) in batch_sums.row_mut(idx).iter_mut().zip(segment) {
            *acc += v;
        }
    }
    for i in 0..num_codes {
        codebook.ema_counts[i] = decay * codebook.ema_counts[i] + (1.0 - decay) * batch_counts[i];
        for (s, b) in codebook.ema_sums.row_mut(i).iter_mut().zip(batch_sums.row(i)) {
            *s = decay * *s + (1.0 - decay) * b;
        }
        let denom = codebook.ema_counts[i] + EMA_EPSILON;
        let (codes, sums) = (&mut codebook.codes, &codebook.ema_sums);
        for (c, s) in codes.row_mut(i).iter_mut().zip(sums.row(i)) {
            *c = s / denom;
        }
    }
    Ok(())
}
