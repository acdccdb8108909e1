//! Agents: a speaker (encoder) and a listener (decoder) joined by one of
//! several communication channels.
//!
//! Channel kinds:
//! - `Ae` — the encoder output feeds the decoder directly (continuous).
//! - `Vq` — multi-token quantization against the agent's codebook.
//! - `Vae` — stochastic latent via the reparameterization trick;
//!   evaluation uses the mean latent so cross-agent validation is
//!   deterministic.
//! - `HybridSplit` — first half of the latent goes through the VAE head
//!   path, second half through the quantizer, concatenated back before
//!   decoding. The split is positional and fixed across agents so
//!   cross-agent decoding is well-defined.
//! - `MaskContinuous` / `MaskDiscrete` — one half is processed by its
//!   channel, the other half is zeroed before decoding.
//!
//! Training state (layer caches, quantization assignments, sampled
//! noise) lives inside the agent between `forward` and the optimizer
//! step, so one agent's training is single-threaded; distinct agents can
//! train concurrently.

mod checkpoint;

pub use checkpoint::{load_agent, save_agent};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numeric::{
    adam_step, mse_loss, AdamState, Activation, DenseLayer, DenseStack, LayerGrads, Matrix,
};
use crate::quantizer::{
    commitment_gradient, ema_update, quantize, straight_through, Codebook, QuantizeResult,
    QuantizerConfig,
};

/// The communication channel between an agent's speaker and listener.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChannelKind {
    Ae,
    Vq { tokens: usize },
    Vae { beta_kl: f64 },
    HybridSplit { tokens: usize },
    MaskContinuous,
    MaskDiscrete { tokens: usize },
}

impl ChannelKind {
    pub fn uses_quantizer(&self) -> bool {
        matches!(
            self,
            ChannelKind::Vq { .. } | ChannelKind::HybridSplit { .. } | ChannelKind::MaskDiscrete { .. }
        )
    }

    pub fn uses_vae_heads(&self) -> bool {
        matches!(self, ChannelKind::Vae { .. } | ChannelKind::HybridSplit { .. })
    }

    /// Dimension of the latent slice handled by the quantizer.
    fn quantized_dim(&self, latent_dim: usize) -> usize {
        match self {
            ChannelKind::Vq { .. } => latent_dim,
            ChannelKind::HybridSplit { .. } | ChannelKind::MaskDiscrete { .. } => latent_dim / 2,
            _ => 0,
        }
    }

    fn tokens(&self) -> Option<usize> {
        match self {
            ChannelKind::Vq { tokens }
            | ChannelKind::HybridSplit { tokens }
            | ChannelKind::MaskDiscrete { tokens } => Some(*tokens),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ChannelKind::Ae => "ae",
            ChannelKind::Vq { .. } => "vq",
            ChannelKind::Vae { .. } => "vae",
            ChannelKind::HybridSplit { .. } => "hybrid_split",
            ChannelKind::MaskContinuous => "mask_continuous",
            ChannelKind::MaskDiscrete { .. } => "mask_discrete",
        }
    }
}

/// How a hybrid agent's message is assembled at evaluation time.
///
/// Selecting a mode masks one half of the transmitted vector without any
/// retraining; non-hybrid channels ignore it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Integrated,
    DiscreteOnly,
    ContinuousOnly,
}

impl Default for EvalMode {
    fn default() -> Self {
        EvalMode::Integrated
    }
}

/// Network shape and channel hyperparameters shared by a population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentArch {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Encoder output dimension `M`.
    pub latent_dim: usize,
    /// Codebook size `L` for quantized channels.
    pub codebook_size: usize,
    /// Commitment weight in the quantization objective.
    pub beta: f64,
    pub ema_decay: f64,
}

/// One forward pass: reconstruction, transmitted latent, and the loss
/// components of the training objective.
///
/// `commitment` and `kl` are stored as their weighted contributions
/// (`beta * commitment residual`, `beta_kl * KL`), so the components
/// always sum to the objective.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub reconstruction: Matrix,
    /// The decoder input: `z`, quantized `Z`, sampled latent, or the
    /// assembled hybrid/masked message.
    pub latent: Matrix,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub kl: f64,
}

impl ForwardRecord {
    pub fn total(&self) -> f64 {
        self.recon + self.codebook + self.commitment + self.kl
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

/// Loss means over one epoch, plus codebook usage for quantized channels.
#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub kl: f64,
    /// Selection counts per code index, summed over the epoch.
    pub usage: Option<Vec<u64>>,
    /// Per-batch selection counts, retained only when asked for.
    pub batch_usage: Option<Vec<Vec<u64>>>,
}

impl EpochMetrics {
    pub fn total(&self) -> f64 {
        self.recon + self.codebook + self.commitment + self.kl
    }
}

/// Gradients of one batch, ready for the optimizer step.
pub struct AgentGrads {
    pub encoder: Vec<LayerGrads>,
    pub decoder: Vec<LayerGrads>,
    pub heads: Option<(LayerGrads, LayerGrads)>,
    /// `(code index, segment)` pairs feeding the EMA codebook update.
    pub assignments: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone)]
struct VaeHeads {
    mu: DenseLayer,
    logvar: DenseLayer,
}

#[derive(Clone)]
struct StackOptimizer {
    states: Vec<(AdamState, AdamState)>,
}

impl StackOptimizer {
    fn new(stack: &DenseStack) -> Self {
        let states = stack
            .layers()
            .iter()
            .map(|l| {
                (
                    AdamState::new(l.in_dim() * l.out_dim()),
                    AdamState::new(l.out_dim()),
                )
            })
            .collect();
        Self { states }
    }

    fn step(
        &mut self,
        prefix: &str,
        stack: &mut DenseStack,
        grads: &[LayerGrads],
        lr: f64,
    ) -> Result<()> {
        for (idx, (layer, grad)) in stack.layers_mut().iter_mut().zip(grads).enumerate() {
            let (w, b) = layer.params_mut();
            let (ws, bs) = &mut self.states[idx];
            adam_step(&format!("{prefix}.{idx}.weights"), w, grad.weights.data(), ws, lr)?;
            adam_step(&format!("{prefix}.{idx}.bias"), b, &grad.bias, bs, lr)?;
        }
        Ok(())
    }
}

#[derive(Clone)]
struct LayerOptimizer {
    weights: AdamState,
    bias: AdamState,
}

impl LayerOptimizer {
    fn new(layer: &DenseLayer) -> Self {
        Self {
            weights: AdamState::new(layer.in_dim() * layer.out_dim()),
            bias: AdamState::new(layer.out_dim()),
        }
    }

    fn step(&mut self, name: &str, layer: &mut DenseLayer, grad: &LayerGrads, lr: f64) -> Result<()> {
        let (w, b) = layer.params_mut();
        adam_step(&format!("{name}.weights"), w, grad.weights.data(), &mut self.weights, lr)?;
        adam_step(&format!("{name}.bias"), b, &grad.bias, &mut self.bias, lr)?;
        Ok(())
    }
}

/// Per-batch context retained between forward and backward.
#[derive(Clone)]
enum Pending {
    Plain,
    Quantized {
        results: Vec<QuantizeResult>,
    },
    Stochastic {
        ctx: VaeCtx,
    },
    Hybrid {
        results: Vec<QuantizeResult>,
        ctx: VaeCtx,
    },
}

#[derive(Clone)]
pub(crate) struct VaeCtx {
    mu: Matrix,
    sigma: Matrix,
    noise: Matrix,
    mu_cache: crate::numeric::LayerCache,
    logvar_cache: crate::numeric::LayerCache,
}

/// A speaker/listener pair with its channel state and optimizer.
#[derive(Clone)]
pub struct Agent {
    id: String,
    channel: ChannelKind,
    arch: AgentArch,
    encoder: DenseStack,
    decoder: DenseStack,
    codebook: Option<Codebook>,
    quant_cfg: Option<QuantizerConfig>,
    heads: Option<VaeHeads>,
    encoder_opt: StackOptimizer,
    decoder_opt: StackOptimizer,
    head_opts: Option<(LayerOptimizer, LayerOptimizer)>,
    pending: Option<Pending>,
}

impl Agent {
    /// Builds an agent with Xavier-initialized layers and (for quantized
    /// channels) a seeded codebook. All dimension constraints are checked
    /// here.
    pub fn new(
        id: impl Into<String>,
        arch: AgentArch,
        channel: ChannelKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let m = arch.latent_dim;
        if arch.input_dim == 0 || arch.hidden_dim == 0 || m == 0 {
            return Err(Error::config("agent dimensions must be positive"));
        }
        let needs_even = matches!(
            channel,
            ChannelKind::HybridSplit { .. }
                | ChannelKind::MaskContinuous
                | ChannelKind::MaskDiscrete { .. }
        );
        if needs_even && m % 2 != 0 {
            return Err(Error::config(format!(
                "latent dim {m} must be even for split/masked channels"
            )));
        }

        // Bounded latents keep the code scale anchored, which matters for
        // comparing codebooks across agents over training.
        let encoder = DenseStack::new(vec![
            DenseLayer::xavier(arch.input_dim, arch.hidden_dim, Activation::Relu, rng)?,
            DenseLayer::xavier(arch.hidden_dim, m, Activation::Tanh, rng)?,
        ])?;
        let decoder = DenseStack::new(vec![
            DenseLayer::xavier(m, arch.hidden_dim, Activation::Relu, rng)?,
            DenseLayer::xavier(arch.hidden_dim, arch.input_dim, Activation::Sigmoid, rng)?,
        ])?;

        let quant_cfg = match channel.tokens() {
            Some(tokens) => Some(QuantizerConfig::new(
                tokens,
                arch.beta,
                arch.ema_decay,
                channel.quantized_dim(m),
            )?),
            None => None,
        };
        let codebook = match &quant_cfg {
            Some(cfg) => Some(Codebook::init(arch.codebook_size, cfg.code_dim(), rng)?),
            None => None,
        };
        let heads = if channel.uses_vae_heads() {
            let dim = match channel {
                ChannelKind::Vae { .. } => m,
                _ => m / 2,
            };
            Some(VaeHeads {
                mu: DenseLayer::xavier(dim, dim, Activation::Identity, rng)?,
                logvar: DenseLayer::xavier(dim, dim, Activation::Identity, rng)?,
            })
        } else {
            None
        };

        let encoder_opt = StackOptimizer::new(&encoder);
        let decoder_opt = StackOptimizer::new(&decoder);
        let head_opts = heads
            .as_ref()
            .map(|h| (LayerOptimizer::new(&h.mu), LayerOptimizer::new(&h.logvar)));

        Ok(Self {
            id: id.into(),
            channel,
            arch,
            encoder,
            decoder,
            codebook,
            quant_cfg,
            heads,
            encoder_opt,
            decoder_opt,
            head_opts,
            pending: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn channel(&self) -> ChannelKind {
        self.channel
    }

    pub fn arch(&self) -> AgentArch {
        self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    pub(crate) fn replace_codebook(&mut self, codebook: Option<Codebook>) -> Result<()> {
        match (&codebook, &self.quant_cfg) {
            (Some(cb), Some(cfg)) if cb.code_dim() != cfg.code_dim() => {
                return Err(Error::shape(format!(
                    "codebook dim {} does not match configured segment dim {}",
                    cb.code_dim(),
                    cfg.code_dim()
                )))
            }
            (Some(_), None) => {
                return Err(Error::Usage(format!(
                    "codebook supplied for non-quantized channel {}",
                    self.channel.name()
                )))
            }
            _ => {}
        }
        self.codebook = codebook;
        Ok(())
    }

    pub fn quantizer_config(&self) -> Option<&QuantizerConfig> {
        self.quant_cfg.as_ref()
    }

    pub fn encoder(&self) -> &DenseStack {
        &self.encoder
    }

    pub fn encoder_mut(&mut self) -> &mut DenseStack {
        &mut self.encoder
    }

    pub fn decoder(&self) -> &DenseStack {
        &self.decoder
    }

    pub fn decoder_mut(&mut self) -> &mut DenseStack {
        &mut self.decoder
    }

    pub fn vae_head_layers(&self) -> Option<(&DenseLayer, &DenseLayer)> {
        self.heads.as_ref().map(|h| (&h.mu, &h.logvar))
    }

    pub fn vae_head_layers_mut(&mut self) -> Option<(&mut DenseLayer, &mut DenseLayer)> {
        self.heads.as_mut().map(|h| (&mut h.mu, &mut h.logvar))
    }

    // ---- channel-specific forward passes -------------------------------

    /// Plain autoencoder forward; caches state for a backward pass.
    pub fn forward_ae(&mut self, x: &Matrix) -> Result<ForwardRecord> {
        if self.channel != ChannelKind::Ae {
            return Err(Error::Usage(format!(
                "forward_ae on a {} agent",
                self.channel.name()
            )));
        }
        let z = self.encoder.forward_train(x)?;
        let x_prime = self.decoder.forward_train(&z)?;
        let (recon, _) = mse_loss(x, &x_prime)?;
        self.pending = Some(Pending::Plain);
        Ok(ForwardRecord {
            reconstruction: x_prime,
            latent: z,
            recon,
            codebook: 0.0,
            commitment: 0.0,
            kl: 0.0,
        })
    }

    /// Multi-token VQ forward; caches assignments for backward and EMA.
    pub fn forward_vq(&mut self, x: &Matrix) -> Result<ForwardRecord> {
        let ChannelKind::Vq { .. } = self.channel else {
            return Err(Error::Usage(format!(
                "forward_vq on a {} agent",
                self.channel.name()
            )));
        };
        let z = self.encoder.forward_train(x)?;
        let (quantized, results) = self.quantize_rows(&z)?;
        let x_prime = self.decoder.forward_train(&quantized)?;
        let (recon, _) = mse_loss(x, &x_prime)?;
        let (codebook, commitment) = mean_quant_losses(&results, self.arch.beta);
        self.pending = Some(Pending::Quantized { results });
        Ok(ForwardRecord {
            reconstruction: x_prime,
            latent: quantized,
            recon,
            codebook,
            commitment,
            kl: 0.0,
        })
    }

    /// VAE forward with the reparameterization trick.
    pub fn forward_vae(&mut self, x: &Matrix, rng: &mut ChaCha8Rng) -> Result<ForwardRecord> {
        let ChannelKind::Vae { beta_kl } = self.channel else {
            return Err(Error::Usage(format!(
                "forward_vae on a {} agent",
                self.channel.name()
            )));
        };
        let h = self.encoder.forward_train(x)?;
        let noise = standard_normal_matrix(h.rows(), self.arch.latent_dim, rng);
        let (latent, ctx, kl_raw) = self.vae_path(&h, Some(&noise))?;
        let x_prime = self.decoder.forward_train(&latent)?;
        let (recon, _) = mse_loss(x, &x_prime)?;
        self.pending = Some(Pending::Stochastic { ctx });
        Ok(ForwardRecord {
            reconstruction: x_prime,
            latent,
            recon,
            codebook: 0.0,
            commitment: 0.0,
            kl: beta_kl * kl_raw,
        })
    }

    /// Hybrid and masked forward passes. `rng` supplies reparameterization
    /// noise for the hybrid's continuous half; masked channels ignore it.
    pub fn forward_hybrid(&mut self, x: &Matrix, rng: &mut ChaCha8Rng) -> Result<ForwardRecord> {
        match self.channel {
            ChannelKind::HybridSplit { .. } => {
                let z = self.encoder.forward_train(x)?;
                let half = self.arch.latent_dim / 2;
                let z_cont = z.columns(0, half);
                let z_disc = z.columns(half, self.arch.latent_dim);
                let noise = standard_normal_matrix(z.rows(), half, rng);
                let (latent_cont, ctx, kl_raw) = self.vae_path(&z_cont, Some(&noise))?;
                let (quantized, results) = self.quantize_rows(&z_disc)?;
                let message = Matrix::hconcat(&latent_cont, &quantized)?;
                let x_prime = self.decoder.forward_train(&message)?;
                let (recon, _) = mse_loss(x, &x_prime)?;
                let (codebook, commitment) = mean_quant_losses(&results, self.arch.beta);
                self.pending = Some(Pending::Hybrid { results, ctx });
                Ok(ForwardRecord {
                    reconstruction: x_prime,
                    latent: message,
                    recon,
                    codebook,
                    commitment,
                    // Eq-7-style objective: the KL term enters unweighted.
                    kl: kl_raw,
                })
            }
            ChannelKind::MaskContinuous => {
                let z = self.encoder.forward_train(x)?;
                let half = self.arch.latent_dim / 2;
                let kept = z.columns(0, half);
                let message = Matrix::hconcat(&kept, &Matrix::zeros(z.rows(), half))?;
                let x_prime = self.decoder.forward_train(&message)?;
                let (recon, _) = mse_loss(x, &x_prime)?;
                self.pending = Some(Pending::Plain);
                Ok(ForwardRecord {
                    reconstruction: x_prime,
                    latent: message,
                    recon,
                    codebook: 0.0,
                    commitment: 0.0,
                    kl: 0.0,
                })
            }
            ChannelKind::MaskDiscrete { .. } => {
                let z = self.encoder.forward_train(x)?;
                let half = self.arch.latent_dim / 2;
                let z_disc = z.columns(half, self.arch.latent_dim);
                let (quantized, results) = self.quantize_rows(&z_disc)?;
                let message = Matrix::hconcat(&Matrix::zeros(z.rows(), half), &quantized)?;
                let x_prime = self.decoder.forward_train(&message)?;
                let (recon, _) = mse_loss(x, &x_prime)?;
                let (codebook, commitment) = mean_quant_losses(&results, self.arch.beta);
                self.pending = Some(Pending::Quantized { results });
                Ok(ForwardRecord {
                    reconstruction: x_prime,
                    latent: message,
                    recon,
                    codebook,
                    commitment,
                    kl: 0.0,
                })
            }
            _ => Err(Error::Usage(format!(
                "forward_hybrid on a {} agent",
                self.channel.name()
            ))),
        }
    }

    /// Dispatches to the channel's forward pass.
    pub fn forward_train(&mut self, x: &Matrix, rng: &mut ChaCha8Rng) -> Result<ForwardRecord> {
        match self.channel {
            ChannelKind::Ae => self.forward_ae(x),
            ChannelKind::Vq { .. } => self.forward_vq(x),
            ChannelKind::Vae { .. } => self.forward_vae(x, rng),
            _ => self.forward_hybrid(x, rng),
        }
    }

    // ---- backward and optimizer ----------------------------------------

    /// Gradients of the last `forward_*` call's objective with respect to
    /// every trainable parameter. Consumes the cached forward state.
    pub fn backward(&mut self, x: &Matrix, record: &ForwardRecord) -> Result<AgentGrads> {
        let pending = self
            .pending
            .take()
            .ok_or_else(|| Error::State("backward without a preceding forward".into()))?;
        let (_, d_recon) = mse_loss(x, &record.reconstruction)?;
        let (d_message, decoder_grads) = self.decoder.backward(&d_recon)?;
        let batch = x.rows() as f64;

        let mut heads_grads = None;
        let mut assignments = Vec::new();
        let d_encoder_out = match pending {
            Pending::Plain => match self.channel {
                ChannelKind::MaskContinuous => {
                    let half = self.arch.latent_dim / 2;
                    let kept = d_message.columns(0, half);
                    Matrix::hconcat(&kept, &Matrix::zeros(d_message.rows(), half))?
                }
                _ => d_message,
            },
            Pending::Quantized { results } => {
                let cb = self.codebook.as_ref().expect("quantized channel");
                let beta = self.arch.beta;
                let d_quant = match self.channel {
                    ChannelKind::MaskDiscrete { .. } => {
                        let half = self.arch.latent_dim / 2;
                        d_message.columns(half, self.arch.latent_dim)
                    }
                    _ => d_message.clone(),
                };
                let d_z = quantized_latent_grad(&d_quant, &results, cb, beta, batch)?;
                collect_assignments(&results, &mut assignments);
                match self.channel {
                    ChannelKind::MaskDiscrete { .. } => {
                        let half = self.arch.latent_dim / 2;
                        Matrix::hconcat(&Matrix::zeros(d_z.rows(), half), &d_z)?
                    }
                    _ => d_z,
                }
            }
            Pending::Stochastic { ctx } => {
                let ChannelKind::Vae { beta_kl } = self.channel else {
                    return Err(Error::State("stochastic state on a non-VAE agent".into()));
                };
                let (d_h, mu_g, lv_g) = self.vae_backward(&d_message, &ctx, beta_kl, batch)?;
                heads_grads = Some((mu_g, lv_g));
                d_h
            }
            Pending::Hybrid { results, ctx } => {
                let half = self.arch.latent_dim / 2;
                let d_cont = d_message.columns(0, half);
                let d_disc = d_message.columns(half, self.arch.latent_dim);
                let (d_h, mu_g, lv_g) = self.vae_backward(&d_cont, &ctx, 1.0, batch)?;
                heads_grads = Some((mu_g, lv_g));
                let cb = self.codebook.as_ref().expect("hybrid channel");
                let d_z_disc = quantized_latent_grad(&d_disc, &results, cb, self.arch.beta, batch)?;
                collect_assignments(&results, &mut assignments);
                Matrix::hconcat(&d_h, &d_z_disc)?
            }
        };

        let (_, encoder_grads) = self.encoder.backward(&d_encoder_out)?;
        Ok(AgentGrads {
            encoder: encoder_grads,
            decoder: decoder_grads,
            heads: heads_grads,
            assignments,
        })
    }

    /// Adam step on the encoder parameters.
    pub fn step_encoder(&mut self, grads: &[LayerGrads], lr: f64) -> Result<()> {
        let prefix = format!("{}.encoder", self.id);
        self.encoder_opt.step(&prefix, &mut self.encoder, grads, lr)
    }

    /// Adam step on the decoder parameters.
    pub fn step_decoder(&mut self, grads: &[LayerGrads], lr: f64) -> Result<()> {
        let prefix = format!("{}.decoder", self.id);
        self.decoder_opt.step(&prefix, &mut self.decoder, grads, lr)
    }

    /// Adam step on the VAE head parameters.
    pub fn step_heads(&mut self, mu: &LayerGrads, logvar: &LayerGrads, lr: f64) -> Result<()> {
        let prefix = self.id.clone();
        let (heads, (mu_opt, lv_opt)) = match (self.heads.as_mut(), self.head_opts.as_mut()) {
            (Some(h), Some(o)) => (h, o),
            _ => {
                return Err(Error::Usage(format!(
                    "step_heads on a {} agent",
                    self.channel.name()
                )))
            }
        };
        mu_opt.step(&format!("{prefix}.mu_head"), &mut heads.mu, mu, lr)?;
        lv_opt.step(&format!("{prefix}.logvar_head"), &mut heads.logvar, logvar, lr)
    }

    /// EMA codebook update from a batch of assignments.
    pub fn apply_ema(&mut self, assignments: &[(usize, Vec<f64>)]) -> Result<()> {
        if assignments.is_empty() {
            return Ok(());
        }
        let decay = self.arch.ema_decay;
        let cb = self
            .codebook
            .as_mut()
            .ok_or_else(|| Error::Usage("apply_ema on an agent without a codebook".into()))?;
        let pairs: Vec<(usize, &[f64])> =
            assignments.iter().map(|(i, s)| (*i, s.as_slice())).collect();
        ema_update(cb, &pairs, decay)
    }

    /// Adam step on all parameters plus the EMA codebook update.
    pub fn apply_update(&mut self, grads: &AgentGrads, lr: f64) -> Result<()> {
        self.step_encoder(&grads.encoder, lr)?;
        self.step_decoder(&grads.decoder, lr)?;
        if let Some((mu_g, lv_g)) = grads.heads.as_ref() {
            self.step_heads(mu_g, lv_g, lr)?;
        }
        self.apply_ema(&grads.assignments)
    }

    /// Forward, backward, optimizer step, codebook update; returns the
    /// forward record together with the selection counts of the batch.
    pub fn train_batch(
        &mut self,
        x: &Matrix,
        rng: &mut ChaCha8Rng,
        lr: f64,
    ) -> Result<(ForwardRecord, Option<Vec<u64>>)> {
        let record = self.forward_train(x, rng)?;
        if !record.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss on agent {}: recon {} codebook {} commitment {} kl {}",
                self.id, record.recon, record.codebook, record.commitment, record.kl
            )));
        }
        let grads = self.backward(x, &record)?;
        let usage = if self.channel.uses_quantizer() {
            let indices: Vec<usize> = grads.assignments.iter().map(|(i, _)| *i).collect();
            Some(crate::analytics::usage_counts(
                &indices,
                self.arch.codebook_size,
            )?)
        } else {
            None
        };
        self.apply_update(&grads, lr)?;
        Ok((record, usage))
    }

    /// One epoch over shuffled mini-batches.
    pub fn train_epoch(
        &mut self,
        dataset: &crate::data::LabeledDataset,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
        lr: f64,
        keep_batch_usage: bool,
    ) -> Result<EpochMetrics> {
        if dataset.is_empty() {
            return Err(Error::Usage("train_epoch on an empty dataset".into()));
        }
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut samples = 0usize;
        let mut usage_total: Option<Vec<u64>> = None;
        let mut batch_usage = Vec::new();
        for chunk in order.chunks(batch_size) {
            let rows: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| dataset.items[i].pixels.clone())
                .collect();
            let x = Matrix::from_rows(&rows)?;
            let (record, usage) = self.train_batch(&x, rng, lr)?;
            let w = chunk.len() as f64;
            sums.0 += record.recon * w;
            sums.1 += record.codebook * w;
            sums.2 += record.commitment * w;
            sums.3 += record.kl * w;
            samples += chunk.len();
            if let Some(u) = usage {
                match &mut usage_total {
                    Some(t) => {
                        for (a, b) in t.iter_mut().zip(&u) {
                            *a += b;
                        }
                    }
                    None => usage_total = Some(u.clone()),
                }
                if keep_batch_usage {
                    batch_usage.push(u);
                }
            }
        }
        let n = samples as f64;
        Ok(EpochMetrics {
            recon: sums.0 / n,
            codebook: sums.1 / n,
            commitment: sums.2 / n,
            kl: sums.3 / n,
            usage: usage_total,
            batch_usage: if keep_batch_usage { Some(batch_usage) } else { None },
        })
    }

    // ---- deterministic evaluation ---------------------------------------

    /// The message this agent transmits for `x` at evaluation time.
    ///
    /// `codebook_override` swaps in another agent's codebook (listener-side
    /// quantization); VAE heads are always the speaker's own.
    pub fn eval_message(
        &self,
        x: &Matrix,
        codebook_override: Option<&Codebook>,
        mode: EvalMode,
    ) -> Result<Matrix> {
        let z = self.encoder.forward_eval(x)?;
        self.message_from_latent(&z, codebook_override, mode)
    }

    fn message_from_latent(
        &self,
        z: &Matrix,
        codebook_override: Option<&Codebook>,
        mode: EvalMode,
    ) -> Result<Matrix> {
        match self.channel {
            ChannelKind::Ae => Ok(z.clone()),
            ChannelKind::Vq { .. } => {
                let cb = codebook_override
                    .or(self.codebook.as_ref())
                    .ok_or_else(|| Error::State("VQ agent without a codebook".into()))?;
                Ok(self.quantize_rows_with(z, cb)?.0)
            }
            ChannelKind::Vae { .. } => {
                let heads = self.heads.as_ref().expect("vae heads");
                heads.mu.forward_eval(z)
            }
            ChannelKind::HybridSplit { .. } => {
                let half = self.arch.latent_dim / 2;
                let heads = self.heads.as_ref().expect("hybrid heads");
                let mu = heads.mu.forward_eval(&z.columns(0, half))?;
                let cb = codebook_override
                    .or(self.codebook.as_ref())
                    .ok_or_else(|| Error::State("hybrid agent without a codebook".into()))?;
                let quantized = self
                    .quantize_rows_with(&z.columns(half, self.arch.latent_dim), cb)?
                    .0;
                let zeros = Matrix::zeros(z.rows(), half);
                match mode {
                    EvalMode::Integrated => Matrix::hconcat(&mu, &quantized),
                    EvalMode::DiscreteOnly => Matrix::hconcat(&zeros, &quantized),
                    EvalMode::ContinuousOnly => Matrix::hconcat(&mu, &zeros),
                }
            }
            ChannelKind::MaskContinuous => {
                let half = self.arch.latent_dim / 2;
                Matrix::hconcat(&z.columns(0, half), &Matrix::zeros(z.rows(), half))
            }
            ChannelKind::MaskDiscrete { .. } => {
                let half = self.arch.latent_dim / 2;
                let cb = codebook_override
                    .or(self.codebook.as_ref())
                    .ok_or_else(|| Error::State("masked agent without a codebook".into()))?;
                let quantized = self
                    .quantize_rows_with(&z.columns(half, self.arch.latent_dim), cb)?
                    .0;
                Matrix::hconcat(&Matrix::zeros(z.rows(), half), &quantized)
            }
        }
    }

    /// Decodes a message deterministically.
    pub fn decode_eval(&self, message: &Matrix) -> Result<Matrix> {
        self.decoder.forward_eval(message)
    }

    /// Internal deterministic forward (speaker and listener are the same
    /// agent); used for diagonal entries and internal validation loss.
    pub fn eval_forward(&self, x: &Matrix, mode: EvalMode) -> Result<ForwardRecord> {
        let message = self.eval_message(x, None, mode)?;
        let x_prime = self.decode_eval(&message)?;
        let (recon, _) = mse_loss(x, &x_prime)?;
        Ok(ForwardRecord {
            reconstruction: x_prime,
            latent: message,
            recon,
            codebook: 0.0,
            commitment: 0.0,
            kl: 0.0,
        })
    }

    // ---- shared internals -----------------------------------------------

    fn quantize_rows(&self, z: &Matrix) -> Result<(Matrix, Vec<QuantizeResult>)> {
        let cb = self
            .codebook
            .as_ref()
            .ok_or_else(|| Error::State("quantized channel without a codebook".into()))?;
        self.quantize_rows_with(z, cb)
    }

    pub(crate) fn quantize_rows_with(
        &self,
        z: &Matrix,
        cb: &Codebook,
    ) -> Result<(Matrix, Vec<QuantizeResult>)> {
        let cfg = self
            .quant_cfg
            .as_ref()
            .ok_or_else(|| Error::State("quantized channel without a config".into()))?;
        let mut out = Matrix::zeros(z.rows(), z.cols());
        let mut results = Vec::with_capacity(z.rows());
        for r in 0..z.rows() {
            let res = quantize(z.row(r), cb, cfg)?;
            out.row_mut(r).copy_from_slice(&res.quantized);
            results.push(res);
        }
        Ok((out, results))
    }

    /// Shared VAE head path: `mu`, `logvar`, reparameterized latent, and
    /// the raw (unweighted) batch-mean KL. `noise == None` selects the
    /// deterministic mean path.
    fn vae_path(&self, h: &Matrix, noise: Option<&Matrix>) -> Result<(Matrix, VaeCtx, f64)> {
        let heads = self
            .heads
            .as_ref()
            .ok_or_else(|| Error::State("stochastic channel without VAE heads".into()))?;
        vae_forward_path(&heads.mu, &heads.logvar, h, noise)
    }

    /// Backward through the VAE head path; returns the gradient with
    /// respect to the head input plus the two head parameter gradients.
    fn vae_backward(
        &self,
        d_latent: &Matrix,
        ctx: &VaeCtx,
        kl_weight: f64,
        batch: f64,
    ) -> Result<(Matrix, LayerGrads, LayerGrads)> {
        let heads = self.heads.as_ref().expect("vae heads");
        vae_backward_path(&heads.mu, &heads.logvar, d_latent, ctx, kl_weight, batch)
    }
}

/// Forward through a mu/logvar head pair with optional reparameterization
/// noise. Returns the latent, the backward context, and the raw KL.
pub(crate) fn vae_forward_path(
    mu_layer: &DenseLayer,
    logvar_layer: &DenseLayer,
    h: &Matrix,
    noise: Option<&Matrix>,
) -> Result<(Matrix, VaeCtx, f64)> {
    let (mu, mu_cache) = mu_layer.forward(h)?;
    let (logvar, logvar_cache) = logvar_layer.forward(h)?;
    let mut sigma = logvar.clone();
    for v in sigma.data_mut() {
        *v = (0.5 * *v).exp();
    }
    if !sigma.is_finite() {
        return Err(Error::Numeric("non-finite sigma in VAE head".into()));
    }
    let noise = match noise {
        Some(n) => n.clone(),
        None => Matrix::zeros(h.rows(), mu.cols()),
    };
    let mut latent = mu.clone();
    for i in 0..latent.data().len() {
        latent.data_mut()[i] += sigma.data()[i] * noise.data()[i];
    }
    let kl = gaussian_kl(&mu, &logvar);
    Ok((
        latent,
        VaeCtx {
            mu,
            sigma,
            noise,
            mu_cache,
            logvar_cache,
        },
        kl,
    ))
}

/// Backward counterpart of [`vae_forward_path`].
pub(crate) fn vae_backward_path(
    mu_layer: &DenseLayer,
    logvar_layer: &DenseLayer,
    d_latent: &Matrix,
    ctx: &VaeCtx,
    kl_weight: f64,
    batch: f64,
) -> Result<(Matrix, LayerGrads, LayerGrads)> {
    let mut d_mu = d_latent.clone();
    for i in 0..d_mu.data().len() {
        d_mu.data_mut()[i] += kl_weight * ctx.mu.data()[i] / batch;
    }
    let mut d_logvar = Matrix::zeros(d_latent.rows(), d_latent.cols());
    for i in 0..d_logvar.data().len() {
        let sig = ctx.sigma.data()[i];
        let through_latent = d_latent.data()[i] * 0.5 * sig * ctx.noise.data()[i];
        let through_kl = kl_weight * 0.5 * (sig * sig - 1.0) / batch;
        d_logvar.data_mut()[i] = through_latent + through_kl;
    }
    let (d_h_mu, mu_grads) = mu_layer.backward(&d_mu, &ctx.mu_cache)?;
    let (d_h_lv, lv_grads) = logvar_layer.backward(&d_logvar, &ctx.logvar_cache)?;
    let mut d_h = d_h_mu;
    for (a, b) in d_h.data_mut().iter_mut().zip(d_h_lv.data()) {
        *a += b;
    }
    Ok((d_h, mu_grads, lv_grads))
}

/// Raw batch-mean KL divergence of `N(mu, sigma^2)` from the standard
/// normal: `1/2 sum_j (mu_j^2 + sigma_j^2 - 1 - log sigma_j^2)`, averaged
/// over rows. Non-negative by construction.
pub fn gaussian_kl(mu: &Matrix, logvar: &Matrix) -> f64 {
    let mut total = 0.0;
    for i in 0..mu.data().len() {
        let m = mu.data()[i];
        let lv = logvar.data()[i];
        total += 0.5 * (m * m + lv.exp() - 1.0 - lv);
    }
    total / mu.rows() as f64
}

/// Encoder-side gradient for a quantized latent slice: straight-through
/// pass of the decoder-input gradient plus the commitment term.
pub(crate) fn quantized_latent_grad(
    d_quantized: &Matrix,
    results: &[QuantizeResult],
    codebook: &Codebook,
    beta: f64,
    batch: f64,
) -> Result<Matrix> {
    let mut d_z = Matrix::zeros(d_quantized.rows(), d_quantized.cols());
    for r in 0..d_quantized.rows() {
        let ste = straight_through(d_quantized.row(r));
        let commit = commitment_gradient(&results[r], codebook, beta);
        let row = d_z.row_mut(r);
        for i in 0..row.len() {
            row[i] = ste[i] + commit[i] / batch;
        }
    }
    Ok(d_z)
}

pub(crate) fn collect_assignments(results: &[QuantizeResult], out: &mut Vec<(usize, Vec<f64>)>) {
    for res in results {
        for (idx, seg) in res.indices.iter().zip(&res.segments) {
            out.push((*idx, seg.clone()));
        }
    }
}

pub(crate) fn mean_quant_losses(results: &[QuantizeResult], beta: f64) -> (f64, f64) {
    let n = results.len().max(1) as f64;
    let codebook: f64 = results.iter().map(|r| r.codebook_loss).sum::<f64>() / n;
    let commitment: f64 = results.iter().map(|r| r.commitment_loss).sum::<f64>() / n;
    (codebook, beta * commitment)
}

/// Box-Muller standard normal sample.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Matrix of independent standard-normal draws (Box-Muller), used for
/// the reparameterization trick.
pub fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = standard_normal(rng);
    }
    m
}
