//! Experiment drivers: individual training with cross-agent validation,
//! and cross-training with randomly paired speakers and listeners.
//!
//! Individual training gives every agent its own overlap-controlled
//! training set; after training, every ordered (speaker, listener) pair
//! is scored on the shared validation set. Cross-training exposes all
//! agents to one shared training set and, on each iteration, optimizes a
//! randomly sampled encoder/channel/decoder combination.

use rayon::prelude::*;

use crate::agent::{
    collect_assignments, quantized_latent_grad, standard_normal_matrix, vae_backward_path,
    vae_forward_path, Agent, ChannelKind, EpochMetrics, EvalMode,
};
use crate::analytics::{
    matrices_distance, track_quantization_loss, usage_variance, utilization_rate, SeriesPoint,
};
use crate::data::{AgentDatasets, LabeledDataset};
use crate::error::{Error, Result};
use crate::numeric::{mse_loss, Matrix};
use crate::quantizer::Codebook;
use crate::seed::SeedSplitter;

/// Cross-reconstruction losses between every ordered (speaker, listener)
/// pair. The diagonal holds each agent's internal validation loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CommMatrix {
    m: usize,
    losses: Vec<f64>,
}

impl CommMatrix {
    pub fn new(m: usize, losses: Vec<f64>) -> Result<Self> {
        if losses.len() != m * m {
            return Err(Error::shape(format!(
                "comm matrix needs {m}x{m} entries, got {}",
                losses.len()
            )));
        }
        if losses.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Numeric(
                "comm matrix entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self { m, losses })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Loss of speaker `j` with listener `k`.
    pub fn at(&self, speaker: usize, listener: usize) -> f64 {
        self.losses[speaker * self.m + listener]
    }

    pub fn row(&self, speaker: usize) -> &[f64] {
        &self.losses[speaker * self.m..(speaker + 1) * self.m]
    }

    /// `loss_j`: mean loss of speaker `j` across all other listeners.
    pub fn speaker_loss(&self, j: usize) -> f64 {
        let sum: f64 = (0..self.m).filter(|&k| k != j).map(|k| self.at(j, k)).sum();
        sum / (self.m - 1) as f64
    }
}

/// Sum over speakers of their mean off-diagonal loss.
pub fn communication_loss(cm: &CommMatrix) -> Result<f64> {
    if cm.m() < 2 {
        return Err(Error::Usage(format!(
            "communication loss needs at least 2 agents, got {}",
            cm.m()
        )));
    }
    Ok((0..cm.m()).map(|j| cm.speaker_loss(j)).sum())
}

/// Knobs shared by both protocols.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub eval_mode: EvalMode,
    /// Quantize cross-validation messages with the listener's codebook
    /// instead of the speaker's.
    pub listener_quantizer: bool,
    /// Retain per-batch usage histograms in the report.
    pub keep_batch_usage: bool,
}

/// One agent's per-epoch training history.
#[derive(Debug, Clone)]
pub struct AgentEpochSeries {
    pub agent: usize,
    pub epochs: Vec<EpochMetrics>,
    /// Post-epoch codebook snapshots (quantized channels only).
    pub codebooks: Vec<Codebook>,
}

/// Everything an individual-training run produces.
#[derive(Debug, Clone)]
pub struct ProtocolReport {
    pub comm_matrix: CommMatrix,
    pub communication_loss: f64,
    pub per_agent: Vec<AgentEpochSeries>,
    /// Pairwise codebook distance across agents, per epoch.
    pub ed_series: Vec<(usize, f64)>,
    /// Usage-count variance, mean across agents, per epoch.
    pub variance_series: Vec<(usize, f64)>,
    /// Codebook utilization, mean across agents, per epoch.
    pub utilization_series: Vec<(usize, f64)>,
    /// Quantization penalty (codebook + weighted commitment), mean across
    /// agents, per epoch.
    pub quantization_series: Vec<SeriesPoint>,
}

/// Algorithm: train `m` agents independently on their own train sets,
/// then score all ordered pairs on the shared validation set.
///
/// Agent training runs in parallel; each agent draws from its own named
/// random stream, so the result does not depend on scheduling.
pub fn run_individual_training(
    agents: &mut Vec<Agent>,
    data: &AgentDatasets,
    settings: &TrainingSettings,
    splitter: &SeedSplitter,
) -> Result<ProtocolReport> {
    if agents.len() != data.train_sets.len() {
        return Err(Error::config(format!(
            "{} agents but {} train sets",
            agents.len(),
            data.train_sets.len()
        )));
    }
    let tokens = agents
        .first()
        .and_then(|a| a.quantizer_config())
        .map(|c| c.num_tokens());

    let per_agent: Result<Vec<AgentEpochSeries>> = agents
        .par_iter_mut()
        .enumerate()
        .map(|(idx, agent)| {
            let mut rng = splitter.agent_stream(idx, "train");
            let train_set = &data.train_sets[idx];
            let mut epochs = Vec::with_capacity(settings.epochs);
            let mut codebooks = Vec::new();
            for epoch in 1..=settings.epochs {
                let metrics = agent
                    .train_epoch(
                        train_set,
                        settings.batch_size,
                        &mut rng,
                        settings.learning_rate,
                        settings.keep_batch_usage,
                    )
                    .map_err(|e| {
                        Error::Numeric(format!(
                            "agent {} diverged at epoch {epoch}: {e}",
                            agent.id()
                        ))
                    })?;
                epochs.push(metrics);
                if let Some(cb) = agent.codebook() {
                    codebooks.push(cb.clone());
                }
            }
            Ok(AgentEpochSeries {
                agent: idx,
                epochs,
                codebooks,
            })
        })
        .collect();
    let per_agent = per_agent?;

    let comm_matrix = cross_validate(agents, &data.val_set, settings)?;
    let communication_loss = communication_loss(&comm_matrix)?;

    let mut ed_series = Vec::new();
    let mut variance_series = Vec::new();
    let mut utilization_series = Vec::new();
    let mut quant_values = Vec::new();
    for epoch in 1..=settings.epochs {
        let idx = epoch - 1;
        let snapshots: Vec<&Matrix> = per_agent
            .iter()
            .filter_map(|s| s.codebooks.get(idx).map(|cb| cb.codes()))
            .collect();
        if snapshots.len() == agents.len() && snapshots.len() >= 2 {
            ed_series.push((epoch, matrices_distance(&snapshots)?));
        }
        let mut var_sum = 0.0;
        let mut util_sum = 0.0;
        let mut quant_sum = 0.0;
        let mut counted = 0usize;
        for series in &per_agent {
            let metrics = &series.epochs[idx];
            if let Some(usage) = &metrics.usage {
                var_sum += usage_variance(usage);
                util_sum += utilization_rate(usage);
                counted += 1;
            }
            quant_sum += metrics.codebook + metrics.commitment;
        }
        if counted > 0 {
            let n = counted as f64;
            variance_series.push((epoch, var_sum / n));
            utilization_series.push((epoch, util_sum / n));
            quant_values.push((epoch, quant_sum / agents.len() as f64));
        }
    }
    let quantization_series = track_quantization_loss(&quant_values, tokens.unwrap_or(0));

    Ok(ProtocolReport {
        comm_matrix,
        communication_loss,
        per_agent,
        ed_series,
        variance_series,
        utilization_series,
        quantization_series,
    })
}

/// Scores every ordered (speaker, listener) pair on the validation set:
/// encode with the speaker, apply the speaker's channel (quantizing with
/// the speaker's codebook unless `listener_quantizer` is set), decode
/// with the listener, and average the reconstruction error.
pub fn cross_validate(
    agents: &[Agent],
    val_set: &LabeledDataset,
    settings: &TrainingSettings,
) -> Result<CommMatrix> {
    if agents.is_empty() {
        return Err(Error::Usage("cross_validate with no agents".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Usage("cross_validate with an empty validation set".into()));
    }
    let latent = agents[0].latent_dim();
    let channel = agents[0].channel().name();
    for a in agents {
        if a.latent_dim() != latent {
            return Err(Error::config(format!(
                "agent {} latent dim {} does not match {latent}",
                a.id(),
                a.latent_dim()
            )));
        }
        if a.channel().name() != channel {
            return Err(Error::config(format!(
                "agent {} channel {} does not match {channel}",
                a.id(),
                a.channel().name()
            )));
        }
    }

    let rows: Vec<Vec<f64>> = val_set.items.iter().map(|i| i.pixels.clone()).collect();
    let x = Matrix::from_rows(&rows)?;
    let m = agents.len();
    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|j| (0..m).map(move |k| (j, k)))
        .collect();
    let entries: Result<Vec<f64>> = pairs
        .par_iter()
        .map(|&(j, k)| {
            let speaker = &agents[j];
            let listener = &agents[k];
            let codebook_override = if settings.listener_quantizer && j != k {
                listener.codebook()
            } else {
                None
            };
            let message = speaker.eval_message(&x, codebook_override, settings.eval_mode)?;
            let reconstruction = listener.decode_eval(&message)?;
            Ok(mse_loss(&x, &reconstruction)?.0)
        })
        .collect();
    CommMatrix::new(m, entries?)
}

/// Settings specific to cross-training.
#[derive(Debug, Clone, Copy)]
pub struct CrossTrainingSettings {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Record every agent's internal validation loss every this many
    /// iterations.
    pub record_every: usize,
    pub eval_mode: EvalMode,
}

/// The components chosen for one cross-training iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledPair {
    /// 1-based iteration number.
    pub iteration: usize,
    pub speaker: usize,
    pub listener: usize,
    /// Whose channel state was used; `None` for channels without one
    /// (plain AE never samples a quantizer).
    pub channel_owner: Option<usize>,
}

/// Cross-training history: sampled pairs and periodic internal test
/// losses per agent.
#[derive(Debug, Clone)]
pub struct CrossTrainingReport {
    pub sampled_pairs: Vec<SampledPair>,
    /// `(iteration, agent, internal validation loss)` at the recording
    /// cadence.
    pub internal_losses: Vec<(usize, usize, f64)>,
}

/// Algorithm: every iteration samples a batch, an encoder `e_i`, a
/// decoder `d_k` (`i != k`), and — for channels that have one — the
/// channel state (codebook or VAE heads) of `i` or `k` uniformly; the
/// sampled components are then optimized jointly on the batch.
pub fn run_cross_training(
    agents: &mut [Agent],
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    settings: &CrossTrainingSettings,
    splitter: &SeedSplitter,
) -> Result<CrossTrainingReport> {
    let m = agents.len();
    if m < 2 {
        return Err(Error::Usage(format!(
            "cross-training needs at least 2 agents, got {m}"
        )));
    }
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Usage("cross-training needs non-empty datasets".into()));
    }
    let mut rng = splitter.stream("protocol");
    use rand::Rng;

    let val_rows: Vec<Vec<f64>> = val_set.items.iter().map(|i| i.pixels.clone()).collect();
    let val_x = Matrix::from_rows(&val_rows)?;

    let mut sampled_pairs = Vec::with_capacity(settings.iterations);
    let mut internal_losses = Vec::new();
    for iter in 1..=settings.iterations {
        let batch = sample_batch(train_set, settings.batch_size, &mut rng)?;
        let speaker_idx = rng.gen_range(0..m);
        let raw = rng.gen_range(0..m - 1);
        let listener_idx = if raw >= speaker_idx { raw + 1 } else { raw };

        // Plain AE has no channel state, so no owner is drawn for it.
        let channel = agents[speaker_idx].channel();
        let channel_owner = if channel == ChannelKind::Ae || channel == ChannelKind::MaskContinuous
        {
            None
        } else if rng.gen_range(0..2u8) == 0 {
            Some(speaker_idx)
        } else {
            Some(listener_idx)
        };
        sampled_pairs.push(SampledPair {
            iteration: iter,
            speaker: speaker_idx,
            listener: listener_idx,
            channel_owner,
        });
        let owner_idx = channel_owner.unwrap_or(speaker_idx);

        cross_train_step(
            agents,
            speaker_idx,
            listener_idx,
            owner_idx,
            &batch,
            settings.learning_rate,
            &mut rng,
        )
        .map_err(|e| Error::Numeric(format!("cross-training iteration {iter}: {e}")))?;

        if iter % settings.record_every == 0 {
            for (idx, agent) in agents.iter().enumerate() {
                let record = agent.eval_forward(&val_x, settings.eval_mode)?;
                internal_losses.push((iter, idx, record.recon));
            }
        }
    }
    Ok(CrossTrainingReport {
        sampled_pairs,
        internal_losses,
    })
}

fn sample_batch(
    ds: &LabeledDataset,
    batch_size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Matrix> {
    let take = batch_size.min(ds.len()).max(1);
    let picked = rand::seq::index::sample(rng, ds.len(), take);
    let rows: Vec<Vec<f64>> = picked.iter().map(|i| ds.items[i].pixels.clone()).collect();
    Matrix::from_rows(&rows)
}

/// One mixed-component optimization step: encoder of `speaker`, channel
/// state of `owner`, decoder of `listener`.
fn cross_train_step(
    agents: &mut [Agent],
    speaker: usize,
    listener: usize,
    owner: usize,
    x: &Matrix,
    lr: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let channel = agents[speaker].channel();
    let latent_dim = agents[speaker].latent_dim();
    let batch = x.rows() as f64;

    // Encode with the speaker.
    let z = {
        let a = &mut agents[speaker];
        a.encoder_mut().forward_train(x)?
    };

    // Channel transform with the owner's state.
    enum Middle {
        Plain,
        Quantized {
            results: Vec<crate::quantizer::QuantizeResult>,
        },
        Stochastic {
            ctx: crate::agent::VaeCtx,
        },
        Hybrid {
            results: Vec<crate::quantizer::QuantizeResult>,
            ctx: crate::agent::VaeCtx,
        },
    }

    let (message, middle) = match channel {
        ChannelKind::Ae => (z.clone(), Middle::Plain),
        ChannelKind::Vq { .. } => {
            let owner_cb = agents[owner]
                .codebook()
                .ok_or_else(|| Error::State("VQ agent without codebook".into()))?
                .clone();
            let (quantized, results) = agents[speaker].quantize_rows_with(&z, &owner_cb)?;
            (quantized, Middle::Quantized { results })
        }
        ChannelKind::Vae { .. } => {
            let (mu_layer, lv_layer) = agents[owner]
                .vae_head_layers()
                .ok_or_else(|| Error::State("VAE agent without heads".into()))?;
            let noise = standard_normal_matrix(z.rows(), z.cols(), rng);
            let (latent, ctx, _kl) = vae_forward_path(mu_layer, lv_layer, &z, Some(&noise))?;
            (latent, Middle::Stochastic { ctx })
        }
        ChannelKind::HybridSplit { .. } => {
            let half = latent_dim / 2;
            let z_cont = z.columns(0, half);
            let z_disc = z.columns(half, latent_dim);
            let (mu_layer, lv_layer) = agents[owner]
                .vae_head_layers()
                .ok_or_else(|| Error::State("hybrid agent without heads".into()))?;
            let noise = standard_normal_matrix(z.rows(), half, rng);
            let (latent_cont, ctx, _kl) =
                vae_forward_path(mu_layer, lv_layer, &z_cont, Some(&noise))?;
            let owner_cb = agents[owner]
                .codebook()
                .ok_or_else(|| Error::State("hybrid agent without codebook".into()))?
                .clone();
            let (quantized, results) = agents[speaker].quantize_rows_with(&z_disc, &owner_cb)?;
            (
                Matrix::hconcat(&latent_cont, &quantized)?,
                Middle::Hybrid { results, ctx },
            )
        }
        ChannelKind::MaskContinuous => {
            let half = latent_dim / 2;
            let kept = z.columns(0, half);
            (
                Matrix::hconcat(&kept, &Matrix::zeros(z.rows(), half))?,
                Middle::Plain,
            )
        }
        ChannelKind::MaskDiscrete { .. } => {
            let half = latent_dim / 2;
            let z_disc = z.columns(half, latent_dim);
            let owner_cb = agents[owner]
                .codebook()
                .ok_or_else(|| Error::State("masked agent without codebook".into()))?
                .clone();
            let (quantized, results) = agents[speaker].quantize_rows_with(&z_disc, &owner_cb)?;
            (
                Matrix::hconcat(&Matrix::zeros(z.rows(), half), &quantized)?,
                Middle::Quantized { results },
            )
        }
    };

    // Decode with the listener and backpropagate the reconstruction error.
    let (d_message, decoder_grads) = {
        let a = &mut agents[listener];
        let x_prime = a.decoder_mut().forward_train(&message)?;
        let (loss, d_recon) = mse_loss(x, &x_prime)?;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite reconstruction loss".into()));
        }
        a.decoder_mut().backward(&d_recon)?
    };

    // Channel backward with the owner's state, encoder backward with the
    // speaker's.
    let beta = agents[speaker].arch().beta;
    let mut assignments: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut head_grads = None;
    let d_encoder_out = match &middle {
        Middle::Plain => match channel {
            ChannelKind::MaskContinuous => {
                let half = latent_dim / 2;
                let kept = d_message.columns(0, half);
                Matrix::hconcat(&kept, &Matrix::zeros(d_message.rows(), half))?
            }
            _ => d_message.clone(),
        },
        Middle::Quantized { results } => {
            let owner_cb = agents[owner].codebook().expect("codebook").clone();
            collect_assignments(results, &mut assignments);
            match channel {
                ChannelKind::MaskDiscrete { .. } => {
                    let half = latent_dim / 2;
                    let d_disc = d_message.columns(half, latent_dim);
                    let d_z = quantized_latent_grad(&d_disc, results, &owner_cb, beta, batch)?;
                    Matrix::hconcat(&Matrix::zeros(d_z.rows(), half), &d_z)?
                }
                _ => quantized_latent_grad(&d_message, results, &owner_cb, beta, batch)?,
            }
        }
        Middle::Stochastic { ctx } => {
            let ChannelKind::Vae { beta_kl } = channel else {
                unreachable!("stochastic middle on non-VAE channel");
            };
            let (mu_layer, lv_layer) = agents[owner].vae_head_layers().expect("heads");
            let (d_h, mu_g, lv_g) =
                vae_backward_path(mu_layer, lv_layer, &d_message, ctx, beta_kl, batch)?;
            head_grads = Some((mu_g, lv_g));
            d_h
        }
        Middle::Hybrid { results, ctx } => {
            let half = latent_dim / 2;
            let d_cont = d_message.columns(0, half);
            let d_disc = d_message.columns(half, latent_dim);
            let (mu_layer, lv_layer) = agents[owner].vae_head_layers().expect("heads");
            let (d_h, mu_g, lv_g) =
                vae_backward_path(mu_layer, lv_layer, &d_cont, ctx, 1.0, batch)?;
            head_grads = Some((mu_g, lv_g));
            let owner_cb = agents[owner].codebook().expect("codebook").clone();
            collect_assignments(results, &mut assignments);
            let d_z_disc = quantized_latent_grad(&d_disc, results, &owner_cb, beta, batch)?;
            Matrix::hconcat(&d_h, &d_z_disc)?
        }
    };

    let encoder_grads = {
        let a = &mut agents[speaker];
        let (_, grads) = a.encoder_mut().backward(&d_encoder_out)?;
        grads
    };

    // Optimize exactly the sampled components.
    agents[listener].step_decoder(&decoder_grads, lr)?;
    agents[speaker].step_encoder(&encoder_grads, lr)?;
    if let Some((mu_g, lv_g)) = head_grads {
        agents[owner].step_heads(&mu_g, &lv_g, lr)?;
    }
    if !assignments.is_empty() {
        agents[owner].apply_ema(&assignments)?;
    }
    Ok(())
}
