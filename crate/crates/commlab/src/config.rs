//! Experiment configuration: a strict TOML file plus flag overrides.
//!
//! Unknown fields are rejected, every constraint is checked before any
//! compute starts, and the fully resolved config re-serializes to a form
//! that parses back identically — the manifest's config echo is enough
//! to rerun an experiment.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::{ChannelKind, EvalMode};
use crate::error::{Error, Result};

/// Which experiment driver to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Individual,
    CrossTraining,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::Individual => "individual",
            Protocol::CrossTraining => "cross_training",
        }
    }
}

/// Channel selector; token count and KL weight come from the dedicated
/// fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelName {
    Ae,
    Vq,
    Vae,
    HybridSplit,
    MaskContinuous,
    MaskDiscrete,
}

/// Data source for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Procedural striped images.
    Synthetic {
        #[serde(default = "defaults::classes")]
        classes: usize,
        #[serde(default = "defaults::per_class")]
        per_class: usize,
        #[serde(default = "defaults::side")]
        side: usize,
    },
    /// IDX image/label pair on disk.
    Idx { images: PathBuf, labels: PathBuf },
}

mod defaults {
    pub fn classes() -> usize {
        4
    }
    pub fn per_class() -> usize {
        200
    }
    pub fn side() -> usize {
        8
    }
    pub fn agents() -> usize {
        4
    }
    pub fn num_tokens() -> usize {
        8
    }
    pub fn codebook_size() -> usize {
        32
    }
    pub fn latent_dim() -> usize {
        16
    }
    pub fn hidden_dim() -> usize {
        64
    }
    pub fn beta() -> f64 {
        0.25
    }
    pub fn ema_decay() -> f64 {
        0.99
    }
    pub fn learning_rate() -> f64 {
        0.001
    }
    pub fn beta_kl() -> f64 {
        1.0
    }
    pub fn batch_size() -> usize {
        256
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn overlap() -> f64 {
        0.1
    }
    pub fn val_fraction() -> f64 {
        0.1
    }
    pub fn output_dir() -> std::path::PathBuf {
        std::path::PathBuf::from("runs/out")
    }
    pub fn snapshot_cadence() -> usize {
        10
    }
    pub fn iterations() -> usize {
        500
    }
    pub fn record_every() -> usize {
        10
    }
}

/// A fully resolved experiment description.
///
/// The hyperparameter defaults follow the source experiments: commitment
/// cost 0.25, EMA decay 0.99, Adam learning rate 0.001, batch size 256.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub protocol: Protocol,
    pub channel: ChannelName,
    pub dataset: DatasetConfig,
    /// Agent count `m`. Individual training requires one class per agent.
    #[serde(default = "defaults::agents")]
    pub agents: usize,
    /// Token count `N` for quantized channels.
    #[serde(default = "defaults::num_tokens")]
    pub num_tokens: usize,
    /// Codebook size `L`.
    #[serde(default = "defaults::codebook_size")]
    pub codebook_size: usize,
    /// Latent dimension `M`.
    #[serde(default = "defaults::latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "defaults::hidden_dim")]
    pub hidden_dim: usize,
    /// Commitment cost.
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    /// KL weight for the VAE channel.
    #[serde(default = "defaults::beta_kl")]
    pub beta_kl: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    /// Target overlap ratio `p`.
    #[serde(default = "defaults::overlap")]
    pub overlap: f64,
    #[serde(default = "defaults::val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    /// Dump codebooks every this many epochs (0 = final epoch only).
    #[serde(default = "defaults::snapshot_cadence")]
    pub snapshot_cadence: usize,
    /// Cross-training iteration count.
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    /// Cross-training internal-loss recording cadence.
    #[serde(default = "defaults::record_every")]
    pub record_every: usize,
    #[serde(default)]
    pub eval_mode: EvalMode,
    /// Quantize cross-validation messages with the listener's codebook.
    #[serde(default)]
    pub listener_quantizer: bool,
    /// Also write per-batch usage histograms (large).
    #[serde(default)]
    pub usage_detail: bool,
    /// Write agent checkpoints at the end of the run.
    #[serde(default)]
    pub save_agents: bool,
}

impl ExperimentConfig {
    /// The channel with its parameters filled in.
    pub fn channel_kind(&self) -> ChannelKind {
        match self.channel {
            ChannelName::Ae => ChannelKind::Ae,
            ChannelName::Vq => ChannelKind::Vq {
                tokens: self.num_tokens,
            },
            ChannelName::Vae => ChannelKind::Vae {
                beta_kl: self.beta_kl,
            },
            ChannelName::HybridSplit => ChannelKind::HybridSplit {
                tokens: self.num_tokens,
            },
            ChannelName::MaskContinuous => ChannelKind::MaskContinuous,
            ChannelName::MaskDiscrete => ChannelKind::MaskDiscrete {
                tokens: self.num_tokens,
            },
        }
    }

    fn channel_uses_quantizer(&self) -> bool {
        matches!(
            self.channel,
            ChannelName::Vq | ChannelName::HybridSplit | ChannelName::MaskDiscrete
        )
    }

    fn channel_needs_even_latent(&self) -> bool {
        matches!(
            self.channel,
            ChannelName::HybridSplit | ChannelName::MaskContinuous | ChannelName::MaskDiscrete
        )
    }

    /// Checks every constraint; named field and expected range on failure.
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.agents < 2 {
            return err(format!("agents: need at least 2, got {}", self.agents));
        }
        if self.num_tokens == 0 {
            return err("num_tokens: must be at least 1".into());
        }
        if self.codebook_size == 0 {
            return err("codebook_size: must be at least 1".into());
        }
        if self.latent_dim == 0 {
            return err("latent_dim: must be at least 1".into());
        }
        if self.hidden_dim == 0 {
            return err("hidden_dim: must be at least 1".into());
        }
        if self.channel_needs_even_latent() && self.latent_dim % 2 != 0 {
            return err(format!(
                "latent_dim: split/masked channels need an even value, got {}",
                self.latent_dim
            ));
        }
        if self.channel_uses_quantizer() {
            let quantized_dim = if self.channel == ChannelName::Vq {
                self.latent_dim
            } else {
                self.latent_dim / 2
            };
            if quantized_dim % self.num_tokens != 0 {
                return err(format!(
                    "num_tokens: M mod N must be 0 (quantized dim {quantized_dim} \
                     is not divisible by num_tokens {})",
                    self.num_tokens
                ));
            }
        }
        if self.beta < 0.0 {
            return err(format!("beta: must be >= 0, got {}", self.beta));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return err(format!(
                "ema_decay: must lie in (0, 1), got {}",
                self.ema_decay
            ));
        }
        if self.learning_rate <= 0.0 {
            return err(format!(
                "learning_rate: must be > 0, got {}",
                self.learning_rate
            ));
        }
        if self.beta_kl < 0.0 {
            return err(format!("beta_kl: must be >= 0, got {}", self.beta_kl));
        }
        if self.batch_size == 0 {
            return err("batch_size: must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return err(format!(
                "overlap: must lie in [0, 1), got {}",
                self.overlap
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return err(format!(
                "val_fraction: must lie in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if self.iterations == 0 {
            return err("iterations: must be at least 1".into());
        }
        if self.record_every == 0 {
            return err("record_every: must be at least 1".into());
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                per_class,
                side,
            } => {
                if *classes == 0 || *classes > 16 {
                    return err(format!(
                        "dataset.classes: must lie in 1..=16, got {classes}"
                    ));
                }
                if *per_class == 0 {
                    return err("dataset.per_class: must be at least 1".into());
                }
                if *side < 8 {
                    return err(format!("dataset.side: must be at least 8, got {side}"));
                }
                if self.protocol == Protocol::Individual && *classes != self.agents {
                    return err(format!(
                        "agents: individual training pairs one agent per class; \
                         got {} agents and {classes} classes",
                        self.agents
                    ));
                }
            }
            DatasetConfig::Idx { .. } => {}
        }
        Ok(())
    }

    /// Serializes the resolved config as canonical TOML.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    /// Parses a resolved config from TOML (strict) and validates it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse failed: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses the config from an optional file plus `key=value` overrides
/// (dotted paths allowed) and dedicated flag overrides. Overrides win
/// over the file.
pub fn parse_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
    output_dir: Option<&Path>,
) -> Result<ExperimentConfig> {
    let mut root: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| {
                Error::Config(format!("cannot read config {}: {e}", p.display()))
            })?;
            text.parse().map_err(|e| {
                Error::Config(format!("config parse failed in {}: {e}", p.display()))
            })?
        }
        None => toml::Value::Table(toml::Table::new()),
    };

    for set in sets {
        let (key, value) = set.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got '{set}'"))
        })?;
        apply_override(&mut root, key.trim(), value.trim())?;
    }
    if let Some(seed) = seed {
        apply_override(&mut root, "seed", &seed.to_string())?;
    }
    if let Some(out) = output_dir {
        let table = root
            .as_table_mut()
            .ok_or_else(|| Error::Config("config root is not a table".into()))?;
        table.insert(
            "output_dir".into(),
            toml::Value::String(out.display().to_string()),
        );
    }

    let cfg: ExperimentConfig = root
        .try_into()
        .map_err(|e| Error::Config(format!("config parse failed: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(root: &mut toml::Value, key: &str, raw: &str) -> Result<()> {
    // Values parse as TOML literals; bare words fall back to strings so
    // `--set channel=vq` works without quoting.
    let value: toml::Value = match format!("v = {raw}").parse::<toml::Value>() {
        Ok(doc) => doc
            .as_table()
            .and_then(|t| t.get("v"))
            .cloned()
            .unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("--set {key}: '{part}' is not a table")))?;
        if i + 1 == parts.len() {
            table.insert((*part).into(), value);
            return Ok(());
        }
        node = table
            .entry(*part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("split always yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> &'static str {
        "protocol = \"individual\"\nchannel = \"vq\"\n\n[dataset]\nkind = \"synthetic\"\n"
    }

    #[test]
    fn minimal_config_fills_paper_defaults() {
        let cfg = ExperimentConfig::from_toml(minimal()).unwrap();
        assert_eq!(cfg.beta, 0.25);
        assert_eq!(cfg.ema_decay, 0.99);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.num_tokens, 8);
    }

    #[test]
    fn non_divisible_tokens_rejected() {
        let text = minimal().replace(
            "channel = \"vq\"",
            "channel = \"vq\"\nlatent_dim = 64\nnum_tokens = 7",
        );
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("M mod N must be 0"), "{err}");
    }

    #[test]
    fn unknown_field_rejected() {
        let text = format!("{}\nbogus_field = 3\n", minimal());
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn round_trip_is_identity() {
        let cfg = ExperimentConfig::from_toml(minimal()).unwrap();
        let echoed = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&echoed).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn set_overrides_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, minimal()).unwrap();
        let cfg = parse_config(
            Some(&path),
            &["epochs=3".into(), "dataset.per_class=50".into()],
            Some(99),
            None,
        )
        .unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.seed, 99);
        match cfg.dataset {
            DatasetConfig::Synthetic { per_class, .. } => assert_eq!(per_class, 50),
            _ => panic!("expected synthetic dataset"),
        }
    }

    #[test]
    fn flags_alone_are_enough() {
        let cfg = parse_config(
            None,
            &[
                "protocol=individual".into(),
                "channel=ae".into(),
                "dataset.kind=synthetic".into(),
            ],
            None,
            None,
        )
        .unwrap();
        assert_eq!(cfg.protocol, Protocol::Individual);
    }

    #[test]
    fn agents_must_match_classes_for_individual() {
        let text = minimal().replace("channel = \"vq\"", "channel = \"vq\"\nagents = 3");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("one agent per class"), "{err}");
    }

    #[test]
    fn overlap_range_is_enforced() {
        let text = minimal().replace("channel = \"vq\"", "channel = \"vq\"\noverlap = 1.5");
        let err = ExperimentConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("overlap"), "{err}");
    }
}
