//! Config-driven entry point: builds datasets, runs a protocol, writes
//! every report as CSV plus a run manifest.
//!
//! All outputs are plain text with deterministic formatting, so two runs
//! of the same config and seed produce byte-identical files (the
//! manifest's wall-clock duration aside).

use std::fs;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{Agent, AgentArch};
use crate::analytics::export_codebook;
use crate::config::{DatasetConfig, ExperimentConfig, Protocol};
use crate::data::{
    build_agent_datasets, split_validation, synth::synth_dataset, idx::load_idx, LabeledDataset,
    OverlapPlan,
};
use crate::error::{Error, Result};
use crate::protocol::{
    run_cross_training, run_individual_training, CommMatrix, CrossTrainingSettings,
    ProtocolReport, TrainingSettings,
};
use crate::seed::SeedSplitter;

/// Written exactly once per run. The config echo is sufficient to rerun
/// the experiment (for synthetic datasets) with no other inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub library_version: String,
    /// Content hash of the resolved config echo.
    pub config_sha256: String,
    /// Content hash with the seed zeroed; groups seed-replicates of one
    /// configuration.
    pub family_sha256: String,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub duration_seconds: f64,
    pub artifacts: Vec<String>,
    pub config: ExperimentConfig,
}

/// What a finished run reports back to the caller.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub communication_loss: Option<f64>,
    pub artifacts: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn config_hashes(cfg: &ExperimentConfig) -> Result<(String, String)> {
    let echo = cfg.to_toml()?;
    let mut family_cfg = cfg.clone();
    family_cfg.seed = 0;
    family_cfg.output_dir = PathBuf::from("");
    let family_echo = family_cfg.to_toml()?;
    Ok((
        sha256_hex(echo.as_bytes()),
        sha256_hex(family_echo.as_bytes()),
    ))
}

/// Runs one experiment end to end.
///
/// On failure the manifest is still written with `complete = false` and
/// the error message, flagging any partial outputs.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    let started = Instant::now();
    let mut artifacts: Vec<String> = Vec::new();

    let outcome = run_inner(cfg, &mut artifacts);
    let (config_sha256, family_sha256) = config_hashes(cfg)?;
    let manifest = RunManifest {
        library_version: crate::VERSION.to_string(),
        config_sha256,
        family_sha256,
        complete: outcome.is_ok(),
        error: outcome.as_ref().err().map(ToString::to_string),
        duration_seconds: started.elapsed().as_secs_f64(),
        artifacts: artifacts.clone(),
        config: cfg.clone(),
    };
    let manifest_text = toml::to_string_pretty(&manifest)
        .map_err(|e| Error::Config(format!("manifest serialization failed: {e}")))?;
    fs::write(cfg.output_dir.join("manifest.toml"), manifest_text)?;

    let communication_loss = outcome?;
    Ok(RunSummary {
        output_dir: cfg.output_dir.clone(),
        communication_loss,
        artifacts,
    })
}

fn run_inner(cfg: &ExperimentConfig, artifacts: &mut Vec<String>) -> Result<Option<f64>> {
    let splitter = SeedSplitter::new(cfg.seed);
    let ds = build_dataset(cfg, &splitter)?;
    let arch = AgentArch {
        input_dim: ds.input_dim,
        hidden_dim: cfg.hidden_dim,
        latent_dim: cfg.latent_dim,
        codebook_size: cfg.codebook_size,
        beta: cfg.beta,
        ema_decay: cfg.ema_decay,
    };
    let mut agents: Vec<Agent> = (0..cfg.agents)
        .map(|i| {
            let mut rng = splitter.agent_stream(i, "init");
            Agent::new(format!("agent{i}"), arch, cfg.channel_kind(), &mut rng)
        })
        .collect::<Result<_>>()?;

    match cfg.protocol {
        Protocol::Individual => {
            if ds.num_classes != cfg.agents {
                return Err(Error::config(format!(
                    "individual training pairs one agent per class; dataset has {} \
                     classes but the config asks for {} agents",
                    ds.num_classes, cfg.agents
                )));
            }
            let plan = OverlapPlan::new(&ds, cfg.overlap, cfg.val_fraction)?;
            let mut overlap_rng = splitter.stream("overlap");
            let sets = build_agent_datasets(&ds, &plan, &mut overlap_rng)?;
            let settings = TrainingSettings {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                eval_mode: cfg.eval_mode,
                listener_quantizer: cfg.listener_quantizer,
                keep_batch_usage: cfg.usage_detail,
            };
            let report = run_individual_training(&mut agents, &sets, &settings, &splitter)?;
            write_individual_outputs(cfg, &report, artifacts)?;
            save_agents_if_asked(cfg, &agents, artifacts)?;
            Ok(Some(report.communication_loss))
        }
        Protocol::CrossTraining => {
            let mut overlap_rng = splitter.stream("overlap");
            let (train, val) = split_validation(&ds, cfg.val_fraction, &mut overlap_rng)?;
            let settings = CrossTrainingSettings {
                iterations: cfg.iterations,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                record_every: cfg.record_every,
                eval_mode: cfg.eval_mode,
            };
            let report = run_cross_training(&mut agents, &train, &val, &settings, &splitter)?;

            let path = cfg.output_dir.join("internal_loss.csv");
            let mut w = BufWriter::new(File::create(&path)?);
            writeln!(w, "iteration,agent,value")?;
            for &(iter, agent, value) in &report.internal_losses {
                writeln!(w, "{iter},{agent},{value}")?;
            }
            w.flush()?;
            artifacts.push("internal_loss.csv".into());

            for (j, agent) in agents.iter().enumerate() {
                if let Some(cb) = agent.codebook() {
                    let name = format!("codebook_agent{j}_final.csv");
                    export_codebook(cb, &cfg.output_dir.join(&name))?;
                    artifacts.push(name);
                }
            }
            save_agents_if_asked(cfg, &agents, artifacts)?;
            Ok(None)
        }
    }
}

fn build_dataset(cfg: &ExperimentConfig, splitter: &SeedSplitter) -> Result<LabeledDataset> {
    match &cfg.dataset {
        DatasetConfig::Synthetic {
            classes,
            per_class,
            side,
        } => {
            let synth_seed = splitter.stream("dataset").gen::<u64>();
            synth_dataset(synth_seed, *classes, *per_class, *side)
        }
        DatasetConfig::Idx { images, labels } => load_idx(images, labels),
    }
}

fn save_agents_if_asked(
    cfg: &ExperimentConfig,
    agents: &[Agent],
    artifacts: &mut Vec<String>,
) -> Result<()> {
    if !cfg.save_agents {
        return Ok(());
    }
    let dir = cfg.output_dir.join("agents");
    fs::create_dir_all(&dir)?;
    for (j, agent) in agents.iter().enumerate() {
        let name = format!("agents/agent_{j}.bin");
        crate::agent::save_agent(agent, &cfg.output_dir.join(&name))?;
        artifacts.push(name);
    }
    Ok(())
}

fn write_individual_outputs(
    cfg: &ExperimentConfig,
    report: &ProtocolReport,
    artifacts: &mut Vec<String>,
) -> Result<()> {
    let dir = &cfg.output_dir;

    write_comm_matrix(&report.comm_matrix, &dir.join("comm_matrix.csv"))?;
    artifacts.push("comm_matrix.csv".into());

    {
        let mut w = BufWriter::new(File::create(dir.join("loss_curves.csv"))?);
        writeln!(w, "epoch,agent,component,value")?;
        for series in &report.per_agent {
            for (idx, metrics) in series.epochs.iter().enumerate() {
                let epoch = idx + 1;
                for (component, value) in [
                    ("recon", metrics.recon),
                    ("codebook", metrics.codebook),
                    ("commitment", metrics.commitment),
                    ("kl", metrics.kl),
                ] {
                    writeln!(w, "{epoch},{},{component},{value}", series.agent)?;
                }
            }
        }
        w.flush()?;
        artifacts.push("loss_curves.csv".into());
    }

    for series in &report.per_agent {
        let has_usage = series.epochs.iter().any(|m| m.usage.is_some());
        if !has_usage {
            continue;
        }
        let name = format!("usage_agent{}.csv", series.agent);
        let mut w = BufWriter::new(File::create(dir.join(&name))?);
        writeln!(w, "epoch,code_index,count")?;
        for (idx, metrics) in series.epochs.iter().enumerate() {
            if let Some(usage) = &metrics.usage {
                for (code, count) in usage.iter().enumerate() {
                    writeln!(w, "{},{code},{count}", idx + 1)?;
                }
            }
        }
        w.flush()?;
        artifacts.push(name);

        if cfg.usage_detail {
            let name = format!("usage_detail_agent{}.csv", series.agent);
            let mut w = BufWriter::new(File::create(dir.join(&name))?);
            writeln!(w, "iteration,code_index,count")?;
            let mut iteration = 0usize;
            for metrics in &series.epochs {
                if let Some(batches) = &metrics.batch_usage {
                    for batch in batches {
                        iteration += 1;
                        for (code, count) in batch.iter().enumerate() {
                            if *count > 0 {
                                writeln!(w, "{iteration},{code},{count}")?;
                            }
                        }
                    }
                }
            }
            w.flush()?;
            artifacts.push(name);
        }
    }

    write_epoch_series(
        &dir.join("variance.csv"),
        "epoch,tokens,value",
        report
            .variance_series
            .iter()
            .map(|&(e, v)| (e, report_tokens(report), v)),
    )?;
    artifacts.push("variance.csv".into());
    write_epoch_series(
        &dir.join("utilization.csv"),
        "epoch,tokens,value",
        report
            .utilization_series
            .iter()
            .map(|&(e, v)| (e, report_tokens(report), v)),
    )?;
    artifacts.push("utilization.csv".into());
    write_epoch_series(
        &dir.join("quantization.csv"),
        "epoch,tokens,value",
        report
            .quantization_series
            .iter()
            .map(|p| (p.epoch, p.tokens, p.value)),
    )?;
    artifacts.push("quantization.csv".into());

    {
        let mut w = BufWriter::new(File::create(dir.join("distances.csv"))?);
        writeln!(w, "epoch,ed_average")?;
        for &(epoch, value) in &report.ed_series {
            writeln!(w, "{epoch},{value}")?;
        }
        w.flush()?;
        artifacts.push("distances.csv".into());
    }

    // Codebook dumps at the snapshot cadence, plus always the final epoch.
    for series in &report.per_agent {
        for (idx, cb) in series.codebooks.iter().enumerate() {
            let epoch = idx + 1;
            let at_cadence = cfg.snapshot_cadence > 0 && epoch % cfg.snapshot_cadence == 0;
            let is_final = epoch == series.codebooks.len();
            if at_cadence || is_final {
                let name = format!("codebook_agent{}_epoch{epoch}.csv", series.agent);
                export_codebook(cb, &dir.join(&name))?;
                artifacts.push(name);
            }
        }
    }
    Ok(())
}

fn report_tokens(report: &ProtocolReport) -> usize {
    report
        .quantization_series
        .first()
        .map(|p| p.tokens)
        .unwrap_or(0)
}

fn write_epoch_series(
    path: &Path,
    header: &str,
    rows: impl Iterator<Item = (usize, usize, f64)>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for (epoch, tokens, value) in rows {
        writeln!(w, "{epoch},{tokens},{value}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_comm_matrix(cm: &CommMatrix, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "speaker")?;
    for k in 0..cm.m() {
        write!(w, ",listener{k}")?;
    }
    writeln!(w)?;
    for j in 0..cm.m() {
        write!(w, "{j}")?;
        for k in 0..cm.m() {
            write!(w, ",{}", cm.at(j, k))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a comm matrix CSV written by a run.
pub fn read_comm_matrix(path: &Path) -> Result<CommMatrix> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        offset: 0,
        message: format!("{}: empty comm matrix", path.display()),
    })??;
    let m = header.split(',').count() - 1;
    let mut losses = Vec::with_capacity(m * m);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        for field in line.split(',').skip(1) {
            losses.push(field.parse::<f64>().map_err(|e| Error::Parse {
                offset: 0,
                message: format!("{}: bad loss value: {e}", path.display()),
            })?);
        }
    }
    CommMatrix::new(m, losses)
}

/// Runs the base config once per token count, writing each report into
/// `<out_root>/tokens_<N>/`.
pub fn sweep(
    base: &ExperimentConfig,
    tokens: &[usize],
    out_root: &Path,
) -> Result<Vec<RunSummary>> {
    if tokens.is_empty() {
        return Err(Error::Usage("sweep needs at least one token count".into()));
    }
    let mut summaries = Vec::with_capacity(tokens.len());
    for &n in tokens {
        let mut cfg = base.clone();
        cfg.num_tokens = n;
        cfg.output_dir = out_root.join(format!("tokens_{n}"));
        cfg.validate()
            .map_err(|e| Error::Config(format!("token count {n}: {e}")))?;
        summaries.push(run(&cfg)?);
    }
    Ok(summaries)
}

/// One run's line in a comparison.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub dir: PathBuf,
    pub channel: String,
    pub tokens: usize,
    pub seed: u64,
    pub communication_loss: f64,
    pub family: String,
}

/// Mean and spread of one configuration across seeds.
#[derive(Debug, Clone)]
pub struct CompareAggregate {
    pub channel: String,
    pub tokens: usize,
    pub runs: usize,
    pub mean: f64,
    pub stddev: f64,
    pub family: String,
}

#[derive(Debug, Clone)]
pub struct ComparisonTable {
    pub rows: Vec<CompareRow>,
    pub aggregates: Vec<CompareAggregate>,
}

impl ComparisonTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("dir,channel,tokens,seed,communication_loss\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.dir.display(),
                row.channel,
                row.tokens,
                row.seed,
                row.communication_loss
            ));
        }
        out.push_str("\nchannel,tokens,runs,mean,stddev\n");
        for agg in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                agg.channel, agg.tokens, agg.runs, agg.mean, agg.stddev
            ));
        }
        out
    }
}

/// Summarizes communication loss across stored reports, grouping
/// seed-replicates of the same configuration.
pub fn compare(dirs: &[PathBuf]) -> Result<ComparisonTable> {
    if dirs.len() < 2 {
        return Err(Error::Usage(
            "compare needs at least 2 report directories".into(),
        ));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let manifest_path = dir.join("manifest.toml");
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Config(format!("{}: cannot read manifest: {e}", dir.display()))
        })?;
        let manifest: RunManifest = toml::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: bad manifest: {e}", dir.display()))
        })?;
        let cm_path = dir.join("comm_matrix.csv");
        if !cm_path.exists() {
            return Err(Error::Config(format!(
                "{}: no comm matrix (not an individual-training report)",
                dir.display()
            )));
        }
        let cm = read_comm_matrix(&cm_path)?;
        let loss = crate::protocol::communication_loss(&cm)?;
        rows.push(CompareRow {
            dir: dir.clone(),
            channel: format!("{:?}", manifest.config.channel).to_lowercase(),
            tokens: manifest.config.num_tokens,
            seed: manifest.config.seed,
            communication_loss: loss,
            family: manifest.family_sha256.clone(),
        });
    }

    let mut aggregates: Vec<CompareAggregate> = Vec::new();
    let mut seen: Vec<String> = Vec::new();
    for row in &rows {
        if seen.contains(&row.family) {
            continue;
        }
        seen.push(row.family.clone());
        let members: Vec<&CompareRow> =
            rows.iter().filter(|r| r.family == row.family).collect();
        let n = members.len() as f64;
        let mean = members.iter().map(|r| r.communication_loss).sum::<f64>() / n;
        let stddev = if members.len() > 1 {
            (members
                .iter()
                .map(|r| (r.communication_loss - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0))
                .sqrt()
        } else {
            0.0
        };
        aggregates.push(CompareAggregate {
            channel: row.channel.clone(),
            tokens: row.tokens,
            runs: members.len(),
            mean,
            stddev,
            family: row.family.clone(),
        });
    }
    Ok(ComparisonTable { rows, aggregates })
}
