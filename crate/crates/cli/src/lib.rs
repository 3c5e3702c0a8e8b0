//! Experiment pipelines over `tjac-core`: config loading, a content-addressed
//! artifact cache, and one subcommand per experiment. Every subcommand writes
//! its CSV tables and a `manifest.json` under `<out>/<command>/`.

pub mod commands;
pub mod config;
pub mod error;
pub mod oracle;
pub mod pipeline;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::commands::Report;
pub use crate::config::{ExperimentConfig, Scale};
pub use crate::error::{CliError, ErrorKind};
use crate::error::StageExt;
use crate::pipeline::{write_csv, write_json, CacheEvent, Context, OutputLock, RunSpec};

#[derive(Debug, Parser)]
#[command(name = "tjac", version, about = "Training Jacobians of small MLPs on the digits data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML config merged over the scale preset, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Scale::Paper)]
    pub scale: Scale,
    /// Worker threads for rayon and faer.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Check SVD invariants at runtime.
    #[arg(long, global = true)]
    pub verify: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Train the reference run and write its loss curve.
    Train,
    /// Training Jacobian of the reference run.
    Jacobian,
    /// SVD of the training Jacobian.
    Svd,
    /// Singular values, regions and left/right alignment.
    Spectrum,
    /// Retraining from perturbed initializations along a bulk and the top direction.
    Linesearch,
    /// KL divergence of predictions under unit perturbations along each singular direction.
    Behavior,
    /// Parameter-function Jacobian spectra and nullspace overlap with the bulk.
    Pfj,
    /// Bulk similarity across seeds and labels, and the white-noise spectrum.
    BulkSim,
    /// Training restricted to chaotic, stable, bulk and random subspaces.
    Restricted,
    /// Quadratic, gradient-flow, finite-difference and identity checks.
    OracleCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Jacobian => "jacobian",
            Command::Svd => "svd",
            Command::Spectrum => "spectrum",
            Command::Linesearch => "linesearch",
            Command::Behavior => "behavior",
            Command::Pfj => "pfj",
            Command::BulkSim => "bulk-sim",
            Command::Restricted => "restricted",
            Command::OracleCheck => "oracle-check",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub label: String,
    pub key: String,
    pub spec: RunSpec,
}

/// Written next to every command's outputs; holds enough to rerun it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub runs: Vec<RunRecord>,
    pub threads: usize,
    pub wall_clock_secs: f64,
    pub cache: Vec<CacheEvent>,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

impl Manifest {
    pub fn summary<S: for<'de> Deserialize<'de>>(&self) -> Result<S, serde_json::Error> {
        serde_json::from_value(self.summary.clone())
    }

    pub fn reused(&self, artifact: &str) -> bool {
        self.cache.iter().any(|e| e.artifact == artifact && e.reused)
    }
}

/// Reads a config from TOML or from the `config` field of a manifest.
pub fn load_config(path: Option<&Path>, scale: Scale) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) if p.extension().is_some_and(|e| e == "json") => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::config("config", format!("cannot read {}: {e}", p.display())))?;
            let m: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| CliError::config("config", format!("{}: {e}", p.display())))?;
            let cfg: ExperimentConfig = serde_json::from_value(m.get("config").cloned().unwrap_or(m))
                .map_err(|e| CliError::config("config", format!("{}: {e}", p.display())))?;
            cfg.validate()?;
            Ok(cfg)
        }
        _ => ExperimentConfig::load(path, scale),
    }
}

fn seeds(cfg: &ExperimentConfig) -> BTreeMap<String, u64> {
    [
        ("init", cfg.seed),
        ("shuffle", cfg.training.shuffle_seed),
        ("split", cfg.data.split_seed),
        ("noise", cfg.data.noise_seed),
        ("labels", cfg.data.label_seed),
        ("linesearch_direction", cfg.linesearch.direction_seed),
        ("behavior_sample", cfg.behavior.sample_seed),
        ("pfj_baseline", cfg.pfj.baseline_seed),
        ("second_init", cfg.bulk_sim.second_seed),
        ("bulk_sim_baseline", cfg.bulk_sim.baseline_seed),
        ("restricted_random", cfg.restricted.random_seed),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn boxed<S: Serialize>(r: Report<S>) -> Report<serde_json::Value> {
    Report {
        summary: serde_json::to_value(&r.summary).expect("summaries serialize"),
        artifacts: r.artifacts,
        runs: r.runs,
    }
}

fn oracle_check(out: &Path) -> Result<(Report<serde_json::Value>, Option<CliError>), CliError> {
    let checks = oracle::run_all().stage("oracle-check")?;
    for c in &checks {
        log::info!(
            "{:<22} {} = {:.3e} (tolerance {:.0e}, {:.2} s) {}",
            c.name,
            c.metric,
            c.value,
            c.tolerance,
            c.seconds,
            if c.passed { "ok" } else { "FAILED" }
        );
    }
    let dir = out.join("oracle-check");
    std::fs::create_dir_all(&dir).stage("oracle-check")?;
    let path = dir.join("oracle.csv");
    write_csv(&path, &checks).stage("oracle-check")?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let failure =
        (!failed.is_empty()).then(|| CliError::numeric("oracle-check", format!("failed: {}", failed.join(", "))));
    let report = Report { summary: serde_json::to_value(&checks).expect("serializes"), artifacts: vec![path], runs: vec![] };
    Ok((report, failure))
}

/// Executes one subcommand and writes its manifest.
pub fn run(cli: &Cli) -> Result<Manifest, CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("threads", "--threads must be at least 1"));
        }
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::warn!("thread pool already initialized; --threads {n} ignored");
        }
        faer::set_global_parallelism(if n == 1 { faer::Par::Seq } else { faer::Par::rayon(n) });
    }
    let config = load_config(cli.config.as_deref(), cli.scale)?;
    let started = Instant::now();
    let _lock = OutputLock::acquire(&cli.out)?;
    let name = cli.command.name();

    let (report, failure, events) = if cli.command == Command::OracleCheck {
        let (r, f) = oracle_check(&cli.out)?;
        (r, f, Vec::new())
    } else {
        let ctx = Context::new(config.clone(), cli.out.clone(), cli.verify)?;
        let report = match cli.command {
            Command::Train => boxed(commands::train(&ctx)?),
            Command::Jacobian => boxed(commands::jacobian(&ctx)?),
            Command::Svd => boxed(commands::svd_command(&ctx)?),
            Command::Spectrum => boxed(commands::spectrum(&ctx)?),
            Command::Linesearch => boxed(commands::linesearch(&ctx)?),
            Command::Behavior => boxed(commands::behavior(&ctx)?),
            Command::Pfj => boxed(commands::pfj_command(&ctx)?),
            Command::BulkSim => boxed(commands::bulk_sim(&ctx)?),
            Command::Restricted => boxed(commands::restricted(&ctx)?),
            Command::OracleCheck => unreachable!(),
        };
        (report, None, ctx.cache_events())
    };

    let dir = cli.out.join(name);
    std::fs::create_dir_all(&dir).stage(name)?;
    std::fs::write(dir.join("config.toml"), config.to_toml()).stage(name)?;
    let manifest = Manifest {
        command: name.to_string(),
        config_hash: config.hash(),
        seeds: seeds(&config),
        config,
        runs: report.runs.iter().map(|s| RunRecord { label: s.label(), key: s.key(), spec: s.clone() }).collect(),
        threads: rayon::current_num_threads(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        cache: events,
        artifacts: report.artifacts,
        summary: report.summary,
    };
    write_json(&dir.join("manifest.json"), &manifest).stage(name)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}
