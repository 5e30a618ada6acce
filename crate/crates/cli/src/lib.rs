//! Config-driven experiments on nonlinear Markov processes.
//!
//! Every subcommand reads one experiment config, writes its artifacts to the
//! output directory as `<command>.<kind>.{json,csv}` and finishes with a
//! `<command>.manifest.json` listing the artifact hashes.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use clap::{Parser, Subcommand, ValueEnum};
use nlmarkov_core::models::build_model;

use artifacts::{canonical_json, sha256_hex, ArtifactWriter, RunManifest};
use config::ExperimentConfig;

/// How a run ended when it did not hit an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    /// The analysis completed and its verdict was negative.
    VerdictFailure,
}

impl Outcome {
    pub fn exit_code(self) -> i32 {
        match self {
            Outcome::Success => 0,
            Outcome::VerdictFailure => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ToleranceProfile {
    /// Analytic gradients where the candidate provides them.
    Strict,
    /// Central-difference gradients everywhere.
    Fd,
}

impl ToleranceProfile {
    fn name(self) -> &'static str {
        match self {
            ToleranceProfile::Strict => "strict",
            ToleranceProfile::Fd => "fd",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "nlmarkov",
    version,
    about = "Lyapunov, large-deviation and finite-N experiments for nonlinear Markov processes"
)]
pub struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "strict")]
    pub tolerance_profile: ToleranceProfile,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Integrate the forward equation from one initial point.
    SimulateOde,
    /// Multistart fixed-point search with stability classification.
    FixedPoints,
    /// Stationary law of Γ(r) on a grid or at listed points.
    Stationary,
    /// Check that a candidate decreases along trajectories.
    Descent,
    /// Evaluate 𝐇(r, -∇J(r)) on an interior grid.
    CheckSubsolution,
    /// Legendre duality checks between 𝐇 and 𝐋.
    Duality,
    /// Concavity of ρ ↦ 𝐇(r, α + ρw) on random lines.
    Concavity,
    /// Closedness test of the log-ratio form.
    PotentialTest,
    /// λ bounds for the slowly adapting family and grid descent checks.
    SlowAdaptation,
    /// Exact law of the N-particle empirical measure.
    FiniteN,
    /// Gillespie replicas against the ODE solution.
    Particles,
    /// Values of a candidate on a fine grid.
    Landscape,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SimulateOde => "simulate-ode",
            Command::FixedPoints => "fixed-points",
            Command::Stationary => "stationary",
            Command::Descent => "descent",
            Command::CheckSubsolution => "check-subsolution",
            Command::Duality => "duality",
            Command::Concavity => "concavity",
            Command::PotentialTest => "potential-test",
            Command::SlowAdaptation => "slow-adaptation",
            Command::FiniteN => "finite-n",
            Command::Particles => "particles",
            Command::Landscape => "landscape",
        }
    }
}

/// Runs one subcommand end to end and writes its manifest.
pub fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let started = Instant::now();
    let started_unix_seconds = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let path = cli.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let jobs = match cli.jobs {
        Some(0) => anyhow::bail!("--jobs must be at least 1"),
        Some(j) => j,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let model = build_model(&cfg.model).context("building the model")?;
    let command = cli.command.name();
    log::info!(
        "{command}: model {} (d = {}), seed {}",
        model.label(),
        model.dim(),
        cfg.seed
    );

    let mut out = ArtifactWriter::new(&cli.out, command)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?;
    let outcome = {
        let mut ctx = commands::Context {
            cfg: &cfg,
            model,
            seed: cfg.seed,
            profile: cli.tolerance_profile,
            out: &mut out,
        };
        pool.install(|| match cli.command {
            Command::SimulateOde => commands::simulate_ode(&mut ctx),
            Command::FixedPoints => commands::fixed_points(&mut ctx),
            Command::Stationary => commands::stationary(&mut ctx),
            Command::Descent => commands::descent(&mut ctx),
            Command::CheckSubsolution => commands::check_subsolution(&mut ctx),
            Command::Duality => commands::duality(&mut ctx),
            Command::Concavity => commands::concavity(&mut ctx),
            Command::PotentialTest => commands::potential_test(&mut ctx),
            Command::SlowAdaptation => commands::slow_adaptation(&mut ctx),
            Command::FiniteN => commands::finite_n(&mut ctx),
            Command::Particles => commands::particles(&mut ctx),
            Command::Landscape => commands::landscape(&mut ctx),
        })?
    };

    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config_sha256: sha256_hex(canonical_json(&cfg)?.as_bytes()),
        seed: cfg.seed,
        jobs,
        tolerance_profile: cli.tolerance_profile.name().into(),
        exit_code: outcome.exit_code(),
        started_unix_seconds,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        artifacts: out.records().to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    let mpath = cli.out.join(format!("{command}.manifest.json"));
    std::fs::write(&mpath, text).with_context(|| format!("writing {}", mpath.display()))?;
    Ok(outcome)
}
