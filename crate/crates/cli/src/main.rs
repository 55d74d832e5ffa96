//! `amkit`: experiment runner for the associative memory toolkit.
//!
//! Every run writes its CSV/JSON artifacts, `manifest.json` and a re-runnable
//! `run.conf` under `--out`. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or validation error, 3 failed check under `--assert`.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use amkit::AmError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use config::{resolve, ResolveError, Resolved};
use output::OutDir;

#[derive(Parser, Debug, Clone)]
#[command(
    name = "amkit",
    version,
    about = "Dense associative memory experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Cmd {
    /// Recall of corrupted binary memories under asynchronous updates
    Retrieve(RetrieveArgs),
    /// Monte Carlo K_max sweep over D with a log-log scaling fit
    Capacity(CapacityArgs),
    /// Empirical crosstalk noise variance against (2n-3)!! K D^(n-1)
    Scaling(ScalingArgs),
    /// Token dynamics of a random energy transformer block
    EtDemo(EtDemoArgs),
    /// Energy of a 2-D point-cloud memory on a grid
    Landscape(LandscapeArgs),
    /// Local minima and phase classification over a list of beta values
    Phases(PhasesArgs),
    /// Clustering by unrolled associative memory dynamics, against Lloyd
    Cluster(ClusterArgs),
    /// Retrieval through a random-feature sketch of the memories
    Distributed(DistributedArgs),
    /// Kernel moments, efficiency and optimal bandwidth table
    KernelTable(KernelTableArgs),
    /// Analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Output directory
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// key=value file; flags override it, it overrides defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads (falls back to AMKIT_THREADS)
    #[arg(long)]
    pub threads: Option<usize>,
    /// Exit with code 3 when a check fails
    #[arg(long)]
    pub assert: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Model {
    Power,
    Exp,
}

#[derive(Args, Debug, Clone)]
pub struct RetrieveArgs {
    #[arg(long, value_enum, default_value_t = Model::Exp)]
    pub model: Model,
    /// Exponent of the power model
    #[arg(long, default_value_t = 2)]
    pub n: u32,
    #[arg(long = "D", default_value_t = 24)]
    pub d: usize,
    #[arg(long = "K", default_value_t = 2000)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub flips: usize,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 50)]
    pub max_sweeps: usize,
    /// Required exact-recovery rate for the check
    #[arg(long, default_value_t = 0.99)]
    pub min_success: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct CapacityArgs {
    #[arg(long, value_enum, default_value_t = Model::Power)]
    pub model: Model,
    #[arg(long, default_value_t = 2)]
    pub n: u32,
    #[arg(long, value_delimiter = ',', default_value = "100,200,400")]
    pub dims: Vec<usize>,
    /// Per-spin flip rate defining successful storage
    #[arg(long, default_value_t = 0.01)]
    pub target: f64,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 1 << 20)]
    pub k_limit: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct ScalingArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,3")]
    pub ns: Vec<u32>,
    #[arg(long = "D", default_value_t = 64)]
    pub d: usize,
    #[arg(long = "K", default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    /// Allowed relative deviation from the closed form
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct EtDemoArgs {
    #[arg(long, default_value_t = 6)]
    pub tokens: usize,
    /// Token dimension
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Key/query dimension per head
    #[arg(long = "Y", default_value_t = 4)]
    pub y: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Hopfield memories
    #[arg(long, default_value_t = 10)]
    pub memories: usize,
    #[arg(long, default_value_t = 0.5)]
    pub beta: f64,
    /// Standard deviation of the random weights
    #[arg(long, default_value_t = 0.3)]
    pub scale: f64,
    #[arg(long, default_value_t = 0.05)]
    pub dt: f64,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long)]
    pub backtracking: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dataset {
    /// K points on the unit circle
    Circle,
    /// The two points (1, 0) and (-1, 0)
    Pair,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum LandscapeEnergy {
    /// -(1/beta) log (1/K) sum exp(-beta |x - xi|^2)
    Am,
    /// -2 sigma^2 t log sum exp(-|x - xi|^2 / (2 sigma^2 t))
    Diffusion,
}

#[derive(Args, Debug, Clone)]
pub struct LandscapeArgs {
    #[arg(long, value_enum, default_value_t = LandscapeEnergy::Am)]
    pub energy: LandscapeEnergy,
    #[arg(long, value_enum, default_value_t = Dataset::Circle)]
    pub data: Dataset,
    #[arg(long = "K", default_value_t = 1000)]
    pub k: usize,
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.05)]
    pub t: f64,
    /// Grid points per side
    #[arg(long, default_value_t = 101)]
    pub grid: usize,
    /// Half width of the square region
    #[arg(long, default_value_t = 1.5)]
    pub half: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct PhasesArgs {
    #[arg(long, value_enum, default_value_t = Dataset::Pair)]
    pub data: Dataset,
    #[arg(long = "K", default_value_t = 1000)]
    pub k: usize,
    #[arg(long, value_delimiter = ',', default_value = "0.25,5")]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 21)]
    pub grid: usize,
    #[arg(long, default_value_t = 1.5)]
    pub half: f64,
    #[arg(long, default_value_t = 0.2)]
    pub eta: f64,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-7)]
    pub tol: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eps_mem: f64,
    #[arg(long, default_value_t = 0.05)]
    pub eps_gen: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct ClusterArgs {
    /// CSV with one point per line; synthetic blobs when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Points per synthetic blob
    #[arg(long, default_value_t = 100)]
    pub blob_size: usize,
    /// Synthetic blob centers sit on a circle of this radius
    #[arg(long, default_value_t = 4.0)]
    pub spread: f64,
    #[arg(long, default_value_t = 0.5)]
    pub blob_sd: f64,
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.125)]
    pub eta: f64,
    /// Unrolled steps
    #[arg(long = "T", default_value_t = 10)]
    pub t: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.99)]
    pub decay: f64,
    /// Train on randomly clamped coordinates with this keep probability
    #[arg(long)]
    pub keep_prob: Option<f64>,
    /// Lloyd restarts for the baseline
    #[arg(long, default_value_t = 10)]
    pub restarts: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Interleaved cos/sin pairs
    Pair,
    /// Cosines with random phases
    Phase,
}

#[derive(Args, Debug, Clone)]
pub struct DistributedArgs {
    #[arg(long = "K", default_value_t = 10)]
    pub k: usize,
    #[arg(long = "D", default_value_t = 16)]
    pub d: usize,
    /// Random features
    #[arg(long = "Y", default_value_t = 8192)]
    pub y: usize,
    #[arg(long, value_enum, default_value_t = Variant::Pair)]
    pub variant: Variant,
    #[arg(long, default_value_t = 4.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub radius: f64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.9)]
    pub min_success: f64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct KernelTableArgs {
    /// Curvature functional of the density; standard normal when absent
    #[arg(long)]
    pub curvature: Option<f64>,
    /// Sample count for the optimal bandwidth
    #[arg(long = "K", default_value_t = 1000)]
    pub k: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// One of exercise, lse, lsr, chn, attention, hopfield, diffusion,
    /// distributed, clam, or all
    #[arg(long, default_value = "all")]
    pub family: String,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub max_error: f64,
    #[command(flatten)]
    pub common: Common,
}

impl Cmd {
    fn common(&self) -> &Common {
        match self {
            Cmd::Retrieve(a) => &a.common,
            Cmd::Capacity(a) => &a.common,
            Cmd::Scaling(a) => &a.common,
            Cmd::EtDemo(a) => &a.common,
            Cmd::Landscape(a) => &a.common,
            Cmd::Phases(a) => &a.common,
            Cmd::Cluster(a) => &a.common,
            Cmd::Distributed(a) => &a.common,
            Cmd::KernelTable(a) => &a.common,
            Cmd::Gradcheck(a) => &a.common,
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<AmError> for Failure {
    fn from(e: AmError) -> Self {
        match e {
            AmError::Io(_) | AmError::Diverged(_) | AmError::NonFinite(_) => {
                Failure::Runtime(e.to_string())
            }
            _ => Failure::Usage(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    config: serde_json::Map<String, serde_json::Value>,
    rerun: Vec<String>,
    outputs: Vec<String>,
    checks: &'a [Check],
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("AMKIT_THREADS") {
        Ok(s) if !s.trim().is_empty() => s.trim().parse().map(Some).map_err(|_| {
            Failure::Usage(format!("AMKIT_THREADS must be a thread count, got '{s}'"))
        }),
        _ => Ok(None),
    }
}

fn run(resolved: &Resolved) -> Result<bool, Failure> {
    let common = resolved.cli.command.common();
    if let Some(n) = thread_count(common.threads)? {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    let mut out = OutDir::create(&common.out)?;
    let checks = commands::dispatch(&resolved.cli.command, &mut out)?;
    for c in &checks {
        println!(
            "check {}: {} {}",
            c.name,
            if c.pass { "PASS" } else { "FAIL" },
            c.detail
        );
    }
    out.text("run.conf", &resolved.run_conf())?;
    let config = resolved
        .entries
        .iter()
        .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
        .collect();
    let mut outputs = out.written().to_vec();
    outputs.push("manifest.json".into());
    let manifest = Manifest {
        tool: "amkit",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: &resolved.subcommand,
        config,
        rerun: resolved.rerun_argv(),
        outputs,
        checks: &checks,
    };
    out.json("manifest.json", &manifest)?;
    Ok(checks.iter().all(|c| c.pass) || !common.assert)
}

fn main() -> ExitCode {
    let resolved = match resolve(std::env::args_os()) {
        Ok(r) => r,
        Err(ResolveError::Clap(e)) => e.exit(),
        Err(ResolveError::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    match run(&resolved) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: at least one check failed");
            ExitCode::from(3)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
