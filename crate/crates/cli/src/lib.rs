//! Library side of the `cwcl` binary. Each verb is a plain function so the
//! integration tests can drive it without spawning processes.

pub mod commands;
pub mod compare;
pub mod gradcheck;
pub mod run;

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand};
use cwcl_core::CwclError;

pub use run::{dataset_hash, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// A failure that should exit with the numerical-failure code.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

/// Maps an error to the process exit code: 2 for divergence, non-finite
/// values and failed gradient checks, 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<NumericalFailure>() {
            return EXIT_NUMERICAL;
        }
        if let Some(e) = cause.downcast_ref::<CwclError>() {
            if matches!(e, CwclError::Divergence { .. } | CwclError::NonFinite(_)) {
                return EXIT_NUMERICAL;
            }
        }
    }
    EXIT_VALIDATION
}

#[derive(Debug, Parser)]
#[command(name = "cwcl", version, about = "Cross-modal contrastive training lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train an encoder stack on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Check analytic loss gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train two configs over several seeds and tabulate the paired results.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    /// JSON dataset spec; defaults apply to omitted keys.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into an existing, non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// JSON training config.
    #[arg(long, required_unless_present = "from_manifest", conflicts_with = "from_manifest")]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Replay the run recorded in a previous run manifest.
    #[arg(long)]
    pub from_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
#[command(group(
    ArgGroup::new("task")
        .required(true)
        .multiple(true)
        .args(["classify", "retrieval", "align_matrix", "template_sweep"])
))]
pub struct EvalArgs {
    /// Checkpoint directory, or a run directory containing `checkpoint/`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Zero-shot classification accuracy.
    #[arg(long)]
    pub classify: bool,
    /// Paired retrieval recall in both directions.
    #[arg(long)]
    pub retrieval: bool,
    /// Class-sorted alignment matrix and block contrast.
    #[arg(long)]
    pub align_matrix: bool,
    /// Template counts to sweep, e.g. `1,5,10`.
    #[arg(long, value_delimiter = ',')]
    pub template_sweep: Option<Vec<usize>>,
    /// Cut-offs for `--retrieval`.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    pub recall_k: Vec<usize>,
    /// Override the class-embedding mode stored in the run config.
    #[arg(long, value_parser = parse_class_mode)]
    pub class_embedding: Option<cwcl_core::zeroshot::ClassEmbeddingMode>,
}

fn parse_class_mode(s: &str) -> Result<cwcl_core::zeroshot::ClassEmbeddingMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("expected normalize_then_average or average_raw, got {s}"))
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// Number of random configurations.
    #[arg(long, default_value_t = 100)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Write the full report as JSON to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
    /// Perturb one analytic gradient entry; for testing the checker itself.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub config_a: PathBuf,
    #[arg(long)]
    pub config_b: PathBuf,
    /// Seeds to train each config with.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
    /// Top-level config fields the two configs may differ in.
    #[arg(long, value_delimiter = ',')]
    pub vary: Vec<String>,
}

/// Runs one parsed command line. `argv` is recorded in run manifests.
pub fn run(cli: &Cli, argv: &[String]) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenData(a) => commands::gen_data(a).map(|_| ()),
        Command::Train(a) => commands::train(a, argv).map(|_| ()),
        Command::Eval(a) => commands::eval(a, argv),
        Command::Gradcheck(a) => gradcheck::cmd_gradcheck(a).map(|_| ()),
        Command::Compare(a) => compare::cmd_compare(a, argv).map(|_| ()),
    }
}
