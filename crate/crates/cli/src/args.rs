use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use safebt_registry::Kind;

pub const DEFAULT_REGISTRY: &str = "http://127.0.0.1:8470";

#[derive(Debug, Parser)]
#[command(name = "safebt", version, about = "Run, check and exchange barrier-function safety nodes for behavior trees")]
pub struct Cli {
    /// Output format.
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Spec,
    Tree,
}

impl From<KindArg> for Kind {
    fn from(k: KindArg) -> Kind {
        match k {
            KindArg::Spec => Kind::Spec,
            KindArg::Tree => Kind::Tree,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a scenario with a behavior tree and record a trace.
    Run(RunArgs),
    /// Check a spec (or tree) document.
    Validate(ValidateArgs),
    /// Evaluate a barrier and its gradient at a state.
    Eval(EvalArgs),
    /// Publish a spec or tree document to a registry.
    Publish(PublishArgs),
    /// Fetch a document from a registry.
    Fetch(FetchArgs),
    /// List documents in a registry.
    Query(QueryArgs),
    /// Closed-loop forward-invariance check under a hostile controller.
    CheckInvariance(InvarianceArgs),
    /// Serve a registry over HTTP.
    Serve(ServeArgs),
    /// Re-verify every record in a registry store.
    Audit(AuditArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub scenario: PathBuf,
    pub tree: PathBuf,
    /// Seconds; overrides the scenario.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Tick rate in Hz; overrides the scenario.
    #[arg(long)]
    pub rate: Option<f64>,
    /// Write the trace, one JSON record per line.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write the summary table.
    #[arg(long)]
    pub summary: Option<PathBuf>,
    /// Disable the safety filter.
    #[arg(long)]
    pub no_filter: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Safety configuration; overrides the scenario's.
    #[arg(long)]
    pub safety: Option<PathBuf>,
    /// Additional spec documents available to the tree.
    #[arg(long = "spec")]
    pub specs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    pub path: PathBuf,
    #[arg(long, value_enum, default_value_t = KindArg::Spec)]
    pub kind: KindArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub spec: PathBuf,
    /// State, comma separated.
    #[arg(long, allow_hyphen_values = true)]
    pub x: String,
    /// Parameter overrides `name=value`, comma separated or repeated.
    #[arg(long, allow_hyphen_values = true)]
    pub params: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RegistryArg {
    /// Registry base URL.
    #[arg(long, env = "SAFEBT_REGISTRY", default_value = DEFAULT_REGISTRY)]
    pub registry: String,
}

#[derive(Debug, Args)]
pub struct PublishArgs {
    pub path: PathBuf,
    #[command(flatten)]
    pub registry: RegistryArg,
    #[arg(long, value_enum, default_value_t = KindArg::Spec)]
    pub kind: KindArg,
    /// Record name for trees (default: root node name).
    #[arg(long)]
    pub name: Option<String>,
    /// Record version for trees; specs carry their own.
    #[arg(long)]
    pub version: Option<String>,
    #[arg(long, env = "SAFEBT_PUBLISHER", default_value = "")]
    pub publisher: String,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// `name@version`.
    pub reference: String,
    #[command(flatten)]
    pub registry: RegistryArg,
    #[arg(long, value_enum, default_value_t = KindArg::Spec)]
    pub kind: KindArg,
    /// Output file; stdout when omitted.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    pub registry: RegistryArg,
    #[arg(long, value_enum, default_value_t = KindArg::Spec)]
    pub kind: KindArg,
    #[arg(long)]
    pub prefix: Option<String>,
    #[arg(long)]
    pub tag: Option<String>,
}

#[derive(Debug, Args)]
pub struct InvarianceArgs {
    pub spec: PathBuf,
    /// `single-integrator[:M]`, the first M states actuated.
    #[arg(long, default_value = "single-integrator")]
    pub plant: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Seconds per trial.
    #[arg(long, default_value_t = 30.0)]
    pub duration: f64,
    /// Control rate in Hz.
    #[arg(long, default_value_t = 100.0)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Magnitude of the hostile nominal command.
    #[arg(long, default_value_t = 1.0)]
    pub speed: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub params: Vec<String>,
    /// Diagnostic: run the hostile controller unfiltered.
    #[arg(long)]
    pub no_filter: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SAFEBT_LISTEN", default_value = "127.0.0.1:8470")]
    pub listen: SocketAddr,
    #[arg(long, env = "SAFEBT_STORE", default_value = "registry-data")]
    pub store: PathBuf,
}

#[derive(Debug, Args)]
pub struct AuditArgs {
    #[arg(long, env = "SAFEBT_STORE", default_value = "registry-data")]
    pub store: PathBuf,
}
