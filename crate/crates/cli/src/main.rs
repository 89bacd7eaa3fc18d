// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod error;
mod inspect;

use config::{Layer, OutputFormat};
use error::{exit, CliResult};

/// Keypoint matching with learned geometric verification for nonrigid
/// cross-modal registration.
#[derive(Parser, Debug)]
#[command(name = "neurmatch", disable_version_flag = true, arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// Print the version and every file schema version
    #[arg(short = 'V', long)]
    version: bool,

    /// TOML configuration file
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Master seed; every random stream derives from it
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (0 = all cores, 1 = timing-authoritative)
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Output format for reports written to stdout
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,

    /// Override any config key, e.g. `--set verify.min_coverage=12`
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// More log output (repeatable)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    /// Only log warnings and errors
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic matching tasks
    #[command(subcommand)]
    Gen(GenCommand),
    /// Train the fusion net or the subset classifier
    #[command(subcommand)]
    Train(TrainCommand),
    /// Build the initial match set between two descriptor files
    Match(MatchArgs),
    /// Filter an initial match set
    Verify(VerifyArgs),
    /// Evaluate methods on saved tasks
    Eval(EvalArgs),
    /// Train on a standard suite and benchmark every method
    Bench(BenchArgs),
    /// Validate any file this tool writes and dump it as JSON
    Inspect(InspectArgs),
    /// Print the resolved configuration
    Config,
}

#[derive(Subcommand, Debug)]
pub enum GenCommand {
    /// Single-modality pairs (an image and its deformed copy)
    Pretrain {
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[command(flatten)]
        out: GenOutput,
    },
    /// Two-modality pairs, each expanded by rotations and contrast variants
    Crossmodal {
        #[arg(long, default_value_t = 12)]
        pairs: usize,
        /// Augmented tasks per pair: rotations × contrast variants
        #[arg(long)]
        aug: Option<usize>,
        #[command(flatten)]
        out: GenOutput,
    },
}

#[derive(Args, Debug)]
pub struct GenOutput {
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Also write 16-bit PNG images of both sides
    #[arg(long)]
    pub keep_images: bool,
}

#[derive(Subcommand, Debug)]
pub enum TrainCommand {
    /// Train the descriptor fusion net on cross-modal tasks
    Fusion {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metrics JSON (default: <out> with extension .metrics.json)
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Train the subset classifier
    Gccm(TrainGccmArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Args, Debug)]
pub struct TrainGccmArgs {
    #[arg(long, value_enum)]
    pub stage: Stage,
    /// Pretrained model to continue from (finetune only)
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Saved tasks; without it tasks are generated in memory
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    /// In-memory pretrain tasks
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    /// In-memory cross-modal base pairs for fine-tuning
    #[arg(long, default_value_t = 12)]
    pub pairs: usize,
    /// Samples per class (default from config)
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics JSON (default: <out> with extension .metrics.json)
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MatchArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fuse local and semantic descriptors with this model first
    #[arg(long)]
    pub fusion: Option<PathBuf>,
    /// Feature map to sample semantic descriptors from, side A
    #[arg(long, requires = "feature_map_b")]
    pub feature_map_a: Option<PathBuf>,
    /// Feature map to sample semantic descriptors from, side B
    #[arg(long, requires = "feature_map_a")]
    pub feature_map_b: Option<PathBuf>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub min_score: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Verifier {
    Gccm,
    Ransac,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Initial match set from `match`
    #[arg(long)]
    pub matches: PathBuf,
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Verifier::Gccm)]
    pub method: Verifier,
    /// Subset classifier (gccm only)
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Image side in pixels for coordinate scaling; default from keypoint extent
    #[arg(long)]
    pub image_size: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub tasks: PathBuf,
    #[arg(long)]
    pub fusion: Option<PathBuf>,
    #[arg(long)]
    pub gccm: Option<PathBuf>,
    /// Comma-separated method tags; default: every method the models allow
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Report JSON
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Wall times JSON
    #[arg(long)]
    pub timing: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// default, nonrigid or smoke
    #[arg(long, default_value = "default")]
    pub suite: String,
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Directory for report.json, timing.json, training.json and models
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub file: PathBuf,
    /// Omit bulk arrays
    #[arg(long)]
    pub summary: bool,
}

fn init_logging(g: &GlobalArgs) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn print_version() {
    println!("neurmatch {}", env!("CARGO_PKG_VERSION"));
    println!("file formats:");
    for (name, v) in inspect::format_versions() {
        println!("  {name:<20} v{v}");
    }
}

/// Flag values become the highest-precedence config layer.
fn flag_layer(g: &GlobalArgs) -> CliResult<Layer> {
    let mut layer = Layer::new("flags");
    if let Some(seed) = g.seed {
        layer.set("seed", toml::Value::Integer(seed as i64))?;
    }
    if let Some(w) = g.workers {
        layer.set("workers", toml::Value::Integer(w as i64))?;
    }
    if let Some(f) = g.format {
        let name = f
            .to_possible_value()
            .map(|v| v.get_name().to_string())
            .unwrap_or_default();
        layer.set("format", toml::Value::String(name))?;
    }
    for o in &g.overrides {
        layer.set_assignment(o)?;
    }
    Ok(layer)
}

fn run(cli: Cli) -> CliResult<()> {
    let mut layers = vec![Layer::from_env(std::env::vars())?];
    if let Some(path) = &cli.global.config {
        layers.push(Layer::from_file(path)?);
    }
    layers.push(flag_layer(&cli.global)?);
    let cfg = config::resolve(&layers)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| error::usage(format!("cannot start {} workers: {e}", cfg.workers)))?;
    }
    match cli.command {
        None => Err(error::usage("no command given")),
        Some(Command::Gen(c)) => commands::gen(&cfg, c),
        Some(Command::Train(c)) => commands::train(&cfg, c),
        Some(Command::Match(a)) => commands::match_cmd(&cfg, a),
        Some(Command::Verify(a)) => commands::verify(&cfg, a),
        Some(Command::Eval(a)) => commands::eval(&cfg, a),
        Some(Command::Bench(a)) => commands::bench(&cfg, a),
        Some(Command::Inspect(a)) => commands::inspect(a),
        Some(Command::Config) => commands::print_config(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.global.version {
        print_version();
        return ExitCode::SUCCESS;
    }
    init_logging(&cli.global);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            let code = e.exit_code();
            debug_assert_ne!(code, exit::OK);
            ExitCode::from(code as u8)
        }
    }
}
