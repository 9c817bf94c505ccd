//! Stage-wise command-line driver for the benchmark pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 prerequisite error,
//! 4 backend exhaustion, 1 anything else.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use vqabench_core::pipeline::{self, PipelineError, Protocol, RunContext, Stage};
use vqabench_core::runstore::{RunConfig, RunStore};
use vqabench_core::UserInput;

#[derive(Parser)]
#[command(
    name = "vqabench",
    version,
    about = "Synthesize, validate, and score visual question answering benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run directory from a config file (or the built-in mock config).
    Init(InitArgs),
    /// Build the aspect tree.
    Aspects(StageArgs),
    /// Generate diversity-constrained image descriptions.
    Describe(StageArgs),
    /// Generate and self-validate images.
    Imagine(StageArgs),
    /// Generate, adjust, and position test cases.
    Questions(StageArgs),
    /// Run candidates over the test cases and judge their responses.
    Evaluate(EvaluateArgs),
    /// Emit the report tables.
    Report(StageArgs),
    /// Run every remaining stage in order.
    All(StageArgs),
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Run configuration JSON; omit with --mock for the stock mock config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Serve every backend from the seeded deterministic mock.
    #[arg(long)]
    mock: bool,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Capability area for the stock config (basic, spatial, semantic,
    /// reasoning, atmospheric).
    #[arg(long, default_value = "basic")]
    user_input: String,
    /// Disable error-driven option adjustment.
    #[arg(long)]
    no_adjust: bool,
    /// Send every response to the judge, even parseable ones.
    #[arg(long)]
    judge_always: bool,
}

#[derive(Args)]
struct StageArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Worker threads for intra-stage parallelism.
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    /// Run only the answer-leakage protocol (no image payloads).
    #[arg(long, conflicts_with = "all_a")]
    no_image: bool,
    /// Run only the position-bias protocol (all-A case layout).
    #[arg(long)]
    all_a: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Init(args) => init(args),
        Command::Aspects(args) => stage(args, Stage::Aspects),
        Command::Describe(args) => stage(args, Stage::Descriptions),
        Command::Imagine(args) => stage(args, Stage::Images),
        Command::Questions(args) => stage(args, Stage::Testcases),
        Command::Evaluate(args) => evaluate(args),
        Command::Report(args) => stage(args, Stage::Reports),
        Command::All(args) => all(args),
    }
}

fn init(args: InitArgs) -> Result<(), PipelineError> {
    let mut config = match &args.config {
        Some(path) => {
            let bytes = std::fs::read(path).map_err(vqabench_core::runstore::StoreError::Io)?;
            serde_json::from_slice::<RunConfig>(&bytes).map_err(|e| {
                PipelineError::ConfigConflict(format!("cannot parse {}: {e}", path.display()))
            })?
        }
        None => {
            if !args.mock {
                return Err(PipelineError::ConfigConflict(
                    "no --config given; pass one or use --mock for the stock mock configuration"
                        .into(),
                ));
            }
            let user_input = UserInput::standard(&args.user_input).ok_or_else(|| {
                PipelineError::ConfigConflict(format!(
                    "unknown stock user input `{}` (expected basic, spatial, semantic, reasoning, atmospheric)",
                    args.user_input
                ))
            })?;
            RunConfig::default_mock(user_input, args.seed.unwrap_or(7))
        }
    };
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if args.mock {
        config.switches.mock = true;
    }
    if args.no_adjust {
        config.switches.adjust_options = false;
    }
    if args.judge_always {
        config.switches.judge_always = true;
    }
    let store = RunStore::init(&args.run_dir, &config)?;
    let manifest = store.load_manifest()?;
    println!(
        "initialized {} (config hash {}, expecting {} test cases)",
        args.run_dir.display(),
        &manifest.config_hash[..12],
        manifest.expected_cases
    );
    Ok(())
}

fn stage(args: StageArgs, stage: Stage) -> Result<(), PipelineError> {
    let ctx = RunContext::open(&args.run_dir, args.parallelism)?;
    let summary = pipeline::run_stage(&ctx, stage)?;
    println!("{summary}");
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), PipelineError> {
    let mut ctx = RunContext::open(&args.run_dir, args.parallelism)?;
    ctx.protocol_filter = if args.no_image {
        Some(Protocol::NoImage)
    } else if args.all_a {
        Some(Protocol::AllA)
    } else {
        None
    };
    let summary = pipeline::run_stage(&ctx, Stage::Responses)?;
    println!("{summary}");
    Ok(())
}

fn all(args: StageArgs) -> Result<(), PipelineError> {
    let ctx = RunContext::open(&args.run_dir, args.parallelism)?;
    for summary in pipeline::run_all(&ctx)? {
        println!("{summary}");
    }
    Ok(())
}
