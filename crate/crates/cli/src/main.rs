use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssm_surgeon::fixtures::{make_fixture, FixtureKind};
use ssm_surgeon::pipeline::{
    run_pipeline, CalibSpec, Method, RunConfig, Stage, Target, DEFAULT_ALPHA, DEFAULT_NSAMPLES,
    DEFAULT_SEQLEN,
};
use ssm_surgeon::save_checkpoint;
use ssm_surgeon::ssm_prune::{Pattern, ScoreMode};

/// Environment variable capping the worker thread count.
const THREADS_ENV: &str = "SSM_SURGEON_THREADS";

#[derive(Parser)]
#[command(name = "ssm-surgeon", version, about = "One-shot pruning for Mamba-style checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate, prune and evaluate a checkpoint.
    Prune(PruneArgs),
    /// Write a seeded desk-scale checkpoint.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// `synthetic` or a file of whitespace-separated token ids, one sequence per line.
    #[arg(long, default_value = "synthetic")]
    calib: CalibSpec,
    #[arg(long, default_value_t = DEFAULT_NSAMPLES)]
    nsamples: usize,
    #[arg(long, default_value_t = DEFAULT_SEQLEN)]
    seqlen: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    sparsity: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value = "simplified")]
    score: ScoreMode,
    /// unstructured, 2:4, 4:8 (any N:M) or column
    #[arg(long, default_value = "unstructured")]
    pattern: Pattern,
    #[arg(long, default_value = "ssm")]
    target: Target,
    #[arg(long, default_value_t = ssm_surgeon::ffn_prune::DEFAULT_BLOCKSIZE)]
    blocksize: usize,
    #[arg(long, default_value = "sparsessm")]
    method: Method,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for the pruned checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Add oracle comparisons to the report.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct FixtureArgs {
    /// `random` or `trained`
    #[arg(long, default_value = "trained")]
    kind: FixtureKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

impl From<PruneArgs> for RunConfig {
    fn from(a: PruneArgs) -> Self {
        RunConfig {
            checkpoint: a.checkpoint,
            calib: a.calib,
            nsamples: a.nsamples,
            seqlen: a.seqlen,
            seed: a.seed,
            sparsity: a.sparsity,
            alpha: a.alpha,
            score: a.score,
            pattern: a.pattern,
            target: a.target,
            blocksize: a.blocksize,
            method: a.method,
            report: a.report,
            out: a.out,
            verify: a.verify,
        }
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn prune(args: PruneArgs) -> ExitCode {
    let cfg = RunConfig::from(args);
    match run_pipeline(&cfg) {
        Ok(outcome) => {
            let r = &outcome.report;
            println!(
                "{} {} {}: {}/{} params zeroed, perplexity {:.4} -> {:.4}",
                r.method, r.target, r.pattern, r.zeroed_params, r.total_params, r.perplexity_before, r.perplexity_after
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn fixture(args: FixtureArgs) -> ExitCode {
    let written = make_fixture(args.kind, args.seed).and_then(|m| save_checkpoint(&m, &args.out));
    match written {
        Ok(()) => {
            println!("wrote {:?} fixture (seed {}) to {}", args.kind, args.seed, args.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Stage::Emit.exit_code() as u8)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(Stage::Config.exit_code() as u8);
    }
    match cli.command {
        Command::Prune(args) => prune(args),
        Command::Fixture(args) => fixture(args),
    }
}
