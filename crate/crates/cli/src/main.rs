use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use eventful::archive::TensorArchive;
use eventful::cost::{count_block_baseline, count_block_eventful, count_qk_nonoverlap, memory_report, savings_ratio, BlockShape};
use eventful::equiv::run_suite;
use eventful::harness::{measure_walltime, run_pair, run_pair_on, sweep_budget, write_rows_csv, RunConfig};
use eventful::stream::{export_stream, gen_stream, import_stream};
use eventful::{Mode, ModelWeights};

#[derive(Parser)]
#[command(name = "eventful", version, about = "Eventful transformer streams: runs, sweeps, checks and cost reports")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the dense oracle and the eventful model on one stream.
    Run(RunArgs),
    /// Sweep the top-r budget; one fresh run per budget and seed.
    Sweep(SweepArgs),
    /// Full-budget and incremental-state self-checks. Exits non-zero on failure.
    Equiv(EquivArgs),
    /// Closed-form operation and memory counts for one block.
    Count(CountArgs),
    /// Median per-frame wall time of the dense and eventful variants.
    Time(TimeArgs),
    /// Write the model weights described by a config as a tensor archive.
    ExportWeights(ExportArgs),
    /// Write the stream described by a config as a tensor archive.
    ExportStream(ExportArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// JSON run configuration.
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Per-frame CSV destination (stdout when omitted).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON summary destination (stderr when omitted).
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Load weights from an archive instead of sampling them.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Load frames from an archive instead of generating them.
    #[arg(long)]
    stream_fixture: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Budgets to evaluate.
    #[arg(short, long, value_delimiter = ',', required = true)]
    r: Vec<usize>,
    /// Seeds per budget (model and stream seeds are shifted together).
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances for the product-update checks.
    #[arg(long, default_value_t = 200)]
    instances: usize,
}

#[derive(Args)]
struct CountArgs {
    #[arg(short = 'n', long)]
    tokens: usize,
    /// Tokens selected by each gate.
    #[arg(short, long)]
    m: usize,
    #[arg(short, long)]
    dim: usize,
    #[arg(long)]
    heads: usize,
    #[arg(long, default_value_t = 4)]
    mlp_ratio: usize,
    /// full, tokenwise_only or stgt.
    #[arg(long, default_value = "full")]
    mode: Mode,
    #[arg(long, default_value_t = 4)]
    bytes_per_element: usize,
}

#[derive(Args)]
struct TimeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 3)]
    repetitions: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Archive directory.
    #[arg(short, long)]
    out: PathBuf,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn load(args: &ConfigArg) -> Result<RunConfig> {
    RunConfig::load(&args.config).with_context(|| format!("reading config {}", args.config.display()))
}

fn run(args: RunArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    let report = if args.weights.is_none() && args.stream_fixture.is_none() {
        run_pair(&cfg)?
    } else {
        let weights = match &args.weights {
            Some(dir) => ModelWeights::from_archive(&TensorArchive::read(dir)?)
                .with_context(|| format!("loading weights from {}", dir.display()))?,
            None => ModelWeights::random(&cfg.model)?,
        };
        let frames = match &args.stream_fixture {
            Some(dir) => import_stream(dir).with_context(|| format!("loading frames from {}", dir.display()))?,
            None => gen_stream(&cfg.stream, cfg.model.tokens, cfg.model.dim)?,
        };
        run_pair_on(&cfg, &weights, &frames)?
    };
    report.write_csv(output(args.csv.as_deref())?)?;
    let summary = report.summary_json()?;
    match &args.summary {
        Some(p) => std::fs::write(p, summary + "\n")?,
        None => eprintln!("{summary}"),
    }
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    let rows = sweep_budget(&cfg, &args.r, args.seeds)?;
    write_rows_csv(&rows, output(args.out.as_deref())?)?;
    Ok(())
}

fn equiv(args: EquivArgs) -> Result<bool> {
    let results = run_suite(args.seed, args.instances)?;
    let mut ok = true;
    for r in &results {
        println!(
            "{} {} (worst {:.3e}, tolerance {:.0e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.tolerance
        );
        ok &= r.passed;
    }
    Ok(ok)
}

fn count(args: CountArgs) -> Result<()> {
    if matches!(args.mode, Mode::SpatialPool(_)) {
        bail!("spatial pooling has no closed-form count; use `run` for measured costs");
    }
    let shape = BlockShape::new(args.tokens, args.dim, args.heads, args.mlp_ratio)?;
    let base = count_block_baseline(shape);
    let ev = count_block_eventful(shape, args.m, args.mode)?;
    let mem = memory_report(args.tokens, args.dim, args.heads, args.bytes_per_element)?;
    let report = json!({
        "shape": {"N": args.tokens, "M": args.m, "D": args.dim, "H": args.heads, "mlp_ratio": args.mlp_ratio},
        "mode": args.mode.to_string(),
        "baseline": base,
        "eventful": ev,
        "qk_nonoverlap": count_qk_nonoverlap(args.tokens, args.m, args.dim),
        "savings_ratio_total": savings_ratio(base.total() as f64, ev.total() as f64).ok(),
        "savings_ratio_products": savings_ratio(base.products() as f64, ev.products() as f64).ok(),
        "memory": mem,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn time(args: TimeArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    let rows = measure_walltime(&cfg, args.repetitions)?;
    write_rows_csv(&rows, output(args.out.as_deref())?)?;
    Ok(())
}

fn export_weights(args: ExportArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    ModelWeights::random(&cfg.model)?.to_archive().write(&args.out)?;
    Ok(())
}

fn export_frames(args: ExportArgs) -> Result<()> {
    let cfg = load(&args.config)?;
    export_stream(&gen_stream(&cfg.stream, cfg.model.tokens, cfg.model.dim)?, &args.out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a).map(|_| true),
        Command::Sweep(a) => sweep(a).map(|_| true),
        Command::Equiv(a) => equiv(a),
        Command::Count(a) => count(a).map(|_| true),
        Command::Time(a) => time(a).map(|_| true),
        Command::ExportWeights(a) => export_weights(a).map(|_| true),
        Command::ExportStream(a) => export_frames(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
