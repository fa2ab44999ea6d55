//! `ken`: prune, store, inject, visualize and benchmark KDE-selected
//! subnetworks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ken_core::pruner::LayerRange;

mod commands;

#[derive(Debug, Parser)]
#[command(
    name = "ken",
    version,
    about = "Row-wise KDE parameter selection for fine-tuned models"
)]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "KEN_THREADS", default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Select k entries per row, write the delta and print reset statistics.
    Prune(PruneArgs),
    /// Rebuild the optimized snapshot from a pre-trained snapshot and a delta.
    Inject(InjectArgs),
    /// Render PGM views of the retained entries.
    Viz(VizArgs),
    /// Compare KDE against random selection on the synthetic reference task.
    Bench(BenchArgs),
    /// Print delta contents and storage figures.
    Stats(StatsArgs),
    /// Cross-check the KDE ranker against a brute-force implementation.
    Selftest(SelftestArgs),
}

#[derive(Debug, Args)]
struct PruneArgs {
    /// Pre-trained snapshot (KENW).
    #[arg(long)]
    pre: PathBuf,
    /// Fine-tuned snapshot (KENW).
    #[arg(long)]
    fine: PathBuf,
    /// Entries retained per row (clamped to the row length).
    #[arg(long)]
    k: usize,
    /// Output delta (KEND).
    #[arg(long)]
    out: PathBuf,
    /// Only prune matrices whose name matches this glob. Repeatable.
    #[arg(long = "match", value_name = "GLOB")]
    patterns: Vec<String>,
    /// Only prune matrices at snapshot positions LO..HI (inclusive).
    #[arg(long, value_name = "LO..HI")]
    layers: Option<LayerRange>,
    /// LZMA-compress the delta body (default).
    #[arg(long, conflicts_with = "no_compress")]
    compress: bool,
    /// Store the delta body uncompressed.
    #[arg(long)]
    no_compress: bool,
    /// Also write the optimized snapshot here.
    #[arg(long, value_name = "KENW")]
    optimized: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InjectArgs {
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    delta: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum View {
    Single,
    Neighbors,
    Layerwise,
}

#[derive(Debug, Args)]
struct VizArgs {
    #[arg(long)]
    pre: PathBuf,
    #[arg(long)]
    delta: PathBuf,
    #[arg(long, value_enum)]
    view: View,
    /// Matrix to render (single and neighbors views).
    #[arg(
        long,
        conflicts_with = "pattern",
        required_if_eq_any([("view", "single"), ("view", "neighbors")])
    )]
    matrix: Option<String>,
    /// Name glob selecting the matrices of the layer-wise view.
    #[arg(long, required_if_eq("view", "layerwise"))]
    pattern: Option<String>,
    /// Output file, or output directory for the layer-wise view.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Kde,
    Random,
    Both,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = StrategyArg::Both)]
    strategy: StrategyArg,
    /// Comma-separated k values [default: 0, m/8, m/4, m/2, m].
    #[arg(long, value_delimiter = ',')]
    ks: Vec<usize>,
    /// Number of random-selection seeds per k.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// First random-selection seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override the reference task seed.
    #[arg(long)]
    task_seed: Option<u64>,
    /// Override the reference model initialization seed.
    #[arg(long)]
    init_seed: Option<u64>,
    /// Allowed drop below the fine-tuned score when reporting the threshold.
    #[arg(long, default_value_t = 0.01)]
    band: f64,
    /// CSV report destination.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[arg(long)]
    delta: PathBuf,
    /// Pre-trained snapshot; enables size comparison and base verification.
    #[arg(long)]
    pre: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 1000)]
    rows: usize,
    #[arg(long, default_value_t = 64)]
    max_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
    {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| commands::run(cli.command)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
