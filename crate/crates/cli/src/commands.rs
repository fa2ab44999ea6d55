use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ken_core::bench::{self, BenchReport, BenchSetup, BenchStrategy};
use ken_core::delta::{encode_delta, extract_delta, inject, load_delta, DeltaContainer};
use ken_core::pruner::{format_percent, prune_snapshot, reset_stats, PruneConfig};
use ken_core::selftest::run_selftest;
use ken_core::tensor_store::{
    encode_snapshot, load_snapshot, load_snapshot_with_checksum, save_snapshot, ModelSnapshot,
};
use ken_core::viz;

use crate::{
    BenchArgs, Command, InjectArgs, PruneArgs, SelftestArgs, StatsArgs, StrategyArg, View, VizArgs,
};

pub(crate) fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Prune(a) => prune(a),
        Command::Inject(a) => inject_cmd(a),
        Command::Viz(a) => viz_cmd(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Stats(a) => stats(a),
        Command::Selftest(a) => selftest(a),
    }
    .map(|()| ExitCode::SUCCESS)
}

fn load_base(path: &Path) -> Result<(ModelSnapshot, u32)> {
    load_snapshot_with_checksum(path).with_context(|| format!("loading `{}`", path.display()))
}

fn load_delta_file(path: &Path) -> Result<DeltaContainer> {
    load_delta(path).with_context(|| format!("loading delta `{}`", path.display()))
}

fn print_sizes(delta: &DeltaContainer, file_bytes: usize, snapshot_bytes: Option<usize>) {
    let s = delta.sizes();
    println!(
        "delta payload (uncompressed): values {} B + support masks {} B + index {} B = {} B",
        s.values_bytes,
        s.mask_bytes,
        s.index_bytes,
        s.body_bytes()
    );
    match snapshot_bytes {
        Some(full) => println!(
            "delta file {file_bytes} B vs snapshot {full} B ({:.2}%)",
            100.0 * file_bytes as f64 / full as f64
        ),
        None => println!("delta file {file_bytes} B"),
    }
}

fn prune(a: PruneArgs) -> Result<()> {
    let (pre, base_crc) = load_base(&a.pre)?;
    let fine = load_snapshot(&a.fine).with_context(|| format!("loading `{}`", a.fine.display()))?;
    let mut cfg = PruneConfig::new(a.k)
        .with_patterns(&a.patterns)
        .context("invalid --match pattern")?;
    if let Some(r) = a.layers {
        cfg = cfg.with_layer_range(r);
    }
    let out = prune_snapshot(&pre, &fine, &cfg).with_context(|| {
        format!(
            "pruning `{}` against `{}`",
            a.fine.display(),
            a.pre.display()
        )
    })?;
    let delta = extract_delta(base_crc, &fine, &out.masks, a.k)?;
    let bytes = encode_delta(&delta, !a.no_compress)?;
    fs::write(&a.out, &bytes).with_context(|| format!("writing `{}`", a.out.display()))?;
    if let Some(path) = &a.optimized {
        save_snapshot(&out.snapshot, path)
            .with_context(|| format!("writing `{}`", path.display()))?;
    }
    println!("{}", out.stats);
    print_sizes(&delta, bytes.len(), Some(encode_snapshot(&fine).len()));
    Ok(())
}

fn inject_cmd(a: InjectArgs) -> Result<()> {
    let (pre, crc) = load_base(&a.pre)?;
    let delta = load_delta_file(&a.delta)?;
    let rebuilt = inject(&pre, crc, &delta).with_context(|| {
        format!(
            "injecting `{}` into `{}`",
            a.delta.display(),
            a.pre.display()
        )
    })?;
    save_snapshot(&rebuilt, &a.out).with_context(|| format!("writing `{}`", a.out.display()))?;
    println!(
        "wrote {} ({} matrices, {} overwritten)",
        a.out.display(),
        rebuilt.len(),
        delta.entries().len()
    );
    Ok(())
}

fn viz_cmd(a: VizArgs) -> Result<()> {
    let (pre, crc) = load_base(&a.pre)?;
    let delta = load_delta_file(&a.delta)?;
    let optimized = inject(&pre, crc, &delta)?;
    match a.view {
        View::Single | View::Neighbors => {
            let name = a.matrix.as_deref().expect("clap enforces --matrix");
            let entry = delta
                .get(name)
                .with_context(|| format!("matrix `{name}` is not in the delta"))?;
            match a.view {
                View::Single => {
                    let m = optimized.get(name).expect("inject checked names");
                    viz::render_single_matrix(m, entry.mask(), &a.out)?
                }
                _ => viz::render_neighbor_view(&viz::neighbor_counts(entry.mask()), &a.out)?,
            }
            println!("wrote {}", a.out.display());
        }
        View::Layerwise => {
            let pattern = a.pattern.as_deref().expect("clap enforces --pattern");
            let files = viz::render_layerwise(&optimized, &delta.masks(), pattern, &a.out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let mut setup = BenchSetup::reference();
    if let Some(s) = a.task_seed {
        setup.task.seed = s;
    }
    if let Some(s) = a.init_seed {
        setup.init_seed = s;
    }
    let pair = bench::prepare(&setup)?;
    let m = pair.fine.max_row_len();
    let ks = if a.ks.is_empty() {
        let mut ks = vec![0, m / 8, m / 4, m / 2, m];
        ks.dedup();
        ks
    } else {
        a.ks.clone()
    };
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds.max(1)).collect();
    let strategies: &[BenchStrategy] = match a.strategy {
        StrategyArg::Kde => &[BenchStrategy::Kde],
        StrategyArg::Random => &[BenchStrategy::Random],
        StrategyArg::Both => &[BenchStrategy::Kde, BenchStrategy::Random],
    };
    let mut report = BenchReport::default();
    for &s in strategies {
        let part = bench::run_sweep(&pair.pre, &pair.fine, &pair.splits.test, &ks, &seeds, s)?;
        report = report.merge(part);
    }
    if let Some(path) = &a.out {
        fs::write(path, report.to_csv())
            .with_context(|| format!("writing `{}`", path.display()))?;
    }

    println!(
        "pre-trained f1 {:.4}   fine-tuned f1 {:.4}   (m = {m})",
        pair.pre_f1, pair.fine_f1
    );
    println!(
        "{:<8} {:>4} {:>7} {:>20} {:>11} {:>6}",
        "strategy", "k", "reset%", "f1_weighted", "1-f1", "runs"
    );
    let summary = report.summarize();
    for c in &summary {
        println!(
            "{:<8} {:>4} {:>7} {:>11.4} (± {:.4}) {:>11.4} {:>6}",
            c.strategy.as_str(),
            c.k,
            format_percent(c.reset_fraction),
            c.mean_f1,
            c.std_f1,
            c.error_rate(),
            c.runs
        );
    }
    match bench::degradation_threshold(&summary, pair.fine_f1, a.band) {
        Some(k) => println!("kde threshold (within {} of fine-tuned): k = {k}", a.band),
        None if strategies.contains(&BenchStrategy::Kde) => {
            println!("kde threshold (within {}): not reached", a.band)
        }
        None => {}
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let delta = load_delta_file(&a.delta)?;
    let file_bytes = fs::metadata(&a.delta)?.len() as usize;
    let mut snapshot_bytes = None;
    if let Some(pre_path) = &a.pre {
        let (pre, crc) = load_base(pre_path)?;
        if crc != delta.base_checksum() {
            bail!(
                "`{}` was not built against `{}` (base {:#010x}, file {crc:#010x})",
                a.delta.display(),
                pre_path.display(),
                delta.base_checksum()
            );
        }
        snapshot_bytes = Some(encode_snapshot(&pre).len());
    }
    println!("base checksum {:#010x}", delta.base_checksum());
    for e in delta.entries() {
        println!("  {}: {}x{}, k = {}", e.name(), e.rows(), e.cols(), e.k());
    }
    println!("{}", reset_stats(&delta.masks()));
    print_sizes(&delta, file_bytes, snapshot_bytes);
    Ok(())
}

fn selftest(a: SelftestArgs) -> Result<()> {
    let report = run_selftest(a.rows, a.max_len, a.seed);
    println!(
        "{} rows, {} (row, k) comparisons, {} mismatches",
        report.rows,
        report.comparisons,
        report.mismatches.len()
    );
    if let Some(m) = report.mismatches.first() {
        bail!(
            "first mismatch at k = {}: got {:?}, brute force {:?}",
            m.k,
            m.got,
            m.expected
        );
    }
    Ok(())
}
