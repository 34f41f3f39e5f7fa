use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hetreg_cli::bench::{cmd_bench, write_bench_csv, BenchOptions, MAX_DIM};
use hetreg_cli::config::{LoadedConfig, SCHEMA};
use hetreg_cli::error::{CliError, CliResult};
use hetreg_cli::labels::{cmd_pseudolabel, LabelArgs, TargetColumns};
use hetreg_cli::runs::cmd_train;
use hetreg_cli::verify::{format_report, meta_check, registry, run_properties, Budget, Kernels};
use hetreg_core::losses::LossKind;

/// Heteroscedastic regression toolkit: property checks, training grids,
/// step benchmarks and pseudo-label export.
///
/// HETREG_THREADS caps the worker pool. Exit codes: 0 success, 1 property
/// failure, 2 configuration or usage error, 3 training divergence.
#[derive(Parser)]
#[command(name = "hetreg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every registered numerical property and print a report.
    Verify {
        /// Draw 10% of the nominal samples per property.
        #[arg(long)]
        quick: bool,
    },
    /// Train every loss in a configuration file; writes CSVs and plots.
    Train {
        #[arg(long, required_unless_present = "print_schema")]
        config: Option<PathBuf>,
        /// Print the documented configuration schema and exit.
        #[arg(long)]
        print_schema: bool,
    },
    /// Time training steps per (dimension, loss).
    Bench(BenchArgs),
    /// Compute neighbourhood covariance labels for a CSV table.
    Pseudolabel(PseudolabelArgs),
}

#[derive(Args)]
struct BenchArgs {
    /// Target dimensions, comma separated (each at most 64).
    #[arg(long, value_delimiter = ',', default_value = "2,8,32")]
    dims: Vec<usize>,
    /// Losses, comma separated; defaults to all six.
    #[arg(long, value_delimiter = ',')]
    losses: Vec<LossKind>,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 2)]
    hidden_layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden_width: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PseudolabelArgs {
    /// Numeric CSV table.
    #[arg(long)]
    input: PathBuf,
    /// The table has no header row.
    #[arg(long)]
    no_header: bool,
    /// Use the last N columns as targets.
    #[arg(long, conflicts_with = "input_fraction")]
    targets: Option<usize>,
    /// Instead, pick this fraction of columns as inputs at random.
    #[arg(long)]
    input_fraction: Option<f64>,
    /// Seed for --input-fraction.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Neighbourhood size [default: 10 × target dimension].
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "labels.csv")]
    out: PathBuf,
    /// Cross-check against the brute-force reference; exits 1 on mismatch.
    #[arg(long)]
    check: bool,
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("HETREG_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("HETREG_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size worker pool: {e}")))
}

fn verify(quick: bool) -> CliResult<()> {
    let reg = registry();
    if let Err(e) = meta_check(&reg) {
        eprintln!("property registry incomplete: {e}");
        return Err(CliError::PropertyFailure {
            failed: 1,
            total: reg.len(),
        });
    }
    let budget = if quick { Budget { fraction: 0.1 } } else { Budget::full() };
    let rows = run_properties(&reg, &Kernels::default(), &budget);
    print!("{}", format_report(&rows));
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::PropertyFailure {
            failed,
            total: rows.len(),
        });
    }
    Ok(())
}

fn train(config: Option<PathBuf>, print_schema: bool) -> CliResult<()> {
    if print_schema {
        print!("{SCHEMA}");
        return Ok(());
    }
    let cfg = LoadedConfig::from_file(&config.expect("clap enforces --config"))?;
    let report = cmd_train(&cfg)?;
    for r in &report.runs {
        let status = match &r.divergence {
            Some(d) => format!("diverged at epoch {} step {}", d.epoch, d.step),
            None => "ok".into(),
        };
        println!("{} [{}] rep {}: {status} -> {}", r.loss, r.schedule, r.rep, r.metrics_path.display());
    }
    println!("summary: {}", report.summary_path.display());
    match report.diverged() {
        0 => Ok(()),
        n => Err(CliError::Diverged(n)),
    }
}

fn bench(a: BenchArgs) -> CliResult<()> {
    if let Some(&d) = a.dims.iter().find(|&&d| d == 0 || d > MAX_DIM) {
        return Err(CliError::Usage(format!("bench dimensions must be in 1..={MAX_DIM}, got {d}")));
    }
    let losses = if a.losses.is_empty() { LossKind::all().to_vec() } else { a.losses };
    let opts = BenchOptions {
        warmup: a.warmup,
        steps: a.steps,
        batch: a.batch,
        hidden_layers: a.hidden_layers,
        hidden_width: a.hidden_width,
        seed: a.seed,
    };
    let records = cmd_bench(&a.dims, &losses, &opts)?;
    for r in &records {
        println!(
            "dim {:>3} {:<16} median {:>9.3} ms  peak {:>10} B  eig {}",
            r.dim, r.loss_kind, r.median_ms, r.peak_bytes, r.eig_calls
        );
    }
    write_bench_csv(&records, &a.out)
}

fn pseudolabel(a: PseudolabelArgs) -> CliResult<()> {
    let targets = match (a.targets, a.input_fraction) {
        (Some(n), _) => TargetColumns::Last(n),
        (None, Some(f)) if f > 0.0 && f < 1.0 => TargetColumns::Split {
            input_fraction: f,
            seed: a.seed,
        },
        (None, Some(f)) => return Err(CliError::Usage(format!("--input-fraction must be in (0, 1), got {f}"))),
        (None, None) => TargetColumns::Last(1),
    };
    let summary = cmd_pseudolabel(&LabelArgs {
        input: a.input,
        has_header: !a.no_header,
        targets,
        k: a.k,
        out: a.out,
        check: a.check,
    })?;
    print!("{}", summary.render());
    match summary.reference_mismatches {
        Some(m) if m > 0 => Err(CliError::PropertyFailure {
            failed: m,
            total: summary.rows,
        }),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Verify { quick } => verify(quick),
        Command::Train { config, print_schema } => train(config, print_schema),
        Command::Bench(a) => bench(a),
        Command::Pseudolabel(a) => pseudolabel(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
