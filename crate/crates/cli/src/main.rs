use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qna_core::complexity::{default_sweep, emit_csv, run_sweep_with, BenchImpl, SweepOptions, DEFAULT_KS};
use qna_core::model::{count_flops, count_params, ArchConfig, Init, Model, Variant};
use qna_core::toy::{train_toy_with, ToyConfig};
use qna_core::verify::{run_checks, CheckOptions, Grid};
use qna_core::{DType, QnaError, RngSeed};

mod viz;

#[derive(Debug, Parser)]
#[command(name = "qna", version, about = "Query-and-Attend layer tools")]
struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compare the efficient layer against the reference oracles.
    Check {
        #[arg(long, default_value = "small")]
        grid: Grid,
        #[arg(long, default_value = "f64")]
        dtype: DType,
        /// Adds this value to W_O[0,0] of the efficient path (exercises failure reporting).
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Latency and scratch-memory sweep over window sizes, written as CSV.
    Bench {
        /// Input size as HxWxD.
        #[arg(long, default_value = "256x256x64", value_parser = parse_input)]
        input: (usize, usize, usize),
        /// Comma-separated window sizes.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
        k: Vec<usize>,
        /// Comma-separated implementations.
        #[arg(long, value_delimiter = ',', default_values_t = BenchImpl::ALL)]
        impls: Vec<BenchImpl>,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Parameter and FLOP accounting for a QnA-ViT variant.
    Model {
        #[arg(long, default_value = "tiny")]
        variant: Variant,
        #[arg(long, default_value_t = 224)]
        resolution: usize,
        #[arg(long, value_enum, default_value_t = Report::Both)]
        report: Report,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Per-(query, head) attention heatmaps of a tensor file, as PGM images.
    Viz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "viz")]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        queries: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Zero key projection and relative bias: every window attends uniformly.
        #[arg(long)]
        uniform: bool,
    },
    /// Train one QnA layer on a synthetic motif-detection task.
    TrainToy {
        #[arg(long, default_value_t = ToyConfig::default().steps)]
        steps: usize,
        #[arg(long, default_value_t = ToyConfig::default().lr)]
        lr: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Report {
    Params,
    Flops,
    Both,
}

fn parse_input(s: &str) -> Result<(usize, usize, usize), String> {
    let dims: Vec<usize> =
        s.split('x').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match dims[..] {
        [h, w, d] if h > 0 && w > 0 && d > 0 => Ok((h, w, d)),
        _ => Err(format!("expected HxWxD with positive sizes, got {s:?}")),
    }
}

enum Failure {
    Verification,
    Core(QnaError),
}

impl From<QnaError> for Failure {
    fn from(e: QnaError) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &QnaError) -> u8 {
    match e {
        QnaError::Io(_) | QnaError::Format(_) => 3,
        QnaError::ShapeMismatch { .. } | QnaError::InvalidArgument { .. } => 2,
        QnaError::NonFinite { .. } | QnaError::NumericalRange { .. } => 1,
    }
}

fn check(seed: RngSeed, grid: Grid, dtype: DType, fault: Option<f64>) -> Result<(), Failure> {
    let opts = CheckOptions { grid, dtype, seed, fault };
    let results = run_checks(&opts, |r| println!("{r}"))?;
    let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
    println!("{} cases, {} failed", results.len(), failed.len());
    for r in &failed {
        eprintln!("failing case: {}", r.name);
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification)
    }
}

fn bench(
    seed: RngSeed,
    input: (usize, usize, usize),
    ks: &[usize],
    impls: &[BenchImpl],
    out: &PathBuf,
) -> Result<(), Failure> {
    // fail on an unwritable path before spending minutes on the sweep
    std::fs::File::create(out).map_err(QnaError::Io)?;
    // timed regions run on this thread only
    std::env::set_var("QNA_THREADS", "1");
    let cases = default_sweep(input, ks, impls);
    let opts = SweepOptions { seed, ..SweepOptions::default() };
    let rows = run_sweep_with(&cases, &opts)?;
    for r in &rows {
        let c = &r.case;
        let latency = if r.executed {
            format!(
                "{:.3} ms (std {:.3}, median of means {:.3})",
                r.latency_ms_mean, r.latency_ms_std, r.latency_ms_median_of_means
            )
        } else {
            "over memory budget, not run".into()
        };
        println!("{:<13} k={:<2} {latency}  peak {} B", c.implementation.name(), c.k, r.peak_extra_bytes);
    }
    emit_csv(&rows, out)?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn model(seed: RngSeed, variant: Variant, resolution: usize, report: Report, json: bool) -> Result<(), Failure> {
    let model: Model<f32> = Model::build(&ArchConfig::preset(variant), Init::Conventional, seed)?;
    let cost = match report {
        Report::Params => count_params(&model)?,
        Report::Flops | Report::Both => count_flops(&model, resolution)?,
    };
    if json {
        let value = serde_json::json!({
            "variant": variant.name(),
            "resolution": resolution,
            "dims": model.arch.stage_dims,
            "params": matches!(report, Report::Params | Report::Both).then_some(cost.params),
            "flops": matches!(report, Report::Flops | Report::Both).then_some(cost.flops),
            "rows": cost.rows,
        });
        println!("{}", serde_json::to_string_pretty(&value).map_err(|e| QnaError::Format(e.to_string()))?);
        return Ok(());
    }
    println!("{} at {resolution}x{resolution}, stage dims {:?}", variant.name(), model.arch.stage_dims);
    let (show_p, show_f) = (report != Report::Flops, report != Report::Params);
    for row in &cost.rows {
        let mut line = format!("  {:<18}", row.module);
        if show_p {
            line += &format!(" {:>12} params", row.params);
        }
        if show_f {
            line += &format!(" {:>14} MACs", row.flops);
        }
        println!("{line}");
    }
    if show_p {
        println!("total params: {} ({:.2}M)", cost.params, cost.params as f64 / 1e6);
    }
    if show_f {
        println!("total FLOPs (MACs): {} ({:.3}G)", cost.flops, cost.flops as f64 / 1e9);
    }
    Ok(())
}

fn train_toy(seed: RngSeed, steps: usize, lr: f64) -> Result<(), Failure> {
    let cfg = ToyConfig { steps, lr, seed, ..ToyConfig::default() };
    let report = train_toy_with(&cfg, |step, loss| {
        if step % 10 == 0 || step == steps {
            println!("step {step:>4} loss {loss:.6}");
        }
    })?;
    println!("initial {:.6} final {:.6}", report.initial(), report.last());
    if report.halved() {
        Ok(())
    } else {
        eprintln!("final loss is not below half the initial loss");
        Err(Failure::Verification)
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = RngSeed(cli.seed);
    match cli.command {
        Command::Check { grid, dtype, inject_fault } => check(seed, grid, dtype, inject_fault),
        Command::Bench { input, k, impls, out } => bench(seed, input, &k, &impls, &out),
        Command::Model { variant, resolution, report, json } => model(seed, variant, resolution, report, json),
        Command::Viz { input, k, out, queries, heads, uniform } => {
            let written = viz::render(&viz::VizOptions { input, k, out, queries, heads, uniform, seed })?;
            println!("wrote {written} heatmaps");
            Ok(())
        }
        Command::TrainToy { steps, lr } => train_toy(seed, steps, lr),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification) => ExitCode::from(1),
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
