//! Single entry point for the cross-fusion experiment artifacts.
//!
//! Exit codes: 0 success, 1 usage or schema error, 2 failed check,
//! 3 runtime abort (IO failure, corrupt data, non-finite loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crossfuse_core::backbone::{FusionStrategy, TapName};
use crossfuse_core::block::{CorrelationKind, CrossFusionConfig};
use crossfuse_core::error::CoreError;
use crossfuse_core::gradcheck::check_block;
use crossfuse_core::harness::{
    ablate, correlation_axis, pooling_axis, strategy_axis, taps_axis, train, CellRun, GridCell,
    GridSpec, RunReport, TrainConfig, REPORT_SCHEMA,
};
use crossfuse_core::report::{
    load_grid, load_run, runs_csv, save_grid, save_run, summary_table, GridResults, GRID_SCHEMA,
};
use crossfuse_core::synth::{gen_dataset, load_dataset, GenConfig, SyntheticSample};

type Result<T> = std::result::Result<T, CoreError>;

#[derive(Parser)]
#[command(name = "crossfuse", version, about = "Cross-layer attention experiment harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic panel-defect dataset on disk
    GenData(GenDataArgs),
    /// Finite-difference check of the fusion block gradients (always 64-bit)
    Gradcheck(GradcheckArgs),
    /// Train one model on a generated dataset and write its run report
    Train(TrainArgs),
    /// Train a full ablation grid and write grid results, CSV, and summary
    Ablate(AblateArgs),
    /// Merge run/grid JSON files into an aggregate CSV and summary table
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for images, masks, and the manifest
    #[arg(long)]
    out: PathBuf,
    /// Number of samples
    #[arg(long, default_value_t = 2500)]
    n: usize,
    /// Square image size in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Smallest blob radius in pixels
    #[arg(long, default_value_t = 2.0)]
    scale_min: f64,
    /// Largest blob radius in pixels
    #[arg(long, default_value_t = 20.0)]
    scale_max: f64,
    /// Dent/hole appearance similarity in [0, 1]; 1 makes them identical
    #[arg(long, default_value_t = 0.8)]
    similarity: f64,
    /// Additive Gaussian pixel noise
    #[arg(long, default_value_t = 0.05)]
    noise_sigma: f64,
    /// Master seed for the dataset
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Correlation kind to check: gaussian | sigmoid | dot | all
    #[arg(long, default_value = "all")]
    kind: String,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Hierarchy levels (level 0 at 2x resolution, target last)
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Target map spatial size
    #[arg(long, default_value_t = 6)]
    size: usize,
    /// Route the output through a sign-flipped backward rule (mutation
    /// fixture; a healthy checker must then fail)
    #[arg(long, default_value_t = false)]
    inject_fault: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Run report output path
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
    /// Training epochs
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// SGD learning rate
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// SGD momentum
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Samples per optimizer step
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Seed for init and data order
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fusion strategy: none | addition | concat | cross
    #[arg(long, default_value = "cross")]
    fusion: String,
    /// Correlation kind for the cross strategy: gaussian | sigmoid | dot
    #[arg(long, default_value = "gaussian")]
    correlation: String,
    /// Reference pooling kernel; 1 disables pooling
    #[arg(long, default_value_t = 5)]
    pool_kernel: usize,
    /// Reference pooling dilation
    #[arg(long, default_value_t = 3)]
    pool_dilation: usize,
    /// Comma-separated reference taps (must include s4_last)
    #[arg(long, default_value = "s3_last,s4_first,s4_last")]
    taps: String,
    /// Zero wall-time fields for byte-identical reruns
    #[arg(long, default_value_t = false)]
    strip_timing: bool,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory produced by gen-data
    #[arg(long)]
    data: PathBuf,
    /// Output directory for grid.json, runs.csv, and summary.txt
    #[arg(long)]
    out: PathBuf,
    /// Grid axis: correlation | strategy | pooling | taps
    #[arg(long, default_value = "correlation")]
    axis: String,
    /// Paired seeds per cell
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Master seed deriving the per-run paired seeds
    #[arg(long, default_value_t = 0)]
    master_seed: u64,
    /// Worker threads for grid cells
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Training epochs per run
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// SGD learning rate
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// SGD momentum
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Samples per optimizer step
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Zero wall-time fields for byte-identical reruns
    #[arg(long, default_value_t = false)]
    strip_timing: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run or grid JSON files to merge
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output directory for aggregate.csv and summary.txt
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.cmd {
        Cmd::GenData(a) => run_gen_data(a).map(|()| 0),
        Cmd::Gradcheck(a) => run_gradcheck(a),
        Cmd::Train(a) => run_train(a).map(|()| 0),
        Cmd::Ablate(a) => run_ablate(a).map(|()| 0),
        Cmd::Report(a) => run_report(a).map(|()| 0),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(code_for(&e))
        }
    }
}

/// Usage and schema problems are exit 1; anything that failed at runtime
/// (IO, corrupt files, non-finite loss) is exit 3.
fn code_for(e: &CoreError) -> u8 {
    match e {
        CoreError::NonFiniteLoss { .. }
        | CoreError::Io { .. }
        | CoreError::Json { .. }
        | CoreError::TensorFile { .. }
        | CoreError::ManifestMismatch { .. } => 3,
        _ => 1,
    }
}

enum Precision {
    F32,
    F64,
}

fn precision_from_env() -> Result<Precision> {
    match std::env::var("CROSSFUSE_PRECISION") {
        Err(_) => Ok(Precision::F32),
        Ok(v) => match v.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(CoreError::InvalidArgument {
                op: "CROSSFUSE_PRECISION",
                reason: format!("unsupported precision {other:?}, expected f32 | f64"),
            }),
        },
    }
}

fn run_gen_data(a: GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        image_size: a.size,
        samples: a.n,
        scale_range: (a.scale_min, a.scale_max),
        class_similarity: a.similarity,
        noise_sigma: a.noise_sigma,
        seed: a.seed,
    };
    let manifest = gen_dataset(&cfg, &a.out)?;
    let mut pixels = [0u64; 3];
    for s in &manifest.samples {
        for (total, count) in pixels.iter_mut().zip(s.class_pixels) {
            *total += count;
        }
    }
    println!(
        "wrote {} samples ({}x{}) to {}",
        manifest.samples.len(),
        a.size,
        a.size,
        a.out.display()
    );
    println!("class pixels: background {} dent {} hole {}", pixels[0], pixels[1], pixels[2]);
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<u8> {
    let kinds: Vec<CorrelationKind> = if a.kind == "all" {
        CorrelationKind::ALL.to_vec()
    } else {
        vec![CorrelationKind::parse(&a.kind)?]
    };
    let mut failed = false;
    for kind in kinds {
        let report = check_block(kind, a.levels, a.size, a.eps, a.inject_fault)?;
        let ok = report.max_rel_err < 1e-4;
        println!(
            "kind {:<8} max rel err {:.3e}  [{}]",
            kind.name(),
            report.max_rel_err,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed = true;
            if let Some(w) = report.worst {
                println!(
                    "  worst: param {} index {} analytic {:.9e} numeric {:.9e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
        }
    }
    Ok(if failed { 2 } else { 0 })
}

fn parse_taps(s: &str) -> Result<Vec<TapName>> {
    s.split(',').map(|t| TapName::parse(t.trim())).collect()
}

fn load_samples(dir: &Path) -> Result<Vec<SyntheticSample>> {
    load_dataset(dir)?.load_all()
}

fn run_train(a: TrainArgs) -> Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        momentum: a.momentum,
        batch: a.batch,
        seed: a.seed,
        strategy: FusionStrategy::parse(&a.fusion)?,
        fusion: CrossFusionConfig {
            correlation: CorrelationKind::parse(&a.correlation)?,
            pool_kernel: a.pool_kernel,
            pool_dilation: a.pool_dilation,
            ..CrossFusionConfig::default()
        },
        reference_taps: parse_taps(&a.taps)?,
        class_weights: None,
    };
    let data = load_samples(&a.data)?;
    let mut report = match precision_from_env()? {
        Precision::F32 => train::<f32>(&cfg, &data)?,
        Precision::F64 => train::<f64>(&cfg, &data)?,
    };
    if a.strip_timing {
        report.strip_timing();
    }
    save_run(&report, &a.out)?;
    print_run_summary(&report);
    println!("report written to {}", a.out.display());
    Ok(())
}

fn print_run_summary(report: &RunReport) {
    let m = &report.metrics;
    println!(
        "test mIoU {:.4}  IoU background {:.4} dent {:.4} hole {:.4}  pixel acc {:.4}",
        m.miou, m.iou[0], m.iou[1], m.iou[2], m.pixel_accuracy
    );
    println!(
        "params {} (fusion +{}, +{:.3}%)  flops {} (fusion +{:.3}%)",
        report.param_count,
        report.fusion_params,
        report.fusion_param_percent,
        report.flops,
        report.fusion_flop_percent
    );
    println!("params unchanged: {}", report.params_unchanged);
}

fn grid_cells(axis: &str) -> Result<Vec<GridCell>> {
    match axis {
        "correlation" => Ok(correlation_axis()),
        "strategy" => Ok(strategy_axis()),
        "pooling" => Ok(pooling_axis()),
        "taps" => Ok(taps_axis()),
        other => Err(CoreError::InvalidArgument {
            op: "ablate",
            reason: format!(
                "unknown axis {other:?}, expected correlation | strategy | pooling | taps"
            ),
        }),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| CoreError::Io { path: path.display().to_string(), source: e })
}

fn run_ablate(a: AblateArgs) -> Result<()> {
    let spec = GridSpec {
        cells: grid_cells(&a.axis)?,
        seeds: a.seeds,
        master_seed: a.master_seed,
        base: TrainConfig {
            epochs: a.epochs,
            lr: a.lr,
            momentum: a.momentum,
            batch: a.batch,
            ..TrainConfig::default()
        },
    };
    let data = load_samples(&a.data)?;
    let runs = match precision_from_env()? {
        Precision::F32 => ablate::<f32>(&spec, &data, a.jobs)?,
        Precision::F64 => ablate::<f64>(&spec, &data, a.jobs)?,
    };
    let mut results = GridResults::new(a.master_seed, runs);
    if a.strip_timing {
        results.strip_timing();
    }
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CoreError::Io { path: a.out.display().to_string(), source: e })?;
    save_grid(&results, &a.out.join("grid.json"))?;
    write_text(&a.out.join("runs.csv"), &runs_csv(&results.runs))?;
    let summary = summary_table(&results.runs);
    write_text(&a.out.join("summary.txt"), &summary)?;
    let aborted = results.runs.iter().filter(|r| r.outcome.is_err()).count();
    if aborted > 0 {
        eprintln!("warning: {aborted} run(s) aborted; see grid.json for reasons");
    }
    print!("{summary}");
    println!("grid results written to {}", a.out.display());
    Ok(())
}

/// A bare run report shown as a one-run cell: cross runs group by
/// correlation kind, everything else by strategy, matching the axis
/// builders' id scheme.
fn wrap_run(report: RunReport) -> CellRun {
    let id = match report.config.strategy {
        FusionStrategy::Cross => format!("cross/{}", report.config.fusion.correlation.name()),
        s => format!("strategy/{}", s.name()),
    };
    let mut cell = GridCell::new(&id, report.config.strategy);
    cell.correlation = report.config.fusion.correlation;
    cell.pool_kernel = report.config.fusion.pool_kernel;
    cell.pool_dilation = report.config.fusion.pool_dilation;
    cell.reference_taps = report.config.reference_taps.clone();
    CellRun { cell, seed_index: 0, seed: report.config.seed, outcome: Ok(report) }
}

fn sniff_schema(path: &Path) -> Result<String> {
    let json = std::fs::read_to_string(path)
        .map_err(|e| CoreError::Io { path: path.display().to_string(), source: e })?;
    let v: serde_json::Value = serde_json::from_str(&json)
        .map_err(|e| CoreError::Json { path: path.display().to_string(), source: e })?;
    Ok(v.get("schema").and_then(|s| s.as_str()).unwrap_or("").to_string())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let mut runs: Vec<CellRun> = Vec::new();
    for path in &a.inputs {
        match sniff_schema(path)?.as_str() {
            GRID_SCHEMA => runs.extend(load_grid(path)?.runs),
            REPORT_SCHEMA => runs.push(wrap_run(load_run(path)?)),
            other => {
                return Err(CoreError::SchemaVersion {
                    found: other.to_string(),
                    expected: format!("{REPORT_SCHEMA} or {GRID_SCHEMA}"),
                })
            }
        }
    }
    std::fs::create_dir_all(&a.out)
        .map_err(|e| CoreError::Io { path: a.out.display().to_string(), source: e })?;
    write_text(&a.out.join("aggregate.csv"), &runs_csv(&runs))?;
    let summary = summary_table(&runs);
    write_text(&a.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    println!("aggregate written to {}", a.out.display());
    Ok(())
}
