//! Command-line front end: training runs, analytic cost tables, trained-model
//! inspection, an XOR demonstration, and a finite-difference gradient check.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or config error, 3 training
//! divergence.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dyconv::checkpoint::Checkpoint;
use dyconv::config::RunConfig;
use dyconv::cost::{mobilenet_v2_spec, network_madds, CostReport, NetworkSpec};
use dyconv::data::DatasetConfig;
use dyconv::error::{Error, Result};
use dyconv::gradcheck;
use dyconv::inspect;
use dyconv::model::Model;
use dyconv::nn::{static_perceptron_xor, xor_dynamic};
use dyconv::tensor::{Dtype, Element};
use dyconv::train::{self, LrSchedule, TauSchedule, TrainConfig};

/// Batch size used by inspection passes; fixed so re-runs are comparable.
const EVAL_BATCH: usize = 64;
/// Seed for the shuffled aggregation variants in `inspect --what modes`.
const INSPECT_SEED: u64 = 0;
/// Step budget for the trained XOR demonstration.
const XOR_STEPS: usize = 2000;

#[derive(Parser)]
#[command(
    name = "dyconv",
    version,
    about = "Dynamic convolution: train, inspect, and price attention-aggregated models"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a configured training job and write metrics + checkpoint.
    Train(TrainArgs),
    /// Price a network with the analytic mult-adds model.
    Cost(CostArgs),
    /// Probe a trained checkpoint: aggregation modes, stage masks, attention stats.
    Inspect(InspectArgs),
    /// Show that one dynamic perceptron layer solves XOR, then train one.
    Xor,
    /// Finite-difference check of every differentiable primitive.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    /// `mobilenet_v2` or `file:PATH` pointing at a network spec (JSON).
    #[arg(long)]
    network: String,
    /// Width multiplier for the built-in mobilenet_v2 generator.
    #[arg(long)]
    width: Option<f64>,
    /// Kernels per dynamic layer.
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint written by `dyconv train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset config (JSON path), or the shorthand `blobs` / `xor` for the
    /// built-in defaults. The test split is used.
    #[arg(long)]
    dataset: String,
    #[arg(long, value_enum)]
    what: What,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Negative control: corrupt one gradient and expect a failure.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    Modes,
    Stages,
    Stats,
}

/// Prints block output without panicking when the reader hangs up (a closed
/// pipe just truncates the report).
fn emit(text: &str) {
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(&args),
        Cmd::Cost(args) => cmd_cost(&args),
        Cmd::Inspect(args) => cmd_inspect(&args),
        Cmd::Xor => cmd_xor(),
        Cmd::Gradcheck(args) => cmd_gradcheck(&args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn cmd_train(args: &TrainArgs) -> Result<ExitCode> {
    let run = RunConfig::load(&args.config)?;
    let out = args
        .out
        .clone()
        .or_else(|| run.output_dir.clone())
        .ok_or_else(|| {
            Error::Config("no output directory: pass --out or set output_dir".into())
        })?;
    let summary = train::run_to_dir(&run, &out)?;
    println!(
        "wrote {} and {}",
        summary.metrics.display(),
        summary.checkpoint.display()
    );
    println!(
        "epochs {}  final loss {:.4}  final top-1 {:.4}",
        summary.epochs, summary.final_loss, summary.final_top1
    );
    if let Some(cost) = &run.cost {
        let width = (cost.network == "mobilenet_v2").then_some(cost.width);
        let (spec, k) = resolve_network(&cost.network, width, cost.k)?;
        print_cost_totals(&spec, k)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Builds the network spec behind a `--network` argument.
fn resolve_network(
    network: &str,
    width: Option<f64>,
    k: usize,
) -> Result<(NetworkSpec, usize)> {
    let spec = if network == "mobilenet_v2" {
        mobilenet_v2_spec(width.unwrap_or(1.0), 224)?
    } else if let Some(path) = network.strip_prefix("file:") {
        if width.is_some() {
            return Err(Error::Config(
                "--width only applies to the built-in mobilenet_v2 generator".into(),
            ));
        }
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read network spec {path}: {e}")))?;
        let spec: NetworkSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad network spec {path}: {e}")))?;
        spec.validate()?;
        spec
    } else {
        return Err(Error::Config(format!(
            "unknown network {network:?}; expected mobilenet_v2 or file:PATH"
        )));
    };
    Ok((spec, k))
}

#[derive(Serialize)]
struct CostDocument {
    k: usize,
    static_total: u64,
    dynamic_total: u64,
    overhead_ratio: f64,
    #[serde(rename = "static")]
    static_report: CostReport,
    #[serde(rename = "dynamic")]
    dynamic_report: CostReport,
}

fn cost_document(spec: &NetworkSpec, k: usize) -> Result<CostDocument> {
    let static_report = network_madds(spec, false, k)?;
    let dynamic_report = network_madds(spec, true, k)?;
    Ok(CostDocument {
        k,
        static_total: static_report.total(),
        dynamic_total: dynamic_report.total(),
        overhead_ratio: dynamic_report.overall_constraint_ratio(),
        static_report,
        dynamic_report,
    })
}

fn print_cost_totals(spec: &NetworkSpec, k: usize) -> Result<()> {
    let doc = cost_document(spec, k)?;
    println!(
        "mult-adds for {}: static {:.2}M, dynamic (K={}) {:.2}M (+{:.2}%)",
        spec.name,
        doc.static_total as f64 / 1e6,
        k,
        doc.dynamic_total as f64 / 1e6,
        100.0 * doc.overhead_ratio
    );
    Ok(())
}

fn cmd_cost(args: &CostArgs) -> Result<ExitCode> {
    let (spec, k) = resolve_network(&args.network, args.width, args.k)?;
    let doc = cost_document(&spec, k)?;
    match args.format {
        Format::Json => {
            emit(&serde_json::to_string_pretty(&doc).unwrap());
            emit("\n");
        }
        Format::Table => {
            let mut text = format!(
                "network {}  width x{:.2}  input {}\n",
                spec.name, spec.width_multiplier, spec.input_resolution
            );
            text.push_str(&format!(
                "static total: {} ({:.2}M)\n",
                doc.static_total,
                doc.static_total as f64 / 1e6
            ));
            text.push_str(&format!(
                "dynamic total (K={}): {} ({:.2}M), overhead {:+.2}%\n\n",
                k,
                doc.dynamic_total,
                doc.dynamic_total as f64 / 1e6,
                100.0 * doc.overhead_ratio
            ));
            text.push_str(&doc.dynamic_report.render_text());
            emit(&text);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn dataset_config(arg: &str) -> Result<DatasetConfig> {
    match arg {
        "xor" => Ok(DatasetConfig::Xor),
        "blobs" => Ok(DatasetConfig::Blobs(Default::default())),
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Data(format!("cannot read dataset config {path}: {e}")))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("bad dataset config {path}: {e}")))
        }
    }
}

fn cmd_inspect(args: &InspectArgs) -> Result<ExitCode> {
    let ck = Checkpoint::read(&args.checkpoint)?;
    let data_cfg = dataset_config(&args.dataset)?;
    match ck.dtype {
        Dtype::F32 => inspect_typed::<f32>(&ck, &data_cfg, args),
        Dtype::F64 => inspect_typed::<f64>(&ck, &data_cfg, args),
    }
}

fn inspect_typed<E: Element>(
    ck: &Checkpoint,
    data_cfg: &DatasetConfig,
    args: &InspectArgs,
) -> Result<ExitCode> {
    let model: Model<E> = ck.into_model()?;
    let data = data_cfg.test_split::<E>()?;
    let (table, json) = match args.what {
        What::Modes => {
            let table = inspect::ablate_modes(&model, &data, INSPECT_SEED, EVAL_BATCH)?;
            (table.render(), serde_json::to_string_pretty(&table).unwrap())
        }
        What::Stages => {
            let table = inspect::ablate_stage_table(&model, &data, EVAL_BATCH)?;
            (table.render(), serde_json::to_string_pretty(&table).unwrap())
        }
        What::Stats => {
            let stats = inspect::attention_stats(&model, &data, EVAL_BATCH)?;
            (stats.render(), serde_json::to_string_pretty(&stats).unwrap())
        }
    };
    match args.format {
        Format::Json => {
            emit(&json);
            emit("\n");
        }
        Format::Table => emit(&table),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_xor() -> Result<ExitCode> {
    let corners = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
    println!("single-layer dynamic perceptron, attention pi = [x2, 1 - x2]:");
    for x in corners {
        println!("  ({}, {}) -> {}", x[0], x[1], xor_dynamic(x)?);
    }
    println!("two-layer static perceptron, y = w'max(0, Wx + b):");
    for x in corners {
        println!("  ({}, {}) -> {}", x[0], x[1], static_perceptron_xor(x));
    }

    println!("training a K=2 dynamic perceptron from scratch (seed 0, budget {XOR_STEPS} steps):");
    let cfg = TrainConfig {
        epochs: XOR_STEPS,
        batch_size: 4,
        lr0: 0.1,
        lr_schedule: LrSchedule::Cosine,
        momentum: 0.9,
        weight_decay: 0.0,
        tau_schedule: TauSchedule::Anneal {
            start: 30.0,
            end: 1.0,
            epochs: 10,
        },
        dtype: Dtype::F64,
    };
    let out = train::train::<f64>(
        &dyconv::model::ModelConfig::XorPerceptron(Default::default()),
        &DatasetConfig::Xor,
        &cfg,
        0,
        |_| Ok(()),
    )?;
    let solved = out.history.iter().position(|r| r.top1 == 1.0);
    match solved {
        Some(epoch) => {
            println!(
                "  solved 4/4 after {} steps (final top-1 {:.3})",
                epoch + 1,
                out.history.last().map_or(0.0, |r| r.top1)
            );
            Ok(ExitCode::SUCCESS)
        }
        None => {
            println!("  not solved within {XOR_STEPS} steps");
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<ExitCode> {
    let reports = gradcheck::run_all(args.seed, args.corrupt)?;
    let width = reports.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &reports {
        println!(
            "{:width$}  {:>10.3e}  {}",
            r.name,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    let offenders: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if offenders.is_empty() {
        println!("all gradients within {:.0e}", gradcheck::TOLERANCE);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("failed: {}", offenders.join(", "));
        Ok(ExitCode::from(1))
    }
}
