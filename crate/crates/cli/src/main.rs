//! `acopf` command-line driver.
//!
//! Every subcommand reads an optional TOML file given by `--config`;
//! flags override its values. JSON payloads go to stdout and diagnostics to
//! stderr. Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod data_file;
mod settings;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use acopf::evaluation::{evaluate, EvalOptions, MetricsReport};
use acopf::neural::Checkpoint;
use acopf::opf_model::OpfModel;
use acopf::powerflow::{solve, PfOptions, PfProblem};
use acopf::training::{sample_dataset_with_split, train, Dataset, LossKind};
use acopf::{load_case, NetworkModel, SolverKind};
use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use serde_json::json;

use settings::{EvalSettings, GenDataSettings, PfSettings, ReportSettings, Split, TrainSettings};

#[derive(Debug, Parser)]
#[command(name = "acopf", version, about = "Unsupervised learning for AC optimal power flow")]
struct Cli {
    /// Worker threads for batch-parallel stages (default: available parallelism)
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample load vectors around the case nominal and write a CSV dataset
    GenData(GenDataArgs),
    /// Solve the case power flow
    Pf(PfArgs),
    /// Train a model
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Merge evaluation reports into one comparison CSV
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// CSV path; the sidecar is written next to it with a .json extension
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PfArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    solver: Option<SolverKind>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    case: Option<PathBuf>,
    /// Dataset CSV from gen-data; sampled from --samples/--seed otherwise
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    solver: Option<SolverKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    dual_period: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch JSON lines log
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    samples: Option<usize>,
    /// Dataset seed; defaults to the checkpoint's seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    split: Option<Split>,
    #[arg(long)]
    solver: Option<SolverKind>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    feasibility_tol: Option<f64>,
    /// Report JSON path
    #[arg(long)]
    out: Option<PathBuf>,
    /// One-row CSV flattening of the report
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Evaluation report JSON files
    inputs: Vec<PathBuf>,
    /// Comparison CSV path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn emit_error(kind: &str, message: &str) {
    let line = json!({
        "error": kind,
        "message": message,
        "usage": Cli::command().render_usage().to_string(),
    });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACOPF_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let kind = match e.kind() {
                ErrorKind::InvalidSubcommand | ErrorKind::MissingSubcommand => "UnknownSubcommand",
                _ => "BadFlag",
            };
            let msg = e.to_string();
            emit_error(kind, msg.lines().next().unwrap_or_default().trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            emit_error("BadFlag", &msg);
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            emit_error("Runtime", &format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pf(a) => pf(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Report(a) => report(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn require<'a, T>(value: &'a Option<T>, flag: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| usage(format!("missing --{flag}")))
}

fn network(case: &Path) -> Result<NetworkModel> {
    load_case(case).map_err(|e| anyhow::anyhow!("loading case {}: {e}", case.display()))
}

fn dataset(network: &NetworkModel, data: Option<&Path>, samples: usize, seed: u64, ratio: [u32; 3]) -> Result<Dataset> {
    match data {
        Some(path) => data_file::read(path, network),
        None => Ok(sample_dataset_with_split(network, samples, seed, ratio)),
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut s: GenDataSettings = settings::load(a.config.as_deref())?;
    settings::overlay(&mut s.case, a.case);
    settings::overlay(&mut s.out, a.out);
    settings::overlay_value(&mut s.samples, a.samples);
    settings::overlay_value(&mut s.seed, a.seed);
    let case = require(&s.case, "case")?.clone();
    let out = require(&s.out, "out")?.clone();
    settings::echo(&s, &out)?;

    let net = network(&case)?;
    let data = sample_dataset_with_split(&net, s.samples, s.seed, s.split_ratio);
    data_file::write(&out, &data, &net)?;
    log::info!("wrote {} samples to {}", data.samples.len(), out.display());
    print_json(&json!({
        "data": out,
        "sidecar": data_file::sidecar_path(&out),
        "samples": data.samples.len(),
        "seed": data.seed,
        "case_checksum": data.case_checksum,
        "train": data.train,
        "val": data.val,
        "test": data.test,
    }))?;
    Ok(())
}

fn pf(a: PfArgs) -> Result<(), CliError> {
    let mut s: PfSettings = settings::load(a.config.as_deref())?;
    settings::overlay(&mut s.case, a.case);
    settings::overlay_value(&mut s.solver, a.solver);
    settings::overlay_value(&mut s.tol, a.tol);
    settings::overlay(&mut s.max_iter, a.max_iter);
    let case = require(&s.case, "case")?.clone();
    if !(s.tol > 0.0) {
        return Err(usage("--tol must be positive"));
    }

    let net = network(&case)?;
    let problem = PfProblem::from_case(&net).context("building the power-flow problem")?;
    let options = PfOptions {
        tol: s.tol,
        max_iter: s.max_iter,
    };
    let sol = solve(&problem, s.solver, None, options).context("power flow")?;
    let buses: Vec<_> = net
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| json!({ "id": b.id, "v": sol.v[i], "theta": sol.theta[i] }))
        .collect();
    print_json(&json!({
        "case_checksum": net.checksum,
        "solver": s.solver,
        "converged": sol.converged,
        "iterations": sol.iterations,
        "residual_norm": sol.residual_norm,
        "factorizations": sol.factorizations,
        "buses": buses,
    }))?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let mut s: TrainSettings = settings::load(a.config.as_deref())?;
    settings::overlay(&mut s.case, a.case);
    settings::overlay(&mut s.data, a.data);
    settings::overlay(&mut s.out, a.out);
    settings::overlay(&mut s.log, a.log);
    settings::overlay_value(&mut s.samples, a.samples);
    let t = &mut s.train;
    settings::overlay_value(&mut t.loss, a.loss);
    settings::overlay_value(&mut t.solver, a.solver);
    settings::overlay_value(&mut t.epochs, a.epochs);
    settings::overlay_value(&mut t.batch_size, a.batch);
    settings::overlay_value(&mut t.alpha, a.alpha);
    settings::overlay_value(&mut t.dual_period, a.dual_period);
    settings::overlay_value(&mut t.lambda, a.lambda);
    settings::overlay_value(&mut t.eta, a.eta);
    settings::overlay_value(&mut t.tau, a.tau);
    settings::overlay_value(&mut t.learning_rate, a.learning_rate);
    settings::overlay_value(&mut t.seed, a.seed);
    settings::overlay(&mut t.hidden, a.hidden);
    let case = require(&s.case, "case")?.clone();
    let out = require(&s.out, "out")?.clone();
    s.train.validate().map_err(|e| usage(e.to_string()))?;
    settings::echo(&s, &out)?;

    let net = network(&case)?;
    let data = dataset(&net, s.data.as_deref(), s.samples, s.train.seed, s.train.split_ratio)?;
    let opf = OpfModel::new(Arc::new(net));
    let mut log = match &s.log {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut log_err = None;
    let outcome = train(&s.train, &opf, &data, |r| {
        log::info!(
            "epoch {} loss {:.6e} cost {:.3} nu {:.3e} feas {:.3}% pf failures {}",
            r.epoch,
            r.loss.total,
            r.mean_cost,
            r.nu_mean,
            r.feasibility_rate,
            r.pf_failures
        );
        if let (Some(w), None) = (log.as_mut(), &log_err) {
            let written = serde_json::to_writer(&mut *w, r)
                .map_err(std::io::Error::from)
                .and_then(|()| writeln!(w))
                .and_then(|()| w.flush());
            log_err = written.err();
        }
    })
    .context("training")?;
    if let Some(e) = log_err {
        return Err(anyhow::Error::from(e).context("writing the training log").into());
    }
    outcome
        .checkpoint
        .save(&out)
        .with_context(|| format!("writing {}", out.display()))?;

    let test = outcome.test_report.map(|mut r| {
        r.label = format!("{}-{}", s.train.solver, s.train.loss);
        r.config = serde_json::to_value(&s).unwrap_or_default();
        r
    });
    let last = outcome.records.last();
    print_json(&json!({
        "checkpoint": out,
        "epochs": outcome.records.len(),
        "best_epoch": outcome.best_epoch,
        "final_epoch": last,
        "mu_norm": outcome.multipliers.norm(),
        "test": test,
    }))?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<(), CliError> {
    let mut s: EvalSettings = settings::load(a.config.as_deref())?;
    settings::overlay(&mut s.checkpoint, a.checkpoint);
    settings::overlay(&mut s.case, a.case);
    settings::overlay(&mut s.data, a.data);
    settings::overlay(&mut s.seed, a.seed);
    settings::overlay(&mut s.label, a.label);
    settings::overlay(&mut s.out, a.out);
    settings::overlay(&mut s.csv, a.csv);
    settings::overlay_value(&mut s.samples, a.samples);
    settings::overlay_value(&mut s.split, a.split);
    settings::overlay_value(&mut s.solver, a.solver);
    settings::overlay_value(&mut s.feasibility_tol, a.feasibility_tol);
    let ck_path = require(&s.checkpoint, "checkpoint")?.clone();
    let case = require(&s.case, "case")?.clone();
    if !(s.feasibility_tol >= 0.0) {
        return Err(usage("--feasibility-tol must be non-negative"));
    }
    let checkpoint = Checkpoint::load(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
    s.seed.get_or_insert(checkpoint.seed);
    if let Some(out) = &s.out {
        settings::echo(&s, out)?;
    }

    let net = network(&case)?;
    let data = dataset(
        &net,
        s.data.as_deref(),
        s.samples,
        s.seed.unwrap_or(checkpoint.seed),
        s.split_ratio,
    )?;
    let samples = match s.split {
        Split::Train => data.train(),
        Split::Val => data.val(),
        Split::Test => data.test(),
        Split::All => &data.samples[..],
    };
    let opf = OpfModel::new(Arc::new(net));
    let options = EvalOptions {
        pf: PfOptions {
            tol: s.pf_tol,
            max_iter: None,
        },
        feasibility_tol: s.feasibility_tol,
        ..EvalOptions::default()
    };
    let mut report = evaluate(&checkpoint, &opf, samples, s.solver, options).context("evaluation")?;
    report.label = s.label.clone().unwrap_or_else(|| default_label(&ck_path, s.solver));
    report.config = serde_json::to_value(&s).context("serializing the config")?;

    if let Some(csv_path) = &s.csv {
        write_csv(csv_path, &MetricsReport::table_header(), &[report.table_row()])?;
    }
    match &s.out {
        Some(out) => {
            std::fs::write(out, serde_json::to_string(&report).context("serializing the report")? + "\n")
                .with_context(|| format!("writing {}", out.display()))?;
            report.records.clear();
            print_json(&report)?;
        }
        None => print_json(&report)?,
    }
    Ok(())
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn default_label(checkpoint: &Path, solver: SolverKind) -> String {
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    format!("{stem}-{solver}")
}

fn report(a: ReportArgs) -> Result<(), CliError> {
    let mut s: ReportSettings = settings::load(a.config.as_deref())?;
    if !a.inputs.is_empty() {
        s.inputs = a.inputs;
    }
    settings::overlay(&mut s.out, a.out);
    if s.inputs.is_empty() {
        return Err(usage("no report files given"));
    }
    if let Some(out) = &s.out {
        settings::echo(&s, out)?;
    }
    let mut reports = Vec::with_capacity(s.inputs.len());
    for path in &s.inputs {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut r: MetricsReport =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if r.label.is_empty() {
            r.label = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        }
        reports.push(r);
    }
    let header = MetricsReport::table_header();
    let rows: Vec<Vec<String>> = reports.iter().map(MetricsReport::table_row).collect();
    if let Some(out) = &s.out {
        write_csv(out, &header, &rows)?;
    }
    let table: Vec<serde_json::Map<String, serde_json::Value>> = rows
        .iter()
        .map(|row| {
            header
                .iter()
                .cloned()
                .zip(row.iter().map(|v| serde_json::Value::String(v.clone())))
                .collect()
        })
        .collect();
    print_json(&json!({ "out": s.out, "rows": table }))?;
    Ok(())
}
