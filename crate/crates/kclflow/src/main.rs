//! `kclflow` command-line entry point: import, generate, solve, project,
//! train, eval, and the end-to-end repro pipeline. Every command writes a
//! run manifest next to its primary output and is deterministic given
//! identical inputs and seeds.

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kclflow::acpf::{branch_flows, nr_solve, FlowSet, PfInputs, SolveError};
use kclflow::case::{grid_to_json, load_grid, lower_case, parse_case_text, CaseError};
use kclflow::net::NetConfig;
use kclflow::projection::{
    build_system, kcl_residual, project_global, project_kaczmarz, Ordering, ProjectionError,
};
use kclflow::scenario::{
    make_dataset, split_dataset, Dataset, DatasetError, Regime, SamplingConfig,
};
use kclflow::train::{
    evaluate_checkpoint, train, Checkpoint, EvalReport, RunMetrics, TrainConfig, TrainError,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

const CASE14: &str = include_str!("../fixtures/case14.m");
const CASE118: &str = include_str!("../fixtures/case118.m");

#[derive(Parser)]
#[command(name = "kclflow", version, about = "Power-flow surrogate toolkit with hard KCL enforcement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a MATPOWER-style case file to the canonical grid JSON.
    Import(ImportArgs),
    /// Sample scenarios, solve them with the Newton-Raphson oracle, and
    /// write a JSONL dataset.
    Generate(GenerateArgs),
    /// Solve the nominal power flow of a grid.
    Solve(SolveArgs),
    /// Project a flow vector onto the KCL constraint set.
    Project(ProjectArgs),
    /// Train the surrogate on an N-regime dataset.
    Train(TrainArgs),
    /// Evaluate on a test dataset, retraining per run when runs > 1.
    Eval(EvalArgs),
    /// Run the full desk-scale experiment and emit a summary table.
    Repro(ReproArgs),
}

#[derive(Args)]
struct ImportArgs {
    /// MATPOWER case file.
    #[arg(long)]
    case: PathBuf,
    /// Output grid JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    /// Grid JSON or case file.
    #[arg(long)]
    grid: PathBuf,
    /// Number of scenarios to generate.
    #[arg(long, default_value_t = 2000)]
    count: usize,
    /// Sampling regime: n (base topology) or n-1 (single-branch outages).
    #[arg(long, value_enum, default_value_t = RegimeArg::N)]
    regime: RegimeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Std-dev of the nominal perturbations, p.u.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    /// Train/val/test fractions, e.g. 0.6,0.2,0.2; omit for an untagged
    /// dataset (evaluation-only).
    #[arg(long)]
    split: Option<String>,
    /// Worker threads for generation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum RegimeArg {
    N,
    #[value(name = "n-1")]
    N1,
}

impl From<RegimeArg> for Regime {
    fn from(r: RegimeArg) -> Regime {
        match r {
            RegimeArg::N => Regime::N,
            RegimeArg::N1 => Regime::N1,
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 20)]
    max_iter: usize,
    /// Output solution JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProjectArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Input JSON: {"net_p": [...], "net_q": [...], "flows": [...]}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Global)]
    method: MethodArg,
    /// Kaczmarz sweep budget.
    #[arg(long, default_value_t = 500)]
    sweeps: usize,
    /// Kaczmarz early-stop tolerance on the infinity-norm residual.
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, value_enum, default_value_t = OrderingArg::Fixed)]
    ordering: OrderingArg,
    /// Shuffle seed for the randomized ordering.
    #[arg(long, default_value_t = 0)]
    ordering_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Global,
    Kaczmarz,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum OrderingArg {
    Fixed,
    Randomized,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Training dataset (JSONL with split tags, regime N).
    #[arg(long)]
    data: PathBuf,
    /// Optional key = value config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Ablation: drop the terminal projection layer.
    #[arg(long)]
    no_projection: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Training-log JSON path (default: <out>.log.json).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    grid: PathBuf,
    /// Test dataset (its test split, or all scenarios when untagged).
    #[arg(long)]
    data: PathBuf,
    /// Existing checkpoint; used when runs = 1.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Training dataset for the retrain-per-seed protocol (runs > 1).
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    no_projection: bool,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    /// Report JSON path.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    /// Working directory for datasets and the summary.
    #[arg(long)]
    workdir: PathBuf,
    #[arg(long, value_enum, default_value_t = ScaleArg::Desk)]
    scale: ScaleArg,
    /// Comma-separated grids: ieee14,ieee118.
    #[arg(long, default_value = "ieee14,ieee118")]
    grids: String,
    /// Override the N-scenario count.
    #[arg(long)]
    count: Option<usize>,
    /// Override the N-1 scenario count.
    #[arg(long)]
    n1_count: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

// ---------------------------------------------------------------------------
// manifest plumbing

#[derive(Serialize)]
struct HashedPath {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    tool_version: &'static str,
    command: String,
    config: serde_json::Value,
    inputs: Vec<HashedPath>,
    seeds: Vec<u64>,
    artifacts: Vec<HashedPath>,
    duration_secs: f64,
}

impl RunManifest {
    fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            seeds: Vec::new(),
            artifacts: Vec::new(),
            duration_secs: 0.0,
        }
    }

    fn record_input(&mut self, path: &Path) -> anyhow::Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(HashedPath { path: path.display().to_string(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    fn write_artifact(&mut self, path: &Path, content: &str) -> anyhow::Result<()> {
        std::fs::write(path, content).with_context(|| format!("writing {}", path.display()))?;
        self.artifacts.push(HashedPath {
            path: path.display().to_string(),
            sha256: sha256_hex(content.as_bytes()),
        });
        Ok(())
    }

    /// Written alongside the primary output as `<out>.manifest.json`.
    fn finish(mut self, primary_out: &Path, started: Instant) -> anyhow::Result<()> {
        self.duration_secs = started.elapsed().as_secs_f64();
        let path = manifest_path(primary_out);
        std::fs::write(&path, serde_json::to_string_pretty(&self)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// error -> exit code mapping

fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<SolveError>() {
            return match e {
                SolveError::Diverged { .. } | SolveError::SingularJacobian { .. } => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::NonFiniteLoss { .. } => EXIT_NUMERICAL,
                TrainError::Io(_) | TrainError::Json(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<DatasetError>() {
            return match e {
                DatasetError::TooManyDivergences { .. } => EXIT_NUMERICAL,
                DatasetError::Io(_) | DatasetError::Json(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<ProjectionError>() {
            return match e {
                ProjectionError::SvdFailed(_) => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<CaseError>() {
            return match e {
                CaseError::Io(_) => EXIT_IO,
                _ => EXIT_VALIDATION,
            };
        }
        if cause.downcast_ref::<kclflow::grid::GridError>().is_some() {
            return EXIT_VALIDATION;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_VALIDATION
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Import(a) => cmd_import(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Project(a) => cmd_project(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Repro(a) => cmd_repro(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

// ---------------------------------------------------------------------------
// commands

fn cmd_import(a: ImportArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest =
        RunManifest::new("import", serde_json::json!({"case": a.case, "out": a.out}));
    manifest.record_input(&a.case)?;
    let text = std::fs::read_to_string(&a.case)?;
    let raw = parse_case_text(&text)?;
    let (grid, warnings) = lower_case(&raw)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    manifest.write_artifact(&a.out, &grid_to_json(&grid))?;
    eprintln!(
        "imported {} buses, {} branches (topology {})",
        grid.buses.len(),
        grid.branches.len(),
        &grid.topology_hash()[..12]
    );
    manifest.finish(&a.out, started)
}

fn parse_split(text: &str) -> anyhow::Result<(f64, f64, f64)> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| anyhow!("bad --split {text:?}: {e}"))?;
    if parts.len() != 3 {
        bail!("--split needs exactly three fractions, got {text:?}");
    }
    Ok((parts[0], parts[1], parts[2]))
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new(
        "generate",
        serde_json::json!({
            "grid": a.grid, "count": a.count, "regime": Regime::from(a.regime),
            "seed": a.seed, "sigma": a.sigma, "split": a.split, "workers": a.workers,
        }),
    );
    manifest.record_input(&a.grid)?;
    manifest.seeds.push(a.seed);
    let grid = load_grid(&a.grid)?;
    let sampling = SamplingConfig { sigma: a.sigma, ..SamplingConfig::default() };
    let mut ds = make_dataset(&grid, a.count, a.regime.into(), a.seed, &sampling, a.workers)?;
    if let Some(split) = &a.split {
        ds = split_dataset(&ds, &grid, parse_split(split)?, a.seed)?;
    }
    manifest.write_artifact(&a.out, &ds.to_jsonl()?)?;
    eprintln!("generated {} scenarios", ds.scenarios.len());
    manifest.finish(&a.out, started)
}

#[derive(Serialize)]
struct SolveOutput {
    iterations: usize,
    max_mismatch: f64,
    vm: Vec<f64>,
    va: Vec<f64>,
    p_inj: Vec<f64>,
    q_inj: Vec<f64>,
    flows: FlowSet,
}

fn cmd_solve(a: SolveArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new(
        "solve",
        serde_json::json!({"grid": a.grid, "tol": a.tol, "max_iter": a.max_iter}),
    );
    manifest.record_input(&a.grid)?;
    let grid = load_grid(&a.grid)?;
    let sol = nr_solve(&grid, &PfInputs::nominal(&grid), a.tol, a.max_iter)?;
    let flows = branch_flows(&grid, &sol);
    eprintln!("converged in {} iterations, max mismatch {:.3e}", sol.iterations, sol.max_mismatch);
    let out = SolveOutput {
        iterations: sol.iterations,
        max_mismatch: sol.max_mismatch,
        vm: sol.vm,
        va: sol.va,
        p_inj: sol.p_inj,
        q_inj: sol.q_inj,
        flows,
    };
    manifest.write_artifact(&a.out, &serde_json::to_string_pretty(&out)?)?;
    manifest.finish(&a.out, started)
}

#[derive(Deserialize)]
struct ProjectInput {
    net_p: Vec<f64>,
    net_q: Vec<f64>,
    flows: Vec<f64>,
}

#[derive(Serialize)]
struct ProjectOutput {
    flows: FlowSet,
    residual_inf: f64,
    sweeps_used: Option<usize>,
}

fn cmd_project(a: ProjectArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let mut manifest = RunManifest::new(
        "project",
        serde_json::json!({
            "grid": a.grid, "input": a.input, "method": match a.method {
                MethodArg::Global => "global", MethodArg::Kaczmarz => "kaczmarz" },
            "sweeps": a.sweeps, "tol": a.tol,
            "ordering": match a.ordering { OrderingArg::Fixed => "fixed", OrderingArg::Randomized => "randomized" },
            "ordering_seed": a.ordering_seed,
        }),
    );
    manifest.record_input(&a.grid)?;
    manifest.record_input(&a.input)?;
    let grid = load_grid(&a.grid)?;
    let input: ProjectInput = serde_json::from_str(&std::fs::read_to_string(&a.input)?)?;
    let sys = build_system(&grid, &input.net_p, &input.net_q)?;
    let y = FlowSet(input.flows);
    let (flows, sweeps_used) = match a.method {
        MethodArg::Global => (project_global(&sys, &y)?, None),
        MethodArg::Kaczmarz => {
            let ordering = match a.ordering {
                OrderingArg::Fixed => Ordering::Fixed,
                OrderingArg::Randomized => Ordering::Randomized { seed: a.ordering_seed },
            };
            let (f, used) = project_kaczmarz(&sys, &y, &ordering, a.sweeps, a.tol)?;
            (f, Some(used))
        }
    };
    let residual_inf = kcl_residual(&sys, &flows)?.amax();
    eprintln!("residual {residual_inf:.3e}");
    let out = ProjectOutput { flows, residual_inf, sweeps_used };
    manifest.write_artifact(&a.out, &serde_json::to_string_pretty(&out)?)?;
    manifest.finish(&a.out, started)
}

/// Apply a `key = value` config file, then CLI overrides (flags win).
fn resolve_train_config(
    config: &Option<PathBuf>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
    batch_size: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    grad_clip: Option<f64>,
    no_projection: bool,
    hidden: Option<usize>,
    heads: Option<usize>,
) -> anyhow::Result<(TrainConfig, NetConfig)> {
    let mut cfg = TrainConfig::default();
    let mut net = NetConfig::default();
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected key = value", path.display(), lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || anyhow!("{}:{}: bad value for {key}", path.display(), lineno + 1);
            match key {
                "lr" => cfg.lr = value.parse().map_err(|_| bad())?,
                "weight_decay" => cfg.weight_decay = value.parse().map_err(|_| bad())?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad())?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad())?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "grad_clip" => cfg.grad_clip = Some(value.parse().map_err(|_| bad())?),
                "with_projection" => cfg.with_projection = value.parse().map_err(|_| bad())?,
                "hidden" => net.hidden = value.parse().map_err(|_| bad())?,
                "heads" => net.heads = value.parse().map_err(|_| bad())?,
                "attn_dim" => net.attn_dim = value.parse().map_err(|_| bad())?,
                "leaky_slope" => net.leaky_slope = value.parse().map_err(|_| bad())?,
                _ => bail!("{}:{}: unknown key {key:?}", path.display(), lineno + 1),
            }
        }
    }
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = epochs {
        cfg.epochs = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = grad_clip {
        cfg.grad_clip = Some(v);
    }
    if no_projection {
        cfg.with_projection = false;
    }
    if let Some(v) = hidden {
        net.hidden = v;
    }
    if let Some(v) = heads {
        net.heads = v;
    }
    Ok((cfg, net))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let (cfg, net) = resolve_train_config(
        &a.config,
        a.lr,
        a.weight_decay,
        a.batch_size,
        a.epochs,
        a.seed,
        a.grad_clip,
        a.no_projection,
        a.hidden,
        a.heads,
    )?;
    let mut manifest = RunManifest::new(
        "train",
        serde_json::json!({"grid": a.grid, "data": a.data, "train": cfg, "net": net}),
    );
    manifest.record_input(&a.grid)?;
    manifest.record_input(&a.data)?;
    manifest.seeds.push(cfg.seed);
    let grid = load_grid(&a.grid)?;
    let ds = Dataset::load(&a.data)?;
    let outcome = train(&grid, &ds, &net, &cfg)?;
    if let Some(last) = outcome.log.last() {
        eprintln!(
            "epoch {}: train MSE {:.6e}, val MSE {:.6e}, val L_KCL {:.3e}",
            last.epoch, last.train_mse, last.val_mse, last.val_l_kcl
        );
    }
    manifest.write_artifact(&a.out, &serde_json::to_string(&outcome.checkpoint)?)?;
    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(".log.json");
        a.out.with_file_name(name)
    });
    manifest.write_artifact(&log_path, &serde_json::to_string_pretty(&outcome.log)?)?;
    manifest.finish(&a.out, started)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let (cfg, net) = resolve_train_config(
        &a.config,
        None,
        None,
        None,
        a.epochs,
        None,
        None,
        a.no_projection,
        a.hidden,
        a.heads,
    )?;
    let mut manifest = RunManifest::new(
        "eval",
        serde_json::json!({
            "grid": a.grid, "data": a.data, "ckpt": a.ckpt, "train_data": a.train_data,
            "runs": a.runs, "train": cfg, "net": net,
        }),
    );
    manifest.record_input(&a.grid)?;
    manifest.record_input(&a.data)?;
    let grid = load_grid(&a.grid)?;
    let test_ds = Dataset::load(&a.data)?;

    let report: EvalReport = match (&a.ckpt, &a.train_data) {
        (Some(ckpt_path), None) => {
            if a.runs != 1 {
                bail!("--runs > 1 retrains per seed and needs --train-data");
            }
            manifest.record_input(ckpt_path)?;
            let ckpt = Checkpoint::load(ckpt_path)?;
            let run = evaluate_checkpoint(&grid, &ckpt, &test_ds, cfg.with_projection)?;
            single_run_report(&test_ds, cfg.with_projection, run)
        }
        (None, Some(train_path)) => {
            manifest.record_input(train_path)?;
            let train_ds = Dataset::load(train_path)?;
            manifest.seeds.extend(0..a.runs as u64);
            kclflow::train::evaluate(&grid, &train_ds, &test_ds, &net, &cfg, a.runs)?
        }
        (Some(_), Some(_)) => bail!("--ckpt and --train-data are mutually exclusive"),
        (None, None) => bail!("need --ckpt (score a checkpoint) or --train-data (retrain per run)"),
    };
    eprintln!(
        "MSE {:.6e} ({:.1e}), L_KCL {:.6e} ({:.1e}) over {} run(s)",
        report.mse_mean, report.mse_std, report.kcl_mean, report.kcl_std, report.runs
    );
    manifest.write_artifact(&a.report, &serde_json::to_string_pretty(&report)?)?;
    manifest.finish(&a.report, started)
}

fn single_run_report(ds: &Dataset, with_projection: bool, run: RunMetrics) -> EvalReport {
    EvalReport {
        regime: ds.header.regime,
        with_projection,
        runs: 1,
        mse_mean: run.mse,
        mse_std: 0.0,
        l_p_mean: run.l_p,
        l_p_std: 0.0,
        l_q_mean: run.l_q,
        l_q_std: 0.0,
        kcl_mean: run.kcl_violation,
        kcl_std: 0.0,
        per_run: vec![run],
    }
}

#[derive(Serialize)]
struct SummaryRow {
    grid: String,
    model: String,
    regime: Regime,
    runs: usize,
    mse_mean: f64,
    mse_std: f64,
    kcl_mean: f64,
    kcl_std: f64,
    /// mean (std) at 3 decimals, the tables' cell format
    mse_cell: String,
    kcl_cell: String,
}

#[derive(Serialize)]
struct Summary {
    scale: String,
    rows: Vec<SummaryRow>,
}

fn cell(mean: f64, std: f64) -> String {
    format!("{mean:.3} ({std:.3})")
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_repro(a: ReproArgs) -> anyhow::Result<()> {
    let started = Instant::now();
    let (count, n1_count, epochs, runs) = match a.scale {
        ScaleArg::Desk => (2000, 500, 200, 3),
        ScaleArg::Full => (20000, 5000, 200, 10),
    };
    let count = a.count.unwrap_or(count);
    let n1_count = a.n1_count.unwrap_or(n1_count);
    let epochs = a.epochs.unwrap_or(epochs);
    let runs = a.runs.unwrap_or(runs);
    let mut net = NetConfig::default();
    if let Some(h) = a.hidden {
        net.hidden = h;
    }
    if let Some(k) = a.heads {
        net.heads = k;
    }

    std::fs::create_dir_all(&a.workdir)?;
    let summary_path = a.workdir.join("summary.json");
    let mut manifest = RunManifest::new(
        "repro",
        serde_json::json!({
            "scale": match a.scale { ScaleArg::Desk => "desk", ScaleArg::Full => "full" },
            "grids": a.grids, "count": count, "n1_count": n1_count,
            "epochs": epochs, "runs": runs, "seed": a.seed, "net": net,
        }),
    );
    manifest.seeds.push(a.seed);

    let mut rows = Vec::new();
    for grid_name in a.grids.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let case_text = match grid_name {
            "ieee14" => CASE14,
            "ieee118" => CASE118,
            other => bail!("unknown grid {other:?} (expected ieee14 or ieee118)"),
        };
        let (grid, _) = lower_case(&parse_case_text(case_text)?)?;
        let dir = a.workdir.join(grid_name);
        std::fs::create_dir_all(&dir)?;

        eprintln!("[{grid_name}] generating {count} N + {n1_count} N-1 scenarios");
        let sampling = SamplingConfig::default();
        let n_ds = make_dataset(&grid, count, Regime::N, a.seed, &sampling, a.workers)?;
        let n_ds = split_dataset(&n_ds, &grid, (0.6, 0.2, 0.2), a.seed)?;
        let n1_ds = make_dataset(&grid, n1_count, Regime::N1, a.seed + 1, &sampling, a.workers)?;
        manifest.write_artifact(&dir.join("n.jsonl"), &n_ds.to_jsonl()?)?;
        manifest.write_artifact(&dir.join("n-1.jsonl"), &n1_ds.to_jsonl()?)?;

        for (model, with_projection) in [("kclnet", true), ("ablation", false)] {
            // train each seed once, score on both regimes
            let mut mse = (Vec::new(), Vec::new());
            let mut kcl = (Vec::new(), Vec::new());
            for seed in 0..runs as u64 {
                eprintln!("[{grid_name}] training {model}, seed {seed}, {epochs} epochs");
                let cfg =
                    TrainConfig { epochs, seed, with_projection, ..TrainConfig::default() };
                let outcome = train(&grid, &n_ds, &net, &cfg)?;
                let rn = evaluate_checkpoint(&grid, &outcome.checkpoint, &n_ds, with_projection)?;
                let rc = evaluate_checkpoint(&grid, &outcome.checkpoint, &n1_ds, with_projection)?;
                mse.0.push(rn.mse);
                mse.1.push(rc.mse);
                kcl.0.push(rn.kcl_violation);
                kcl.1.push(rc.kcl_violation);
            }
            for (regime, mses, kcls) in
                [(Regime::N, &mse.0, &kcl.0), (Regime::N1, &mse.1, &kcl.1)]
            {
                let (mse_mean, mse_std) = mean_std(mses);
                let (kcl_mean, kcl_std) = mean_std(kcls);
                rows.push(SummaryRow {
                    grid: grid_name.to_string(),
                    model: model.to_string(),
                    regime,
                    runs,
                    mse_mean,
                    mse_std,
                    kcl_mean,
                    kcl_std,
                    mse_cell: cell(mse_mean, mse_std),
                    kcl_cell: cell(kcl_mean, kcl_std),
                });
            }
        }
    }

    let summary = Summary {
        scale: match a.scale {
            ScaleArg::Desk => "desk".into(),
            ScaleArg::Full => "full".into(),
        },
        rows,
    };
    manifest.write_artifact(&summary_path, &serde_json::to_string_pretty(&summary)?)?;
    for row in &summary.rows {
        eprintln!(
            "{:8} {:8} {:>3}  MSE {}  KCL {}",
            row.grid,
            row.model,
            match row.regime {
                Regime::N => "N",
                Regime::N1 => "N-1",
            },
            row.mse_cell,
            row.kcl_cell
        );
    }
    manifest.finish(&summary_path, started)
}
