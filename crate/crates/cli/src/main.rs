mod output;
mod seeds;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use acpg_core::config::parse_config;
use acpg_core::etf::{generate_etf, EtfMatrix};
use acpg_core::lpm::{
    default_learning_rate, kkt_check, solve_projected_ascent, theorem1_residual, KktReport, LpmProblem,
};
use acpg_core::metrics::{activation_set_from_records, collapse_report, ActivationRecord, LabelSource};
use acpg_core::net::{Checkpoint, PolicyNet};
use acpg_core::pg::{activation_dump, run_experiment_with, PgError, RunArtifact};
use acpg_core::sweep::{aggregate_cell, run_parallel, sweep};
use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};
use serde::Serialize;

use crate::output::{write_json, write_metrics_csv, write_sweep_csv, RunFile, RunFiles};

#[derive(Parser)]
#[command(name = "acpg", version, about = "Simplex-ETF action heads for policy gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scaled simplex ETF and write it as JSON.
    EtfGen(EtfGenArgs),
    /// Train one run per seed.
    Train(TrainArgs),
    /// Baseline vs ACPG over seeds and an optional epsilon grid.
    Sweep(SweepArgs),
    /// Collapse metrics of an activation dump.
    Metrics(MetricsArgs),
    /// Solve the layer-peeled model and check its closed-form optimum.
    LpmVerify(LpmArgs),
}

#[derive(Args)]
struct EtfGenArgs {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    energy: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// `a..b`, `a..=b` or `s1,s2,...`; defaults to the config's seed.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seeds: String,
    /// Comma-separated epsilon grid; defaults to the config's epsilon.
    #[arg(long)]
    epsilons: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct MetricsArgs {
    /// JSON lines of `{state_id, class_k, h}`.
    #[arg(long)]
    activations: PathBuf,
    /// Frame used as the action selection layer.
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    etf: Option<PathBuf>,
    /// Checkpoint whose head is the action selection layer.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    epoch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LpmArgs {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    eh: f64,
    #[arg(long, default_value_t = 1.0)]
    ew: f64,
    /// Comma-separated class sizes, one per class; defaults to one each.
    #[arg(long)]
    imbalance: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50_000)]
    iters: usize,
    /// Defaults to `0.1 / sqrt(E_W)`.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

type CliResult = Result<ExitCode, String>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ACPG_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::EtfGen(a) => etf_gen(a),
        Command::Train(a) => train(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Metrics(a) => metrics(a),
        Command::LpmVerify(a) => lpm_verify(a),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            error!("{msg}");
            ExitCode::from(2)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))
}

fn etf_gen(a: EtfGenArgs) -> CliResult {
    let etf = generate_etf(a.k, a.d, a.energy, a.seed).map_err(|e| e.to_string())?;
    std::fs::write(&a.out, etf.to_json()).map_err(|e| format!("cannot write {}: {e}", a.out.display()))?;
    info!("wrote {}x{} frame (energy {}) to {}", a.k, a.d, a.energy, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn persist_run(dir: &Path, artifact: &RunArtifact, error: Option<&PgError>) -> Result<(), String> {
    create_dir(dir)?;
    let files = RunFiles::default();
    write_metrics_csv(&dir.join(&files.metrics), &artifact.rows)?;
    write_json(&dir.join(&files.checkpoint), &artifact.checkpoint)?;
    let net = PolicyNet::from_checkpoint(&artifact.checkpoint).map_err(|e| e.to_string())?;
    let dumped = match (activation_dump(&net, &artifact.config, artifact.config.seed), &files.activations) {
        (Ok((records, _)), Some(name)) => {
            output::write_jsonl(&dir.join(name), &records)?;
            true
        }
        (Ok(_), None) => false,
        (Err(e), _) => {
            warn!("no activation dump for {}: {e}", dir.display());
            false
        }
    };
    let run = RunFile::new(artifact, files, dumped, error.map(|e| e.to_string()));
    write_json(&dir.join("run.json"), &run)
}

fn train(a: TrainArgs) -> CliResult {
    let config = parse_config(&a.config).map_err(|e| e.to_string())?;
    let seeds = match &a.seeds {
        Some(s) => seeds::parse_seeds(s)?,
        None => vec![config.seed],
    };
    create_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &config)?;
    let configs: Vec<_> = seeds
        .iter()
        .map(|&seed| acpg_core::config::TrainConfig { seed, ..config.clone() })
        .collect();
    let results = run_parallel(configs, a.jobs, |c| {
        let seed = c.seed;
        run_experiment_with(c, &mut |row| {
            info!(
                "seed {seed} epoch {} reward {:.2} +- {:.2}",
                row.epoch, row.reward_mean, row.reward_std
            )
        })
    });

    let mut summaries = Vec::new();
    let mut failed = 0;
    for (seed, result) in seeds.iter().zip(results) {
        let dir = a.out.join(format!("seed-{seed}"));
        match result {
            Ok(artifact) => {
                info!(
                    "seed {seed}: best {} final {} stop {}{}",
                    artifact.summary.best,
                    artifact.summary.final_reward,
                    artifact.summary.stop,
                    if artifact.summary.stop_reached { "" } else { " (threshold not reached)" }
                );
                persist_run(&dir, &artifact, None)?;
                summaries.push(artifact.summary);
            }
            Err(PgError::Aborted { epoch, source, partial }) => {
                error!("seed {seed} aborted in epoch {epoch}: {source}");
                persist_run(&dir, &partial, Some(&source))?;
                failed += 1;
            }
            Err(e) => {
                error!("seed {seed} failed: {e}");
                failed += 1;
            }
        }
    }
    let cell = aggregate_cell(config.acpg, config.epsilon, &summaries, failed);
    write_json(&a.out.join("summary.json"), &output::Versioned::new(&cell))?;
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn run_sweep(a: SweepArgs) -> CliResult {
    let config = parse_config(&a.config).map_err(|e| e.to_string())?;
    let seeds = seeds::parse_seeds(&a.seeds)?;
    let eps = a.epsilons.as_deref().map(seeds::parse_floats).transpose()?;
    let report = sweep(&config, &seeds, eps.as_deref(), a.jobs).map_err(|e| e.to_string())?;
    create_dir(&a.out)?;
    write_json(&a.out.join("config.json"), &config)?;
    write_sweep_csv(&a.out.join("sweep.csv"), &report.cells)?;
    write_json(&a.out.join("sweep.json"), &output::Versioned::new(&report))?;
    for f in &report.failures {
        error!("cell acpg={} epsilon={} seed {} failed: {}", f.acpg, f.epsilon, f.seed, f.error);
    }
    for c in &report.cells {
        info!(
            "acpg={} epsilon={}: best {:.2}+-{:.2} final {:.2}+-{:.2} stop {:.1}+-{:.1} ({} runs, {} failed)",
            c.acpg, c.epsilon, c.best_mean, c.best_std, c.final_mean, c.final_std, c.stop_mean, c.stop_std, c.runs, c.failures
        );
    }
    Ok(if report.complete() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn metrics(a: MetricsArgs) -> CliResult {
    let text = std::fs::read_to_string(&a.activations)
        .map_err(|e| format!("cannot read {}: {e}", a.activations.display()))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<ActivationRecord>(l)
                .map_err(|e| format!("{} line {}: {e}", a.activations.display(), i + 1))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let head = match (&a.etf, &a.checkpoint) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            EtfMatrix::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))?.as_head()
        }
        (None, Some(path)) => {
            let ck: Checkpoint = read_json(path)?;
            PolicyNet::from_checkpoint(&ck).map_err(|e| e.to_string())?.head().weights.clone()
        }
        (None, None) => unreachable!("clap requires one head source"),
    };
    let set = activation_set_from_records(&records, Some(head.nrows())).map_err(|e| e.to_string())?;
    let report = collapse_report(&set, &head, a.epoch, LabelSource::Provided, false).map_err(|e| e.to_string())?;
    write_json(&a.out, &output::Versioned::new(&report))?;
    info!(
        "equinorm_w {:.3e} equiang_std_h {:.3e} maxangle_h {:.3e} within_var {:.3e} self_duality {:.6}",
        report.equinorm_w, report.equiang_std_h, report.maxangle_h, report.within_var, report.self_duality
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct LpmReport {
    k: usize,
    d: usize,
    e_h: f64,
    e_w: f64,
    class_sizes: Vec<usize>,
    lr: f64,
    max_iterations: usize,
    iterations: Vec<usize>,
    converged_states: usize,
    objective: f64,
    objective_closed_form: f64,
    theorem1_residual: f64,
    tolerance: f64,
    passed: bool,
    kkt: Vec<KktReport>,
}

fn lpm_verify(a: LpmArgs) -> CliResult {
    let sizes = match &a.imbalance {
        Some(s) => s
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("--imbalance `{p}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![1; a.k],
    };
    let frame = generate_etf(a.k, a.d, a.ew, a.seed).map_err(|e| e.to_string())?;
    let mut p = LpmProblem::new(frame.clone(), &sizes, a.eh).map_err(|e| e.to_string())?;
    let closed = p.closed_form();
    let mut at_optimum = p.clone();
    at_optimum.set_activations(closed.clone());
    p.randomize(a.seed);
    let lr = a.lr.unwrap_or_else(|| default_learning_rate(a.ew));
    let ascent = solve_projected_ascent(&mut p, lr, a.iters).map_err(|e| e.to_string())?;
    let residual = theorem1_residual(p.activations(), &p);
    let tolerance = 1e-3 * (a.eh * a.ew).sqrt();
    let kkt = (0..a.k)
        .map(|k| kkt_check(&(frame.column(k) * (a.eh / a.ew).sqrt()), &p, k))
        .collect();
    let report = LpmReport {
        k: a.k,
        d: a.d,
        e_h: a.eh,
        e_w: a.ew,
        class_sizes: sizes,
        lr,
        max_iterations: a.iters,
        iterations: ascent.iterations,
        converged_states: ascent.converged,
        objective: ascent.objective,
        objective_closed_form: at_optimum.objective(),
        theorem1_residual: residual,
        tolerance,
        passed: residual <= tolerance,
        kkt,
    };
    write_json(&a.out, &output::Versioned::new(&report))?;
    info!(
        "residual {:.3e} (tolerance {:.3e}), {} of {} states converged",
        residual,
        tolerance,
        report.converged_states,
        report.iterations.len()
    );
    Ok(ExitCode::SUCCESS)
}
