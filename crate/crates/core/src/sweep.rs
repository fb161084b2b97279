//! Multi-seed runs and their aggregation.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::TrainConfig;
use crate::pg::{run_experiment, PgError, RunArtifact, RunSummary};

#[derive(Debug, Error, PartialEq)]
pub enum SweepError {
    #[error("no seeds given")]
    NoSeeds,
    #[error("at least 2 seeds are needed to report a spread, got {0}")]
    TooFewSeeds(usize),
    #[error("epsilon grid is empty")]
    NoEpsilons,
}

/// Runs every config on up to `jobs` worker threads. Results come back in
/// input order.
pub fn run_parallel<T, O, F>(items: Vec<T>, jobs: usize, work: F) -> Vec<O>
where
    T: Sync,
    O: Send,
    F: Fn(&T) -> O + Sync,
{
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<O>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let workers = jobs.clamp(1, items.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = work(item);
                *slots[i].lock().expect("no worker panics while holding a slot") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every item ran"))
        .collect()
}

/// Runs `config` once per seed.
pub fn run_seeds(config: &TrainConfig, seeds: &[u64], jobs: usize) -> Vec<(u64, Result<RunArtifact, PgError>)> {
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .map(|&seed| TrainConfig {
            seed,
            ..config.clone()
        })
        .collect();
    let results = run_parallel(configs, jobs, |c: &TrainConfig| run_experiment(c));
    seeds.iter().copied().zip(results).collect()
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// One row of a sweep table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub acpg: bool,
    pub epsilon: f64,
    pub runs: usize,
    pub failures: usize,
    pub best_mean: f64,
    pub best_std: f64,
    pub final_mean: f64,
    pub final_std: f64,
    pub stop_mean: f64,
    pub stop_std: f64,
    pub stop_median: f64,
    /// Runs whose moving average reached the threshold.
    pub reached: usize,
}

/// Aggregates the summaries of one cell's completed runs.
pub fn aggregate_cell(acpg: bool, epsilon: f64, summaries: &[RunSummary], failures: usize) -> CellSummary {
    let best: Vec<f64> = summaries.iter().map(|s| s.best).collect();
    let fin: Vec<f64> = summaries.iter().map(|s| s.final_reward).collect();
    let stop: Vec<f64> = summaries.iter().map(|s| s.stop as f64).collect();
    let (best_mean, best_std) = mean_std(&best);
    let (final_mean, final_std) = mean_std(&fin);
    let (stop_mean, stop_std) = mean_std(&stop);
    CellSummary {
        acpg,
        epsilon,
        runs: summaries.len(),
        failures,
        best_mean,
        best_std,
        final_mean,
        final_std,
        stop_mean,
        stop_std,
        stop_median: median(&stop),
        reached: summaries.iter().filter(|s| s.stop_reached).count(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub acpg: bool,
    pub epsilon: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub acpg: bool,
    pub epsilon: f64,
    pub seed: u64,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<FailedRun>,
}

impl SweepReport {
    pub fn complete(&self) -> bool {
        self.failures.is_empty()
    }

    /// Rebuilds the cell table from the stored per-run summaries.
    pub fn reaggregate(&self) -> Vec<CellSummary> {
        self.cells
            .iter()
            .map(|c| {
                let runs: Vec<RunSummary> = self
                    .runs
                    .iter()
                    .filter(|r| r.acpg == c.acpg && r.epsilon == c.epsilon)
                    .map(|r| r.summary)
                    .collect();
                aggregate_cell(c.acpg, c.epsilon, &runs, c.failures)
            })
            .collect()
    }
}

/// Baseline and ACPG for every epsilon (the config's own when `epsilons` is
/// `None`) and seed. Failed runs are reported, not fatal.
pub fn sweep(
    config: &TrainConfig,
    seeds: &[u64],
    epsilons: Option<&[f64]>,
    jobs: usize,
) -> Result<SweepReport, SweepError> {
    match seeds.len() {
        0 => return Err(SweepError::NoSeeds),
        1 => return Err(SweepError::TooFewSeeds(1)),
        _ => {}
    }
    let eps: Vec<f64> = match epsilons {
        Some([]) => return Err(SweepError::NoEpsilons),
        Some(e) => e.to_vec(),
        None => vec![config.epsilon],
    };
    let mut cells = Vec::new();
    for acpg in [false, true] {
        for &epsilon in &eps {
            cells.push((acpg, epsilon));
        }
    }
    let work: Vec<(usize, u64, TrainConfig)> = cells
        .iter()
        .enumerate()
        .flat_map(|(ci, &(acpg, epsilon))| {
            seeds.iter().map(move |&seed| {
                (
                    ci,
                    seed,
                    TrainConfig {
                        acpg,
                        epsilon,
                        seed,
                        ..config.clone()
                    },
                )
            })
        })
        .collect();
    let results = run_parallel(work, jobs, |(ci, seed, c): &(usize, u64, TrainConfig)| {
        (*ci, *seed, run_experiment(c).map(|a| a.summary).map_err(|e| e.to_string()))
    });

    let mut report = SweepReport {
        cells: Vec::new(),
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for (ci, &(acpg, epsilon)) in cells.iter().enumerate() {
        let mut ok = Vec::new();
        let mut failed = 0;
        for (_, seed, r) in results.iter().filter(|r| r.0 == ci) {
            match r {
                Ok(s) => {
                    ok.push(*s);
                    report.runs.push(RunRecord {
                        acpg,
                        epsilon,
                        seed: *seed,
                        summary: *s,
                    });
                }
                Err(e) => {
                    failed += 1;
                    report.failures.push(FailedRun {
                        acpg,
                        epsilon,
                        seed: *seed,
                        error: e.clone(),
                    });
                }
            }
        }
        report.cells.push(aggregate_cell(acpg, epsilon, &ok, failed));
    }
    Ok(report)
}
