//! Result files: CSV time series and schema-versioned JSON.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use acpg_core::config::TrainConfig;
use acpg_core::pg::{EpochRow, RunArtifact, RunSummary, ARTIFACT_SCHEMA};
use acpg_core::sweep::CellSummary;
use serde::Serialize;

pub const SCHEMA: u32 = 1;

/// Wraps any JSON payload with a schema version.
#[derive(Serialize)]
pub struct Versioned<'a, T: Serialize> {
    pub schema: u32,
    #[serde(flatten)]
    pub body: &'a T,
}

impl<'a, T: Serialize> Versioned<'a, T> {
    pub fn new(body: &'a T) -> Self {
        Versioned { schema: SCHEMA, body }
    }
}

/// File names inside a run directory.
#[derive(Debug, Clone, Serialize, serde::Deserialize, PartialEq)]
pub struct RunFiles {
    pub metrics: String,
    pub checkpoint: String,
    pub activations: Option<String>,
}

impl Default for RunFiles {
    fn default() -> Self {
        RunFiles {
            metrics: "metrics.csv".into(),
            checkpoint: "checkpoint.json".into(),
            activations: Some("activations.jsonl".into()),
        }
    }
}

/// `run.json`: the run artifact with the checkpoint stored separately.
#[derive(Serialize)]
pub struct RunFile<'a> {
    pub schema: u32,
    pub config: &'a TrainConfig,
    pub summary: RunSummary,
    pub head_hash_initial: &'a str,
    pub head_hash_final: &'a str,
    pub files: RunFiles,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub rows: &'a [EpochRow],
}

impl<'a> RunFile<'a> {
    pub fn new(a: &'a RunArtifact, mut files: RunFiles, dumped: bool, error: Option<String>) -> Self {
        if !dumped {
            files.activations = None;
        }
        RunFile {
            schema: ARTIFACT_SCHEMA,
            config: &a.config,
            summary: a.summary,
            head_hash_initial: &a.head_hash_initial,
            head_hash_final: &a.head_hash_final,
            files,
            error,
            rows: &a.rows,
        }
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, text + "\n").map_err(|e| format!("cannot write {}: {e}", path.display()))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), String> {
    let io = |e: std::io::Error| format!("cannot write {}: {e}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| e.to_string())?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Serialize)]
struct MetricsRow {
    epoch: usize,
    reward_mean: f64,
    reward_std: f64,
    stop_flag: u8,
    equinorm: Option<f64>,
    equiang_std: Option<f64>,
    maxangle: Option<f64>,
    withinvar: Option<f64>,
    selfdual: Option<f64>,
    equiang_std_w: Option<f64>,
    maxangle_w: Option<f64>,
    episodes: usize,
    steps: usize,
    loss: f64,
    kl_aborts: usize,
}

/// One line per epoch; collapse columns are empty when no report exists.
pub fn write_metrics_csv(path: &Path, rows: &[EpochRow]) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    for r in rows {
        let c = r.collapse.as_ref();
        w.serialize(MetricsRow {
            epoch: r.epoch,
            reward_mean: r.reward_mean,
            reward_std: r.reward_std,
            stop_flag: u8::from(r.stop_flag),
            equinorm: c.map(|c| c.equinorm_w),
            equiang_std: c.map(|c| c.equiang_std_h),
            maxangle: c.map(|c| c.maxangle_h),
            withinvar: c.map(|c| c.within_var),
            selfdual: c.map(|c| c.self_duality),
            equiang_std_w: c.map(|c| c.equiang_std_w),
            maxangle_w: c.map(|c| c.maxangle_w),
            episodes: r.episodes,
            steps: r.steps,
            loss: r.loss,
            kl_aborts: r.kl_aborts,
        })
        .map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}

pub fn write_sweep_csv(path: &Path, cells: &[CellSummary]) -> Result<(), String> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    for c in cells {
        w.serialize(c).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| e.to_string())
}
