//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export returns a JSON string. The `*_report` functions hold the logic
//! and are plain Rust so they can be tested natively.

use acpg_core::config::{Algo, TrainConfig};
use acpg_core::envs::EnvName;
use acpg_core::etf::{generate_etf, EtfMatrix};
use acpg_core::lpm::{default_learning_rate, solve_projected_ascent, theorem1_residual, LpmProblem};
use acpg_core::pg::run_experiment;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct EtfView {
    pub k: usize,
    pub d: usize,
    pub energy: f64,
    pub gram: Vec<Vec<f64>>,
    pub norms: Vec<f64>,
    pub min_cosine: f64,
    pub max_cosine: f64,
    pub target_cosine: f64,
    pub column_sum_norm: f64,
    /// Planar embedding that preserves the Gram matrix as far as two
    /// dimensions allow.
    pub points: Vec<[f64; 2]>,
}

/// Two leading principal coordinates of a Gram matrix.
fn planar(gram: &DMatrix<f64>) -> Vec<[f64; 2]> {
    let eig = SymmetricEigen::new(gram.clone());
    let mut order: Vec<usize> = (0..gram.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let coord = |axis: usize, i: usize| {
        order
            .get(axis)
            .map(|&j| eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt())
            .unwrap_or(0.0)
    };
    (0..gram.nrows()).map(|i| [coord(0, i), coord(1, i)]).collect()
}

pub fn etf_report(k: usize, d: usize, energy: f64, seed: u64) -> Result<EtfView, String> {
    let etf = generate_etf(k, d, energy, seed).map_err(|e| e.to_string())?;
    let g = etf.gram();
    let norms: Vec<f64> = (0..k).map(|i| g[(i, i)].sqrt()).collect();
    let cosines = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).map(|(i, j)| g[(i, j)] / (norms[i] * norms[j]));
    let (min_cosine, max_cosine) = cosines.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c), hi.max(c)));
    Ok(EtfView {
        k,
        d,
        energy,
        gram: g.row_iter().map(|r| r.iter().copied().collect()).collect(),
        norms,
        min_cosine,
        max_cosine,
        target_cosine: -1.0 / (k as f64 - 1.0),
        column_sum_norm: etf.verify_zero_sum(),
        points: planar(&g),
    })
}

#[derive(Debug, Serialize)]
pub struct LpmTrajectory {
    pub frame: Vec<[f64; 2]>,
    pub radius: f64,
    pub classes: Vec<usize>,
    /// `paths[s]` is the recorded positions of state `s`.
    pub paths: Vec<Vec<[f64; 2]>>,
    pub objective: Vec<f64>,
    pub residual: f64,
}

fn as_point(v: &nalgebra::DVector<f64>) -> [f64; 2] {
    [v[0], v[1]]
}

/// Projected ascent in the plane (`K` of 2 or 3), recording every
/// `record_every` iterations.
pub fn lpm_report(
    k: usize,
    per_class: usize,
    e_h: f64,
    e_w: f64,
    seed: u64,
    iterations: usize,
    record_every: usize,
) -> Result<LpmTrajectory, String> {
    if !(2..=3).contains(&k) {
        return Err(format!("the planar view needs K = 2 or 3, got {k}"));
    }
    let record_every = record_every.max(1);
    let frame: EtfMatrix = generate_etf(k, 2, e_w, seed).map_err(|e| e.to_string())?;
    let mut p = LpmProblem::new(frame.clone(), &vec![per_class.max(1); k], e_h).map_err(|e| e.to_string())?;
    p.randomize(seed);
    // Start from a visible spread rather than the solver's tiny default.
    let spread: Vec<_> = p.activations().iter().map(|h| h * 40.0).collect();
    p.set_activations(spread);
    let lr = default_learning_rate(e_w);
    let mut paths: Vec<Vec<[f64; 2]>> = p.activations().iter().map(|h| vec![as_point(h)]).collect();
    let mut objective = vec![p.objective()];
    let mut done = 0;
    while done < iterations {
        let chunk = record_every.min(iterations - done);
        solve_projected_ascent(&mut p, lr, chunk).map_err(|e| e.to_string())?;
        done += chunk;
        for (path, h) in paths.iter_mut().zip(p.activations()) {
            path.push(as_point(h));
        }
        objective.push(p.objective());
    }
    Ok(LpmTrajectory {
        frame: (0..k).map(|i| as_point(&frame.column(i))).collect(),
        radius: e_h.sqrt(),
        classes: p.states().iter().map(|s| s.class).collect(),
        residual: theorem1_residual(p.activations(), &p),
        paths,
        objective,
    })
}

#[derive(Debug, Serialize)]
pub struct EpochPoint {
    pub epoch: usize,
    pub reward: f64,
    pub equinorm_w: Option<f64>,
    pub equiang_std_h: Option<f64>,
    pub maxangle_h: Option<f64>,
    pub within_var: Option<f64>,
}

/// Short REINFORCE run on the gridworld with balanced batches.
pub fn gridworld_report(acpg: bool, epochs: usize, seed: u64) -> Result<Vec<EpochPoint>, String> {
    let mut c = TrainConfig::defaults(Algo::Reinforce, EnvName::Cliff);
    c.acpg = acpg;
    c.epochs = epochs.max(1);
    c.seed = seed;
    c.hidden = vec![32, 32];
    c.steps_per_epoch = 500;
    c.balanced_per_class = Some(4);
    let a = run_experiment(&c).map_err(|e| e.to_string())?;
    Ok(a.rows
        .iter()
        .map(|r| EpochPoint {
            epoch: r.epoch,
            reward: r.reward_mean,
            equinorm_w: r.collapse.as_ref().map(|c| c.equinorm_w),
            equiang_std_h: r.collapse.as_ref().map(|c| c.equiang_std_h),
            maxangle_h: r.collapse.as_ref().map(|c| c.maxangle_h),
            within_var: r.collapse.as_ref().map(|c| c.within_var),
        })
        .collect())
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn etf(k: usize, d: usize, energy: f64, seed: u32) -> Result<String, JsError> {
    to_js(etf_report(k, d, energy, seed as u64))
}

#[wasm_bindgen]
pub fn lpm_ascent(k: usize, per_class: usize, e_h: f64, e_w: f64, seed: u32, iterations: usize) -> Result<String, JsError> {
    to_js(lpm_report(k, per_class, e_h, e_w, seed as u64, iterations, (iterations / 100).max(1)))
}

#[wasm_bindgen]
pub fn gridworld(acpg: bool, epochs: usize, seed: u32) -> Result<String, JsError> {
    to_js(gridworld_report(acpg, epochs, seed as u64))
}
