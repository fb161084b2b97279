//! Layer-peeled model with a frozen simplex-ETF head.
//!
//! The backbone is abstracted away and the per-state activations `h_s` are
//! free variables constrained to `||h_s||^2 <= E_H`. The objective
//!
//! ```text
//! J(H) = sum_s d(s) * Psi(s) * log softmax(W* h_s)[k(s)]
//! ```
//!
//! separates over states. Its maximizer puts every `h_s` at
//! `sqrt(E_H / E_W) * w_{k(s)}`, whatever the class sizes or positive state
//! weights are; this module solves the problem numerically and checks that
//! closed form and its KKT multiplier.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::etf::EtfMatrix;

/// Projected-gradient norm at which the ascent stops early.
pub const GRADIENT_TOL: f64 = 1e-10;
/// Consecutive objective decreases tolerated before declaring divergence.
pub const DIVERGENCE_PATIENCE: usize = 100;
/// Initial activations are drawn with norm `INIT_RADIUS * sqrt(E_H)`.
pub const INIT_RADIUS: f64 = 1e-2;

#[derive(Debug, Error, PartialEq)]
pub enum LpmError {
    #[error("activation budget E_H must be positive and finite, got {0}")]
    Budget(f64),
    #[error("expected {expected} class sizes, got {got}")]
    ClassSizes { expected: usize, got: usize },
    #[error("state {state}: weight and return must be positive (d = {weight}, psi = {psi})")]
    NonPositiveWeight { state: usize, weight: f64, psi: f64 },
    #[error("learning rate must be positive, got {0}")]
    LearningRate(f64),
    #[error("objective of state {state} fell for {patience} consecutive iterations (at iteration {iteration})")]
    Divergence {
        state: usize,
        iteration: usize,
        patience: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LpmState {
    pub class: usize,
    /// Stationary weight `d(s)`.
    pub weight: f64,
    /// Return `Psi(s)`.
    pub psi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpmProblem {
    frame: EtfMatrix,
    head: DMatrix<f64>,
    states: Vec<LpmState>,
    e_h: f64,
    activations: Vec<DVector<f64>>,
}

impl LpmProblem {
    /// Problem with `class_sizes[k]` states in class `k`, unit weights and
    /// returns, and all activations at the origin.
    pub fn new(frame: EtfMatrix, class_sizes: &[usize], e_h: f64) -> Result<Self, LpmError> {
        if class_sizes.len() != frame.k() {
            return Err(LpmError::ClassSizes {
                expected: frame.k(),
                got: class_sizes.len(),
            });
        }
        let states = class_sizes
            .iter()
            .enumerate()
            .flat_map(|(k, &n)| {
                std::iter::repeat_n(
                    LpmState {
                        class: k,
                        weight: 1.0,
                        psi: 1.0,
                    },
                    n,
                )
            })
            .collect();
        Self::with_states(frame, states, e_h)
    }

    pub fn with_states(frame: EtfMatrix, states: Vec<LpmState>, e_h: f64) -> Result<Self, LpmError> {
        if !(e_h > 0.0 && e_h.is_finite()) {
            return Err(LpmError::Budget(e_h));
        }
        for (i, s) in states.iter().enumerate() {
            if !(s.weight > 0.0 && s.psi > 0.0) || s.class >= frame.k() {
                return Err(LpmError::NonPositiveWeight {
                    state: i,
                    weight: s.weight,
                    psi: s.psi,
                });
            }
        }
        let d = frame.d();
        Ok(LpmProblem {
            head: frame.as_head(),
            activations: vec![DVector::zeros(d); states.len()],
            frame,
            states,
            e_h,
        })
    }

    pub fn frame(&self) -> &EtfMatrix {
        &self.frame
    }

    pub fn states(&self) -> &[LpmState] {
        &self.states
    }

    pub fn states_mut(&mut self) -> &mut [LpmState] {
        &mut self.states
    }

    pub fn e_h(&self) -> f64 {
        self.e_h
    }

    pub fn e_w(&self) -> f64 {
        self.frame.energy()
    }

    pub fn activations(&self) -> &[DVector<f64>] {
        &self.activations
    }

    /// Replaces the activations; each is projected onto the feasible ball.
    pub fn set_activations(&mut self, hs: Vec<DVector<f64>>) {
        assert_eq!(hs.len(), self.states.len(), "one activation per state");
        self.activations = hs.into_iter().map(|h| project(h, self.e_h)).collect();
    }

    /// Random Gaussian directions with norm `INIT_RADIUS * sqrt(E_H)`.
    pub fn randomize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.frame.d();
        let radius = INIT_RADIUS * self.e_h.sqrt();
        for h in &mut self.activations {
            let g: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            *h = &g * (radius / g.norm());
        }
    }

    /// `sqrt(E_H / E_W) * w_{k(s)}` for every state.
    pub fn closed_form(&self) -> Vec<DVector<f64>> {
        let scale = (self.e_h / self.e_w()).sqrt();
        self.states.iter().map(|s| self.frame.column(s.class) * scale).collect()
    }

    pub fn objective(&self) -> f64 {
        lpm_objective(self)
    }

    fn state_term(&self, i: usize, h: &DVector<f64>) -> f64 {
        let s = self.states[i];
        s.weight * s.psi * log_softmax(&(&self.head * h), s.class)
    }

    /// Gradient of state `i`'s term: `d * Psi * W^T (e_k - p)`.
    fn state_gradient(&self, i: usize, h: &DVector<f64>) -> DVector<f64> {
        let s = self.states[i];
        let mut p = softmax(&(&self.head * h));
        p[s.class] -= 1.0;
        self.head.tr_mul(&p) * (-s.weight * s.psi)
    }
}

fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let max = z.max();
    let e = z.map(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

fn log_softmax(z: &DVector<f64>, k: usize) -> f64 {
    let max = z.max();
    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    z[k] - lse
}

/// Euclidean projection onto `{h : ||h||^2 <= e_h}`.
pub fn project(h: DVector<f64>, e_h: f64) -> DVector<f64> {
    let sq = h.norm_squared();
    if sq > e_h {
        let s = (e_h / sq).sqrt();
        h * s
    } else {
        h
    }
}

/// `J(H)` at the problem's current activations.
pub fn lpm_objective(p: &LpmProblem) -> f64 {
    p.activations
        .iter()
        .enumerate()
        .map(|(i, h)| p.state_term(i, h))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AscentReport {
    /// Iterations used by each state before stopping.
    pub iterations: Vec<usize>,
    /// States that met the projected-gradient tolerance.
    pub converged: usize,
    pub objective: f64,
    /// Largest final projected-gradient norm over states.
    pub gradient_norm: f64,
}

/// Projected gradient ascent on `J`, each state independently:
/// `h <- Proj(h + lr * grad)`, stopping a state once its projected-gradient
/// norm `||Proj(h + lr * grad) - h|| / lr` drops below [`GRADIENT_TOL`].
pub fn solve_projected_ascent(p: &mut LpmProblem, lr: f64, iters: usize) -> Result<AscentReport, LpmError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(LpmError::LearningRate(lr));
    }
    let mut iterations = Vec::with_capacity(p.states.len());
    let mut converged = 0;
    let mut worst_grad = 0.0f64;
    for i in 0..p.states.len() {
        let mut h = p.activations[i].clone();
        let mut guard = DivergenceGuard::new(p.state_term(i, &h), DIVERGENCE_PATIENCE);
        let mut used = iters;
        let mut grad_norm = f64::INFINITY;
        for it in 0..iters {
            let g = p.state_gradient(i, &h);
            let next = project(&h + &g * lr, p.e_h);
            grad_norm = (&next - &h).norm() / lr;
            h = next;
            if grad_norm < GRADIENT_TOL {
                used = it + 1;
                converged += 1;
                break;
            }
            if guard.observe(p.state_term(i, &h)) {
                return Err(LpmError::Divergence {
                    state: i,
                    iteration: it,
                    patience: DIVERGENCE_PATIENCE,
                });
            }
        }
        worst_grad = worst_grad.max(grad_norm);
        iterations.push(used);
        p.activations[i] = h;
    }
    Ok(AscentReport {
        iterations,
        converged,
        objective: p.objective(),
        gradient_norm: worst_grad,
    })
}

/// Counts consecutive decreases of a tracked objective.
#[derive(Debug, Clone, Copy)]
struct DivergenceGuard {
    last: f64,
    falling: usize,
    patience: usize,
}

impl DivergenceGuard {
    fn new(start: f64, patience: usize) -> Self {
        DivergenceGuard {
            last: start,
            falling: 0,
            patience,
        }
    }

    /// Records a new value; true once `patience` drops happened in a row.
    fn observe(&mut self, value: f64) -> bool {
        if value < self.last {
            self.falling += 1;
        } else {
            self.falling = 0;
        }
        self.last = value;
        self.falling >= self.patience
    }
}

/// Default step size `0.1 / sqrt(E_W)`.
pub fn default_learning_rate(e_w: f64) -> f64 {
    0.1 / e_w.sqrt()
}

/// Inner products the optimum must attain: `sqrt(E_H E_W) (K/(K-1) delta - 1/(K-1))`.
pub fn target_inner_product(e_h: f64, e_w: f64, k: usize, same_class: bool) -> f64 {
    let kf = k as f64;
    let delta = if same_class { 1.0 } else { 0.0 };
    (e_h * e_w).sqrt() * (kf / (kf - 1.0) * delta - 1.0 / (kf - 1.0))
}

/// Largest deviation of `h_s^T w_k'` from the optimal inner products over
/// every state and class.
pub fn theorem1_residual(hs: &[DVector<f64>], p: &LpmProblem) -> f64 {
    let k = p.frame.k();
    let mut worst = 0.0f64;
    for (h, s) in hs.iter().zip(&p.states) {
        let z = &p.head * h;
        for j in 0..k {
            let target = target_inner_product(p.e_h, p.e_w(), k, j == s.class);
            worst = worst.max((z[j] - target).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// `||sum_{j != k} (w_j - w_k) exp(h^T (w_j - w_k)) + 2 lambda h||`.
    pub stationarity_residual: f64,
    /// Multiplier from the closed form, `(1/2) sqrt(E_W/E_H) A K`.
    pub lambda: f64,
    /// Least-squares multiplier for the given `h`,
    /// `-<grad f, h> / (2 ||h||^2)`; `None` at `h = 0`.
    pub lambda_fit: Option<f64>,
    /// `A = exp(sqrt(E_H/E_W) w_k^T (w_j - w_k))`, averaged over `j != k`.
    pub a: f64,
    /// `max_j A_j - min_j A_j`; zero for an exact frame.
    pub a_spread: f64,
    /// `g(h) = ||h||^2 - E_H`.
    pub constraint: f64,
    pub active: bool,
}

/// KKT conditions of `min_h sum_{j != k} exp(h^T (w_j - w_k))` subject to
/// `||h||^2 <= E_H`, evaluated at `h`.
pub fn kkt_check(h: &DVector<f64>, p: &LpmProblem, k: usize) -> KktReport {
    let frame = &p.frame;
    let kk = frame.k();
    let (e_h, e_w) = (p.e_h, p.e_w());
    let wk = frame.column(k);
    let scale = (e_h / e_w).sqrt();

    let a_values: Vec<f64> = (0..kk)
        .filter(|&j| j != k)
        .map(|j| (scale * wk.dot(&(frame.column(j) - &wk))).exp())
        .collect();
    let a = a_values.iter().sum::<f64>() / a_values.len() as f64;
    let a_spread = a_values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - a_values.iter().copied().fold(f64::INFINITY, f64::min);
    let lambda = 0.5 * (e_w / e_h).sqrt() * a * kk as f64;

    let mut grad_f = DVector::zeros(frame.d());
    for j in (0..kk).filter(|&j| j != k) {
        let diff = frame.column(j) - &wk;
        grad_f += &diff * h.dot(&diff).exp();
    }
    let stationarity_residual = (&grad_f + h * (2.0 * lambda)).norm();
    let hh = h.norm_squared();
    let lambda_fit = (hh > 0.0).then(|| -grad_f.dot(h) / (2.0 * hh));
    let constraint = hh - e_h;
    KktReport {
        stationarity_residual,
        lambda,
        lambda_fit,
        a,
        a_spread,
        constraint,
        active: constraint.abs() <= 1e-9 * e_h.max(1.0),
    }
}

/// `sum_{j != k} exp(h^T (w_j - w_k))`, the quantity the per-state problem
/// minimizes.
pub fn exp_margin_sum(h: &DVector<f64>, frame: &EtfMatrix, k: usize) -> f64 {
    let wk = frame.column(k);
    (0..frame.k())
        .filter(|&j| j != k)
        .map(|j| h.dot(&(frame.column(j) - &wk)).exp())
        .sum()
}

/// Uniform sample from the ball of squared radius `e_h` in `R^d`.
pub fn sample_feasible(d: usize, e_h: f64, rng: &mut ChaCha8Rng) -> DVector<f64> {
    use rand::Rng;
    let g: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
    let r = e_h.sqrt() * rng.random::<f64>().powf(1.0 / d as f64);
    &g * (r / g.norm())
}
