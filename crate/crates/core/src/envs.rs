//! Discrete-action environments behind a common [`Environment`] contract.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action {action} out of range for {count} actions")]
    InvalidAction { action: usize, count: usize },
    #[error("episode already finished; call reset")]
    EpisodeFinished,
    #[error("the optimal action is tied at state {state} (actions {actions:?})")]
    Tie { state: usize, actions: Vec<usize> },
    #[error("class {class} has {available} samples, {needed} requested")]
    InsufficientSamples {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("unknown environment {0:?}")]
    UnknownEnvironment(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

pub trait Environment {
    fn observation_dim(&self) -> usize;
    fn action_count(&self) -> usize;
    fn max_steps(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Step, EnvError>;
    /// Optimal action of the current state when the environment can name it.
    fn optimal_action(&self) -> Option<usize> {
        None
    }
}

/// Grid directions, in action-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    Up = 0,
    Down = 1,
    Left = 2,
    Right = 3,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Up, Direction::Down, Direction::Left, Direction::Right];

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CliffParams {
    pub reward_step: f64,
    pub reward_exit: f64,
    pub max_steps: usize,
}

impl Default for CliffParams {
    fn default() -> Self {
        CliffParams {
            reward_step: -1.0,
            reward_exit: 10.0,
            max_steps: 50,
        }
    }
}

/// The ideal cliff world: a 2 x 4 grid whose central 2 x 2 block has an exit
/// above its top row and another below its bottom row.
///
/// ```text
///        X  X          <- up exit (cells 8, 9)
///    0  1  2  3
///    4  5  6  7
///       Y  Y          <- down exit (cells 10, 11)
/// ```
///
/// Cells 0..8 are the walkable grid, 8..12 are terminal exit cells, for 12
/// states in total. Each direction is optimal in exactly two grid cells.
#[derive(Debug, Clone)]
pub struct IdealCliffWorld {
    params: CliffParams,
    policy: Option<[Direction; IdealCliffWorld::GRID_CELLS]>,
    cell: usize,
    steps: usize,
    done: bool,
}

impl IdealCliffWorld {
    pub const ROWS: usize = 2;
    pub const COLS: usize = 4;
    pub const GRID_CELLS: usize = 8;
    pub const STATE_COUNT: usize = 12;
    pub const ACTIONS: usize = 4;

    pub fn new(params: CliffParams) -> Self {
        IdealCliffWorld {
            params,
            policy: optimal_policy(&params).ok(),
            cell: 0,
            steps: 0,
            done: false,
        }
    }

    pub fn params(&self) -> CliffParams {
        self.params
    }

    pub fn cell(&self) -> usize {
        self.cell
    }

    /// Places the agent on grid cell `cell`, starting a fresh episode.
    pub fn reset_to(&mut self, cell: usize) -> Vec<f64> {
        assert!(cell < Self::GRID_CELLS, "start cell must be on the grid");
        self.cell = cell;
        self.steps = 0;
        self.done = false;
        Self::observation(cell)
    }

    pub fn observation(cell: usize) -> Vec<f64> {
        let mut obs = vec![0.0; Self::STATE_COUNT];
        obs[cell] = 1.0;
        obs
    }

    pub fn is_exit(cell: usize) -> bool {
        (Self::GRID_CELLS..Self::STATE_COUNT).contains(&cell)
    }

    /// Deterministic move: `(next cell, is exit)`. Walls leave the agent in place.
    pub fn transition(cell: usize, dir: Direction) -> (usize, bool) {
        let (r, c) = (cell / Self::COLS, cell % Self::COLS);
        let central = c == 1 || c == 2;
        match dir {
            Direction::Up if r == 0 && central => (8 + c - 1, true),
            Direction::Up if r == 1 => (cell - Self::COLS, false),
            Direction::Down if r == 1 && central => (10 + c - 1, true),
            Direction::Down if r == 0 => (cell + Self::COLS, false),
            Direction::Left if c > 0 => (cell - 1, false),
            Direction::Right if c + 1 < Self::COLS => (cell + 1, false),
            _ => (cell, false),
        }
    }

    /// Reward of one move from `cell` in `dir` under `params`.
    pub fn reward(params: &CliffParams, cell: usize, dir: Direction) -> (usize, f64, bool) {
        let (next, exit) = Self::transition(cell, dir);
        let r = if exit { params.reward_exit } else { params.reward_step };
        (next, r, exit)
    }
}

impl Environment for IdealCliffWorld {
    fn observation_dim(&self) -> usize {
        Self::STATE_COUNT
    }

    fn action_count(&self) -> usize {
        Self::ACTIONS
    }

    fn max_steps(&self) -> usize {
        self.params.max_steps
    }

    /// Uniformly random start cell on the grid.
    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = rng.random_range(0..Self::GRID_CELLS);
        self.reset_to(cell)
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        let dir = Direction::from_index(action).ok_or(EnvError::InvalidAction {
            action,
            count: Self::ACTIONS,
        })?;
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let (next, reward, exit) = Self::reward(&self.params, self.cell, dir);
        self.cell = next;
        self.steps += 1;
        self.done = exit || self.steps >= self.params.max_steps;
        Ok(Step {
            observation: Self::observation(next),
            reward,
            done: self.done,
        })
    }

    fn optimal_action(&self) -> Option<usize> {
        if Self::is_exit(self.cell) {
            None
        } else {
            self.policy.map(|p| p[self.cell] as usize)
        }
    }
}

/// Optimal state values of the cliff world by value iteration (undiscounted;
/// every policy that reaches an exit terminates).
pub fn cliff_values(params: &CliffParams) -> [f64; IdealCliffWorld::GRID_CELLS] {
    let mut v = [0.0f64; IdealCliffWorld::GRID_CELLS];
    // Values are bounded below by the episode cap.
    for _ in 0..params.max_steps.max(IdealCliffWorld::GRID_CELLS * 4) {
        let mut next = v;
        for (cell, slot) in next.iter_mut().enumerate() {
            *slot = Direction::ALL
                .iter()
                .map(|&d| q_value(params, &v, cell, d))
                .fold(f64::NEG_INFINITY, f64::max);
        }
        let delta = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if delta < 1e-12 {
            break;
        }
    }
    v
}

fn q_value(params: &CliffParams, v: &[f64], cell: usize, dir: Direction) -> f64 {
    let (next, r, exit) = IdealCliffWorld::reward(params, cell, dir);
    if exit {
        r
    } else {
        r + v[next]
    }
}

/// `opt(s)` for every grid cell, from converged value iteration.
pub fn optimal_policy(params: &CliffParams) -> Result<[Direction; IdealCliffWorld::GRID_CELLS], EnvError> {
    let v = cliff_values(params);
    let mut policy = [Direction::Up; IdealCliffWorld::GRID_CELLS];
    for (cell, slot) in policy.iter_mut().enumerate() {
        let qs: Vec<f64> = Direction::ALL.iter().map(|&d| q_value(params, &v, cell, d)).collect();
        let best = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..4).filter(|&a| (qs[a] - best).abs() < 1e-9).collect();
        if winners.len() != 1 {
            return Err(EnvError::Tie {
                state: cell,
                actions: winners,
            });
        }
        *slot = Direction::ALL[winners[0]];
    }
    Ok(policy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Integrator {
    Euler,
    SemiImplicitEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoleParams {
    pub gravity: f64,
    pub mass_cart: f64,
    pub mass_pole: f64,
    /// Half the pole length.
    pub half_length: f64,
    pub force: f64,
    pub tau: f64,
    pub theta_limit: f64,
    pub x_limit: f64,
    pub max_steps: usize,
    pub integrator: Integrator,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        CartPoleParams {
            gravity: 9.8,
            mass_cart: 1.0,
            mass_pole: 0.1,
            half_length: 0.5,
            force: 10.0,
            tau: 0.02,
            theta_limit: 12.0_f64.to_radians(),
            x_limit: 2.4,
            max_steps: 500,
            integrator: Integrator::Euler,
        }
    }
}

/// `[x, x_dot, theta, theta_dot]`, theta measured from upright.
pub type CartPoleState = [f64; 4];

impl CartPoleParams {
    /// Advances the frictionless cart-pole by one step of length `tau` under
    /// horizontal force `force`.
    pub fn integrate(&self, s: CartPoleState, force: f64) -> CartPoleState {
        let [x, x_dot, theta, theta_dot] = s;
        let total = self.mass_cart + self.mass_pole;
        let pml = self.mass_pole * self.half_length;
        let (sin, cos) = theta.sin_cos();
        let temp = (force + pml * theta_dot * theta_dot * sin) / total;
        let theta_acc = (self.gravity * sin - cos * temp)
            / (self.half_length * (4.0 / 3.0 - self.mass_pole * cos * cos / total));
        let x_acc = temp - pml * theta_acc * cos / total;
        match self.integrator {
            Integrator::Euler => [
                x + self.tau * x_dot,
                x_dot + self.tau * x_acc,
                theta + self.tau * theta_dot,
                theta_dot + self.tau * theta_acc,
            ],
            Integrator::SemiImplicitEuler => {
                let x_dot = x_dot + self.tau * x_acc;
                let theta_dot = theta_dot + self.tau * theta_acc;
                [x + self.tau * x_dot, x_dot, theta + self.tau * theta_dot, theta_dot]
            }
        }
    }

    /// Mechanical energy with the pole as a uniform rod of half-length `l`.
    pub fn energy(&self, s: CartPoleState) -> f64 {
        let [_, x_dot, theta, theta_dot] = s;
        let (m, l) = (self.mass_pole, self.half_length);
        let total = self.mass_cart + m;
        0.5 * total * x_dot * x_dot
            + m * l * x_dot * theta_dot * theta.cos()
            + 0.5 * (4.0 / 3.0) * m * l * l * theta_dot * theta_dot
            + m * self.gravity * l * theta.cos()
    }
}

/// Classic cart-pole balancing: +1 per step (including the failing one),
/// two actions pushing left or right.
#[derive(Debug, Clone)]
pub struct CartPole {
    params: CartPoleParams,
    state: CartPoleState,
    steps: usize,
    done: bool,
}

impl CartPole {
    pub fn new(params: CartPoleParams) -> Self {
        CartPole {
            params,
            state: [0.0; 4],
            steps: 0,
            done: true,
        }
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    pub fn params(&self) -> &CartPoleParams {
        &self.params
    }
}

impl Environment for CartPole {
    fn observation_dim(&self) -> usize {
        4
    }

    fn action_count(&self) -> usize {
        2
    }

    fn max_steps(&self) -> usize {
        self.params.max_steps
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
        self.steps = 0;
        self.done = false;
        self.state.to_vec()
    }

    fn step(&mut self, action: usize) -> Result<Step, EnvError> {
        if action >= 2 {
            return Err(EnvError::InvalidAction { action, count: 2 });
        }
        if self.done {
            return Err(EnvError::EpisodeFinished);
        }
        let force = if action == 1 { self.params.force } else { -self.params.force };
        self.state = self.params.integrate(self.state, force);
        self.steps += 1;
        let [x, _, theta, _] = self.state;
        let failed = x.abs() > self.params.x_limit || theta.abs() > self.params.theta_limit;
        self.done = failed || self.steps >= self.params.max_steps;
        Ok(Step {
            observation: self.state.to_vec(),
            reward: 1.0,
            done: self.done,
        })
    }
}

/// One environment interaction, labelled with the optimal action of the
/// state it started from when an oracle exists.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// Return or advantage weighting this sample's log-likelihood.
    pub psi: f64,
    pub log_prob: f64,
    pub label: Option<usize>,
}

/// Column-oriented batch of transitions.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TransitionBatch {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub psi: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub labels: Vec<Option<usize>>,
}

impl TransitionBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, t: &Transition) {
        self.states.push(t.state.clone());
        self.actions.push(t.action);
        self.psi.push(t.psi);
        self.log_probs.push(t.log_prob);
        self.labels.push(t.label);
    }
}

impl FromIterator<Transition> for TransitionBatch {
    fn from_iter<I: IntoIterator<Item = Transition>>(iter: I) -> Self {
        let mut b = TransitionBatch::default();
        for t in iter {
            b.push(&t);
        }
        b
    }
}

/// Draws exactly `per_class` transitions for every class `0..classes`,
/// uniformly without replacement among the transitions carrying that label.
pub fn balanced_batch(
    buffer: &[Transition],
    classes: usize,
    per_class: usize,
    rng: &mut impl Rng,
) -> Result<TransitionBatch, EnvError> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = (0..classes).map(|k| (k, Vec::new())).collect();
    for (i, t) in buffer.iter().enumerate() {
        if let Some(k) = t.label {
            if let Some(slot) = by_class.get_mut(&k) {
                slot.push(i);
            }
        }
    }
    let mut batch = TransitionBatch::default();
    for (&class, members) in &by_class {
        if members.len() < per_class {
            return Err(EnvError::InsufficientSamples {
                class,
                available: members.len(),
                needed: per_class,
            });
        }
        for j in index::sample(rng, members.len(), per_class) {
            batch.push(&buffer[members[j]]);
        }
    }
    Ok(batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvName {
    #[serde(alias = "ideal-cliff", alias = "cliff-walking")]
    Cliff,
    #[serde(alias = "cart-pole")]
    Cartpole,
}

/// Environment section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    pub max_steps: usize,
    pub reward_step: f64,
    pub reward_exit: f64,
    pub seed: u64,
}

impl EnvConfig {
    pub fn defaults_for(name: EnvName) -> Self {
        match name {
            EnvName::Cliff => {
                let p = CliffParams::default();
                EnvConfig {
                    name,
                    max_steps: p.max_steps,
                    reward_step: p.reward_step,
                    reward_exit: p.reward_exit,
                    seed: 0,
                }
            }
            EnvName::Cartpole => EnvConfig {
                name,
                max_steps: 500,
                reward_step: 1.0,
                reward_exit: 0.0,
                seed: 0,
            },
        }
    }

    pub fn cliff_params(&self) -> CliffParams {
        CliffParams {
            reward_step: self.reward_step,
            reward_exit: self.reward_exit,
            max_steps: self.max_steps,
        }
    }

    pub fn build(&self) -> Box<dyn Environment + Send> {
        match self.name {
            EnvName::Cliff => Box::new(IdealCliffWorld::new(self.cliff_params())),
            EnvName::Cartpole => Box::new(CartPole::new(CartPoleParams {
                max_steps: self.max_steps,
                ..CartPoleParams::default()
            })),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cliff() -> IdealCliffWorld {
        IdealCliffWorld::new(CliffParams::default())
    }

    #[test]
    fn wall_bump_stays_and_pays_step_reward() {
        let mut env = cliff();
        env.reset_to(0);
        let s = env.step(Direction::Left as usize).unwrap();
        assert_eq!(env.cell(), 0);
        assert_eq!(s.reward, -1.0);
        assert!(!s.done);
        env.reset_to(0);
        env.step(Direction::Up as usize).unwrap();
        assert_eq!(env.cell(), 0);
    }

    #[test]
    fn exit_terminates_with_exit_reward() {
        let mut env = cliff();
        env.reset_to(1);
        let s = env.step(Direction::Up as usize).unwrap();
        assert!(s.done);
        assert_eq!(s.reward, 10.0);
        assert_eq!(s.observation[8], 1.0);
        assert_eq!(env.step(0), Err(EnvError::EpisodeFinished));
    }

    #[test]
    fn invalid_action_rejected() {
        let mut env = cliff();
        env.reset_to(3);
        assert_eq!(env.step(4), Err(EnvError::InvalidAction { action: 4, count: 4 }));
        let mut cp = CartPole::new(CartPoleParams::default());
        cp.reset(0);
        assert!(cp.step(2).is_err());
    }

    #[test]
    fn episode_cap() {
        let mut env = IdealCliffWorld::new(CliffParams {
            max_steps: 3,
            ..CliffParams::default()
        });
        env.reset_to(0);
        assert!(!env.step(2).unwrap().done);
        assert!(!env.step(2).unwrap().done);
        assert!(env.step(2).unwrap().done);
    }

    #[test]
    fn state_count_is_twelve() {
        assert_eq!(IdealCliffWorld::STATE_COUNT, 12);
        let mut reached = std::collections::BTreeSet::new();
        for cell in 0..8 {
            for d in Direction::ALL {
                reached.insert(IdealCliffWorld::transition(cell, d).0);
            }
        }
        assert_eq!(reached.len(), 12);
    }

    #[test]
    fn optimal_policy_is_balanced_and_sensible() {
        let p = optimal_policy(&CliffParams::default()).unwrap();
        assert_eq!(p[1], Direction::Up);
        assert_eq!(p[2], Direction::Up);
        assert_eq!(p[5], Direction::Down);
        assert_eq!(p[6], Direction::Down);
        assert_eq!(p[0], Direction::Right);
        assert_eq!(p[4], Direction::Right);
        assert_eq!(p[3], Direction::Left);
        assert_eq!(p[7], Direction::Left);
        for d in Direction::ALL {
            assert_eq!(p.iter().filter(|&&a| a == d).count(), 2);
        }
    }

    #[test]
    fn zero_step_cost_creates_ties() {
        let params = CliffParams {
            reward_step: 0.0,
            ..CliffParams::default()
        };
        assert!(matches!(optimal_policy(&params), Err(EnvError::Tie { .. })));
    }

    /// Best undiscounted return from `cell` over every action sequence of at
    /// most `depth` moves.
    fn brute_force_best(params: &CliffParams, cell: usize, depth: usize) -> f64 {
        if depth == 0 {
            return f64::NEG_INFINITY;
        }
        Direction::ALL
            .iter()
            .map(|&d| {
                let (next, r, exit) = IdealCliffWorld::reward(params, cell, d);
                if exit {
                    r
                } else {
                    r + brute_force_best(params, next, depth - 1)
                }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn oracle_return_matches_exhaustive_enumeration() {
        let params = CliffParams::default();
        let policy = optimal_policy(&params).unwrap();
        for start in 0..8 {
            let mut env = IdealCliffWorld::new(params);
            env.reset_to(start);
            let mut ret = 0.0;
            let mut path = 0;
            loop {
                let s = env.step(policy[env.cell()] as usize).unwrap();
                ret += s.reward;
                path += 1;
                if s.done {
                    break;
                }
            }
            let analytic = (path as f64 - 1.0) * params.reward_step + params.reward_exit;
            assert_eq!(ret, analytic);
            assert_eq!(ret, brute_force_best(&params, start, 10));
            assert_eq!(ret, cliff_values(&params)[start]);
        }
    }

    fn labelled_buffer() -> Vec<Transition> {
        let policy = optimal_policy(&CliffParams::default()).unwrap();
        (0..8)
            .flat_map(|cell| {
                (0..3).map(move |rep| Transition {
                    state: IdealCliffWorld::observation(cell),
                    action: rep % 4,
                    reward: -1.0,
                    psi: 0.0,
                    log_prob: 0.0,
                    label: Some(policy[cell] as usize),
                })
            })
            .collect()
    }

    #[test]
    fn balanced_batch_has_equal_class_counts() {
        let buffer = labelled_buffer();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = balanced_batch(&buffer, 4, 2, &mut rng).unwrap();
        assert_eq!(batch.len(), 8);
        for k in 0..4 {
            assert_eq!(batch.labels.iter().filter(|&&l| l == Some(k)).count(), 2);
        }
    }

    #[test]
    fn balanced_batch_names_starved_class() {
        let buffer: Vec<Transition> = labelled_buffer()
            .into_iter()
            .filter(|t| t.label != Some(2))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            balanced_batch(&buffer, 4, 1, &mut rng),
            Err(EnvError::InsufficientSamples {
                class: 2,
                available: 0,
                needed: 1
            })
        );
    }

    #[test]
    fn balanced_batch_is_deterministic() {
        let buffer = labelled_buffer();
        let a = balanced_batch(&buffer, 4, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = balanced_batch(&buffer, 4, 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn cartpole_survives_500_steps_with_reward_500() {
        // A PD controller keeps the pole up; the cap ends the episode.
        let mut env = CartPole::new(CartPoleParams::default());
        env.reset(4);
        let mut total = 0.0;
        let mut steps = 0;
        loop {
            let [x, x_dot, th, th_dot] = env.state();
            let u = th + 0.5 * th_dot + 0.01 * x + 0.05 * x_dot;
            let s = env.step(usize::from(u > 0.0)).unwrap();
            total += s.reward;
            steps += 1;
            if s.done {
                break;
            }
        }
        assert_eq!(steps, 500);
        assert_eq!(total, 500.0);
    }

    #[test]
    fn cartpole_terminates_when_pole_falls() {
        let mut env = CartPole::new(CartPoleParams::default());
        env.reset(0);
        let mut steps = 0;
        while !env.step(1).unwrap().done {
            steps += 1;
        }
        assert!(steps < 100);
        let [x, _, th, _] = env.state();
        assert!(th.abs() > 12f64.to_radians() || x.abs() > 2.4);
    }

    #[test]
    fn identical_seed_and_actions_give_identical_trajectories() {
        let run = || {
            let mut env = CartPole::new(CartPoleParams::default());
            let mut obs = vec![env.reset(77)];
            for a in [0, 1, 1, 0, 1, 0, 0, 1] {
                obs.push(env.step(a).unwrap().observation);
            }
            obs
        };
        assert_eq!(run(), run());
        let mut a = cliff();
        let mut b = cliff();
        assert_eq!(a.reset(5), b.reset(5));
    }

    #[test]
    fn unforced_dynamics_conserve_energy_with_symplectic_step() {
        let params = CartPoleParams {
            integrator: Integrator::SemiImplicitEuler,
            ..CartPoleParams::default()
        };
        // Small swing about the hanging equilibrium.
        let mut s = [0.0, 0.0, std::f64::consts::PI - 0.05, 0.0];
        let e0 = params.energy(s);
        let mut worst = 0.0f64;
        for _ in 0..500 {
            s = params.integrate(s, 0.0);
            assert!(s.iter().all(|v| v.is_finite()));
            worst = worst.max(params.energy(s) - e0);
        }
        assert!(worst <= 1e-3, "energy grew by {worst}");
    }

    #[test]
    fn bounded_force_keeps_state_finite() {
        let params = CartPoleParams::default();
        let mut s = [0.0, 0.0, 0.1, 0.0];
        for i in 0..500 {
            let f = if i % 7 < 3 { 10.0 } else { -10.0 };
            s = params.integrate(s, f);
            assert!(s.iter().all(|v| v.is_finite()));
        }
    }
}
