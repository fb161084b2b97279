//! REINFORCE and PPO-clip trainers, with optional frozen ETF head and
//! epsilon-greedy exploration.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Algo, ConfigError, OptimizerKind, TrainConfig};
use crate::envs::{
    balanced_batch, optimal_policy, EnvError, EnvName, Environment, IdealCliffWorld, Transition, TransitionBatch,
};
use crate::etf::{generate_etf, EtfError};
use crate::metrics::{collapse_report, ActivationRecord, ActivationSet, CollapseReport, LabelSource, MetricsError};
use crate::net::{Adam, AdamParams, Checkpoint, GradientTape, NetError, Optimizer, PolicyNet};

pub const ARTIFACT_SCHEMA: u32 = 1;

/// Episodes collected while trying to fill a balanced batch before giving up,
/// as a multiple of `episodes_per_collect`.
const BALANCE_PATIENCE: usize = 64;

#[derive(Debug, Error)]
pub enum PgError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Etf(#[from] EtfError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("update on an empty batch")]
    EmptyBatch,
    #[error("non-finite loss {loss} on a batch of {batch} (largest |weight| {max_weight})")]
    NonFiniteLoss { loss: f64, batch: usize, max_weight: f64 },
    #[error("run aborted in epoch {epoch}: {source}")]
    Aborted {
        epoch: usize,
        #[source]
        source: Box<PgError>,
        partial: Box<RunArtifact>,
    },
}

/// One environment step as seen by the learner.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub activation: Vec<f64>,
    /// `log pi(a|s)` under the policy that acted, without epsilon.
    pub log_prob: f64,
    pub probs: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
    /// Discounted returns `G_t`, filled by [`Episode::with_returns`].
    pub returns: Vec<f64>,
    /// Ended by the step cap rather than a terminal state.
    pub truncated: bool,
    pub final_observation: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn with_returns(mut self, gamma: f64) -> Self {
        self.returns = compute_returns(&self.rewards(), gamma);
        self
    }
}

/// Discounted suffix sums `G_t = r_t + gamma * G_{t+1}`.
pub fn compute_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (t, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Shifts and scales to mean 0 and unit (population) standard deviation.
pub fn standardize(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in xs {
        *x = (*x - mean) / (std + 1e-8);
    }
}

/// Generalized advantage estimates for one episode. `bootstrap` is the value
/// of the state after the last step (zero when it is terminal). Returns
/// `(advantages, value targets)`.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len());
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    let targets = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionChoice {
    pub action: usize,
    pub log_prob: f64,
    pub probs: Vec<f64>,
    pub activation: Vec<f64>,
    /// The action came from the uniform branch.
    pub explored: bool,
}

/// Samples from `pi(.|s)`, replaced by a uniform action with probability
/// `epsilon`.
pub fn select_action<R: Rng + ?Sized>(
    net: &PolicyNet,
    state: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<ActionChoice, NetError> {
    let out = net.forward(state)?;
    let k = out.probs.len();
    let explored = rng.random::<f64>() < epsilon;
    let action = if explored {
        rng.random_range(0..k)
    } else {
        WeightedIndex::new(out.probs.iter().copied())
            .map(|w| w.sample(rng))
            .unwrap_or_else(|_| out.probs.argmax().0)
    };
    Ok(ActionChoice {
        action,
        log_prob: crate::net::log_softmax_at(out.logits.iter().copied(), action),
        probs: out.probs.iter().copied().collect(),
        activation: out.activation.iter().copied().collect(),
        explored,
    })
}

/// Probability that [`select_action`] returns `action`.
pub fn behavior_probability(probs: &[f64], action: usize, epsilon: f64) -> f64 {
    (1.0 - epsilon) * probs[action] + epsilon / probs.len() as f64
}

/// Plays one episode from a freshly seeded reset.
pub fn collect_episode<R: Rng + ?Sized>(
    env: &mut dyn Environment,
    net: &PolicyNet,
    epsilon: f64,
    rng: &mut R,
) -> Result<Episode, PgError> {
    let mut obs = env.reset(rng.next_u64());
    let mut steps = Vec::new();
    loop {
        let label = env.optimal_action();
        let choice = select_action(net, &obs, epsilon, rng)?;
        let step = env.step(choice.action)?;
        steps.push(EpisodeStep {
            state: std::mem::replace(&mut obs, step.observation),
            action: choice.action,
            reward: step.reward,
            activation: choice.activation,
            log_prob: choice.log_prob,
            probs: choice.probs,
            label,
        });
        if step.done {
            break;
        }
    }
    // An episode that lasts exactly the cap is treated as cut off.
    let truncated = steps.len() >= env.max_steps();
    Ok(Episode {
        steps,
        returns: Vec::new(),
        truncated,
        final_observation: obs,
    })
}

fn state_matrix<'a>(states: impl ExactSizeIterator<Item = &'a Vec<f64>>, dim: usize) -> DMatrix<f64> {
    let n = states.len();
    let mut m = DMatrix::zeros(n, dim);
    for (i, s) in states.enumerate() {
        for (j, v) in s.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

fn apply_update(
    net: &mut PolicyNet,
    opt: &mut Optimizer,
    mut tape: GradientTape,
    lr: f64,
    max_grad_norm: Option<f64>,
) -> Result<(), PgError> {
    if let Some(max) = max_grad_norm {
        tape.clip_norm(max);
    }
    opt.step(net, &tape, lr)?;
    Ok(())
}

/// One gradient step on `-(1/n) sum_t log pi(a_t|s_t) psi_t`. Returns the loss.
pub fn reinforce_update(
    net: &mut PolicyNet,
    opt: &mut Optimizer,
    batch: &TransitionBatch,
    config: &TrainConfig,
) -> Result<f64, PgError> {
    if batch.is_empty() {
        return Err(PgError::EmptyBatch);
    }
    let n = batch.len();
    let x = state_matrix(batch.states.iter(), net.input_dim());
    let cache = net.forward_batch(&x)?;
    let weights: Vec<f64> = batch.psi.iter().map(|p| p / n as f64).collect();
    let loss: f64 = -(0..n).map(|i| cache.log_prob(i, batch.actions[i]) * weights[i]).sum::<f64>();
    if !loss.is_finite() {
        return Err(PgError::NonFiniteLoss {
            loss,
            batch: n,
            max_weight: batch.psi.iter().fold(0.0, |m, p| m.max(p.abs())),
        });
    }
    let dlogits = crate::net::policy_logit_grad(&cache.probs, &batch.actions, &weights);
    let mut tape = net.backward(&cache, &dlogits)?;
    tape.loss = loss;
    apply_update(net, opt, tape, config.lr, config.max_grad_norm)?;
    Ok(loss)
}

/// `mean_n min(rho_n A_n, clip(rho_n, 1 - eps, 1 + eps) A_n)`, and for each
/// sample whether the unclipped branch is the one selected (so gradient flows).
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], clip_eps: f64) -> (f64, Vec<bool>) {
    let mut total = 0.0;
    let active = ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| {
            let unclipped = r * a;
            let clipped = r.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
            total += unclipped.min(clipped);
            unclipped <= clipped
        })
        .collect();
    (total / ratios.len().max(1) as f64, active)
}

/// PPO policy loss `-surrogate - c_ent * mean entropy` and its gradient with
/// respect to the logits (`n x K`).
pub fn ppo_policy_loss(
    logits: &DMatrix<f64>,
    actions: &[usize],
    old_log_probs: &[f64],
    advantages: &[f64],
    clip_eps: f64,
    entropy_coef: f64,
) -> (f64, DMatrix<f64>) {
    let (n, k) = logits.shape();
    let nf = n as f64;
    let mut probs = logits.clone();
    for mut row in probs.row_iter_mut() {
        let max = row.max();
        row.apply(|v| *v = (*v - max).exp());
        let s = row.sum();
        row /= s;
    }
    let ratios: Vec<f64> = (0..n)
        .map(|i| (crate::net::log_softmax_at(logits.row(i).iter().copied(), actions[i]) - old_log_probs[i]).exp())
        .collect();
    let (surrogate, active) = clipped_surrogate(&ratios, advantages, clip_eps);
    let mut grad = DMatrix::zeros(n, k);
    let mut entropy_sum = 0.0;
    for i in 0..n {
        let p = probs.row(i);
        let h: f64 = -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>();
        entropy_sum += h;
        for j in 0..k {
            let onehot = if j == actions[i] { 1.0 } else { 0.0 };
            let mut g = 0.0;
            if active[i] {
                g -= advantages[i] * ratios[i] * (onehot - p[j]);
            }
            let logp = if p[j] > 0.0 { p[j].ln() } else { 0.0 };
            g += entropy_coef * p[j] * (logp + h);
            grad[(i, j)] = g / nf;
        }
    }
    let loss = -surrogate - entropy_coef * entropy_sum / nf;
    (loss, grad)
}

/// Mean categorical `KL(old || new)` over rows.
pub fn mean_kl(old: &DMatrix<f64>, new: &DMatrix<f64>) -> f64 {
    let n = old.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..old.ncols() {
            let p = old[(i, j)];
            if p > 0.0 {
                total += p * (p.ln() - new[(i, j)].max(f64::MIN_POSITIVE).ln());
            }
        }
    }
    total / n.max(1) as f64
}

/// On-policy data for one PPO update.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoBatch {
    pub states: DMatrix<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub old_probs: DMatrix<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The rows at `idx`, in that order.
    fn subset(&self, idx: &[usize]) -> PpoBatch {
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PpoBatch {
            states: self.states.select_rows(idx),
            actions: idx.iter().map(|&i| self.actions[i]).collect(),
            old_log_probs: pick(&self.old_log_probs),
            old_probs: self.old_probs.select_rows(idx),
            advantages: pick(&self.advantages),
            returns: pick(&self.returns),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    pub passes: usize,
    /// Updates stopped early because `kl` exceeded the limit.
    pub aborted: bool,
}

/// Value net and its optimizer.
#[derive(Debug, Clone)]
pub struct ValueLearner {
    pub net: PolicyNet,
    pub opt: Optimizer,
}

/// `repeat_per_collect` shuffled minibatch passes of clipped-surrogate ascent,
/// value regression and entropy bonus, stopping early once the mean
/// `KL(old || new)` exceeds `kl_limit`.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &mut PolicyNet,
    policy_opt: &mut Optimizer,
    critic: &mut ValueLearner,
    batch: &PpoBatch,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<PpoStats, PgError> {
    if batch.is_empty() {
        return Err(PgError::EmptyBatch);
    }
    let mut stats = PpoStats::default();
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut updates = 0usize;
    for _ in 0..config.repeat_per_collect {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let mb = batch.subset(chunk);
            let cache = net.forward_batch(&mb.states)?;
            let (loss, dlogits) = ppo_policy_loss(
                &cache.logits,
                &mb.actions,
                &mb.old_log_probs,
                &mb.advantages,
                config.clip_eps,
                config.entropy_coef,
            );
            if !loss.is_finite() {
                return Err(PgError::NonFiniteLoss {
                    loss,
                    batch: chunk.len(),
                    max_weight: mb.advantages.iter().fold(0.0, |m, a| m.max(a.abs())),
                });
            }
            let mut tape = net.backward(&cache, &dlogits)?;
            tape.loss = loss;
            apply_update(net, policy_opt, tape, config.lr, config.max_grad_norm)?;

            let vcache = critic.net.forward_batch(&mb.states)?;
            let m = chunk.len() as f64;
            let mut dv = DMatrix::zeros(chunk.len(), 1);
            let mut vloss = 0.0;
            for i in 0..chunk.len() {
                let err = vcache.logits[(i, 0)] - mb.returns[i];
                vloss += config.value_coef * err * err / m;
                dv[(i, 0)] = 2.0 * config.value_coef * err / m;
            }
            let vtape = critic.net.backward(&vcache, &dv)?;
            apply_update(&mut critic.net, &mut critic.opt, vtape, config.lr, config.max_grad_norm)?;
            stats.policy_loss += loss;
            stats.value_loss += vloss;
            updates += 1;
        }
        stats.passes += 1;
        let probs = net.forward_batch(&batch.states)?.probs;
        stats.kl = mean_kl(&batch.old_probs, &probs);
        if stats.kl > config.kl_limit {
            stats.aborted = true;
            break;
        }
    }
    stats.policy_loss /= updates as f64;
    stats.value_loss /= updates as f64;
    Ok(stats)
}

/// State values from a value net (first output).
pub fn values(value_net: &PolicyNet, states: &DMatrix<f64>) -> Result<Vec<f64>, NetError> {
    Ok(value_net.forward_batch(states)?.logits.column(0).iter().copied().collect())
}

/// Builds a PPO batch from episodes, with GAE advantages standardized over
/// the batch.
pub fn ppo_batch(episodes: &[Episode], value_net: &PolicyNet, config: &TrainConfig) -> Result<PpoBatch, PgError> {
    let dim = value_net.input_dim();
    let all_states: Vec<&Vec<f64>> = episodes.iter().flat_map(|e| e.steps.iter().map(|s| &s.state)).collect();
    let states = state_matrix(all_states.into_iter(), dim);
    let v = values(value_net, &states)?;
    let k = episodes
        .iter()
        .flat_map(|e| e.steps.first())
        .map(|s| s.probs.len())
        .next()
        .ok_or(PgError::EmptyBatch)?;

    let mut advantages = Vec::with_capacity(v.len());
    let mut returns = Vec::with_capacity(v.len());
    let mut offset = 0;
    for e in episodes {
        let n = e.len();
        let bootstrap = if e.truncated {
            values(value_net, &DMatrix::from_row_slice(1, dim, &e.final_observation))?[0]
        } else {
            0.0
        };
        let (a, r) = gae(&e.rewards(), &v[offset..offset + n], bootstrap, config.gamma, config.gae_lambda);
        advantages.extend(a);
        returns.extend(r);
        offset += n;
    }
    standardize(&mut advantages);

    let steps: Vec<&EpisodeStep> = episodes.iter().flat_map(|e| &e.steps).collect();
    let mut old_probs = DMatrix::zeros(steps.len(), k);
    for (i, s) in steps.iter().enumerate() {
        for j in 0..k {
            old_probs[(i, j)] = s.probs[j];
        }
    }
    Ok(PpoBatch {
        states,
        actions: steps.iter().map(|s| s.action).collect(),
        old_log_probs: steps.iter().map(|s| s.log_prob).collect(),
        old_probs,
        advantages,
        returns,
    })
}

/// REINFORCE transitions with `psi = G_t`, standardized over the whole
/// collection when configured.
pub fn reinforce_transitions(episodes: &[Episode], config: &TrainConfig) -> Vec<Transition> {
    let mut psi: Vec<f64> = episodes.iter().flat_map(|e| e.returns.iter().copied()).collect();
    if config.normalize_returns {
        standardize(&mut psi);
    }
    episodes
        .iter()
        .flat_map(|e| &e.steps)
        .zip(psi)
        .map(|(s, psi)| Transition {
            state: s.state.clone(),
            action: s.action,
            reward: s.reward,
            psi,
            log_prob: s.log_prob,
            label: s.label,
        })
        .collect()
}

/// Per-epoch record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    /// Mean undiscounted return of the epoch's training episodes.
    pub reward_mean: f64,
    pub reward_std: f64,
    pub episodes: usize,
    pub steps: usize,
    pub loss: f64,
    /// PPO updates cut short by the KL guard.
    pub kl_aborts: usize,
    /// This is the stop epoch.
    pub stop_flag: bool,
    pub collapse: Option<CollapseReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best: f64,
    #[serde(rename = "final")]
    pub final_reward: f64,
    /// First epoch whose trailing moving average reaches the threshold, or
    /// the epoch count when it never does.
    pub stop: usize,
    pub stop_reached: bool,
}

/// First epoch (1-based) whose trailing `window`-epoch mean reward is at
/// least `threshold`. Epochs before a full window are not eligible.
pub fn stop_epoch(rewards: &[f64], threshold: f64, window: usize) -> Option<usize> {
    if window == 0 || rewards.len() < window {
        return None;
    }
    (window..=rewards.len())
        .find(|&end| rewards[end - window..end].iter().sum::<f64>() / window as f64 >= threshold)
}

pub fn summarize(rows: &[EpochRow], threshold: f64, window: usize) -> RunSummary {
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward_mean).collect();
    let stop = stop_epoch(&rewards, threshold, window);
    RunSummary {
        best: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_reward: rewards.last().copied().unwrap_or(f64::NAN),
        stop: stop.unwrap_or(rows.len()),
        stop_reached: stop.is_some(),
    }
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub schema: u32,
    pub config: TrainConfig,
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
    pub head_hash_initial: String,
    pub head_hash_final: String,
    pub checkpoint: Checkpoint,
}

impl RunArtifact {
    /// Recomputes the summary from the rows.
    pub fn resummarize(&self) -> RunSummary {
        summarize(&self.rows, self.config.threshold, self.config.stop_window)
    }
}

/// Probe states and labels for collapse metrics.
enum Probe {
    /// Every non-terminal state with its oracle label.
    Exhaustive(DMatrix<f64>, Vec<usize>),
    /// A sample of visited states, labelled by the policy's argmax.
    Sampled,
}

fn probe_for(config: &TrainConfig) -> Result<Probe, PgError> {
    match config.env {
        EnvName::Cliff => {
            let policy = optimal_policy(&config.env_config().cliff_params())?;
            let cells: Vec<Vec<f64>> = (0..IdealCliffWorld::GRID_CELLS).map(IdealCliffWorld::observation).collect();
            let x = state_matrix(cells.iter(), IdealCliffWorld::STATE_COUNT);
            Ok(Probe::Exhaustive(x, policy.iter().map(|d| *d as usize).collect()))
        }
        EnvName::Cartpole => Ok(Probe::Sampled),
    }
}

fn epoch_collapse(
    net: &PolicyNet,
    probe: &Probe,
    visited: &[Vec<f64>],
    samples: usize,
    epoch: usize,
) -> Result<Option<CollapseReport>, PgError> {
    let k = net.action_count();
    let (x, oracle, source, sampled) = match probe {
        Probe::Exhaustive(x, labels) => (x.clone(), Some(labels), LabelSource::Oracle, false),
        Probe::Sampled => {
            if visited.is_empty() {
                return Ok(None);
            }
            let take = samples.clamp(1, visited.len());
            let stride = visited.len() as f64 / take as f64;
            let picked = (0..take).map(|i| &visited[(i as f64 * stride) as usize]);
            (state_matrix(picked, net.input_dim()), None, LabelSource::Argmax, true)
        }
    };
    let cache = net.forward_batch(&x)?;
    let labels: Vec<usize> = match oracle {
        Some(l) => l.clone(),
        None => (0..x.nrows()).map(|i| cache.logits.row(i).transpose().argmax().0).collect(),
    };
    let mut set = ActivationSet::new(net.activation_dim(), k);
    for (i, &label) in labels.iter().enumerate() {
        set.push(label, cache.activations.row(i).transpose())?;
    }
    if set.counts().contains(&0) {
        return Ok(None);
    }
    match collapse_report(&set, &net.head().weights, epoch, source, sampled) {
        Ok(r) => Ok(Some(r)),
        // Activations that have not separated yet (dead units, identical
        // class means) have no defined angles.
        Err(MetricsError::ZeroVector(_) | MetricsError::ZeroMeanNorm | MetricsError::DegenerateBetween) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Builds the policy net a config asks for.
pub fn build_policy(config: &TrainConfig, obs_dim: usize, actions: usize, rng: &mut ChaCha8Rng) -> Result<PolicyNet, PgError> {
    let d = *config.hidden.last().expect("validated: hidden is non-empty");
    let mut net = if config.acpg {
        let etf = generate_etf(actions, d, config.e_w, config.seed)?;
        PolicyNet::with_frozen_etf(obs_dim, &config.hidden, &etf, rng)?
    } else {
        PolicyNet::learnable(obs_dim, &config.hidden, actions, rng)
    };
    net.set_activation_cap(config.e_h_clip);
    Ok(net)
}

fn optimizer(kind: OptimizerKind) -> Optimizer {
    match kind {
        OptimizerKind::Adam => Optimizer::Adam(Adam::new(AdamParams::default())),
        OptimizerKind::Sgd => Optimizer::Sgd,
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Collects `episodes_per_collect` episodes; with balanced batches, keeps
/// going until every class has enough labelled transitions.
fn collect_group(
    env: &mut dyn Environment,
    net: &PolicyNet,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Episode>, PgError> {
    let k = env.action_count();
    let mut episodes = Vec::with_capacity(config.episodes_per_collect);
    let mut counts = vec![0usize; k];
    loop {
        let e = collect_episode(env, net, config.epsilon, rng)?.with_returns(config.gamma);
        for s in &e.steps {
            if let Some(l) = s.label {
                counts[l] += 1;
            }
        }
        episodes.push(e);
        if episodes.len() < config.episodes_per_collect {
            continue;
        }
        match config.balanced_per_class {
            None => break,
            Some(per) if counts.iter().all(|&c| c >= per) => break,
            Some(per) => {
                if episodes.len() >= BALANCE_PATIENCE * config.episodes_per_collect {
                    let (class, available) =
                        counts.iter().enumerate().min_by_key(|(_, c)| **c).map(|(i, c)| (i, *c)).unwrap();
                    return Err(EnvError::InsufficientSamples {
                        class,
                        available,
                        needed: per,
                    }
                    .into());
                }
            }
        }
    }
    Ok(episodes)
}

struct Trainer {
    config: TrainConfig,
    rng: ChaCha8Rng,
    env: Box<dyn Environment + Send>,
    net: PolicyNet,
    policy_opt: Optimizer,
    critic: Option<ValueLearner>,
    probe: Probe,
    rows: Vec<EpochRow>,
    head_hash_initial: String,
}

impl Trainer {
    fn new(config: &TrainConfig) -> Result<Self, PgError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let env = config.env_config().build();
        let (obs, k) = (env.observation_dim(), env.action_count());
        let net = build_policy(config, obs, k, &mut rng)?;
        let critic = match config.algo {
            Algo::Reinforce => None,
            Algo::Ppo => Some(ValueLearner {
                net: PolicyNet::learnable(obs, &config.hidden, 1, &mut rng),
                opt: optimizer(config.optimizer),
            }),
        };
        Ok(Trainer {
            head_hash_initial: net.head_hash(),
            probe: probe_for(config)?,
            policy_opt: optimizer(config.optimizer),
            config: config.clone(),
            rng,
            env,
            net,
            critic,
            rows: Vec::new(),
        })
    }

    fn update(&mut self, episodes: &[Episode]) -> Result<(f64, bool), PgError> {
        let c = &self.config;
        match &mut self.critic {
            None => {
                let transitions = reinforce_transitions(episodes, c);
                let steps = c.repeat_per_collect * transitions.len().div_ceil(c.batch_size);
                let mut loss = 0.0;
                match c.balanced_per_class {
                    Some(per) => {
                        for _ in 0..steps {
                            let batch = balanced_batch(&transitions, self.net.action_count(), per, &mut self.rng)?;
                            loss += reinforce_update(&mut self.net, &mut self.policy_opt, &batch, c)?;
                        }
                    }
                    None => {
                        let mut order: Vec<usize> = (0..transitions.len()).collect();
                        for _ in 0..c.repeat_per_collect {
                            order.shuffle(&mut self.rng);
                            for chunk in order.chunks(c.batch_size) {
                                let batch: TransitionBatch = chunk.iter().map(|&i| transitions[i].clone()).collect();
                                loss += reinforce_update(&mut self.net, &mut self.policy_opt, &batch, c)?;
                            }
                        }
                    }
                }
                Ok((loss / steps.max(1) as f64, false))
            }
            Some(critic) => {
                let batch = ppo_batch(episodes, &critic.net, c)?;
                let stats = ppo_update(&mut self.net, &mut self.policy_opt, critic, &batch, c, &mut self.rng)?;
                Ok((stats.policy_loss, stats.aborted))
            }
        }
    }

    fn epoch(&mut self, epoch: usize) -> Result<EpochRow, PgError> {
        let mut returns = Vec::new();
        let mut visited = Vec::new();
        let mut steps = 0;
        let mut losses = Vec::new();
        let mut kl_aborts = 0;
        while steps < self.config.steps_per_epoch {
            let episodes = collect_group(self.env.as_mut(), &self.net, &self.config, &mut self.rng)?;
            for e in &episodes {
                steps += e.len();
                returns.push(e.total_reward());
                if matches!(self.probe, Probe::Sampled) {
                    visited.extend(e.steps.iter().map(|s| s.state.clone()));
                }
            }
            let (loss, aborted) = self.update(&episodes)?;
            losses.push(loss);
            kl_aborts += usize::from(aborted);
        }
        let (reward_mean, reward_std) = mean_std(&returns);
        let collapse = epoch_collapse(&self.net, &self.probe, &visited, self.config.metric_samples, epoch)?;
        Ok(EpochRow {
            epoch,
            reward_mean,
            reward_std,
            episodes: returns.len(),
            steps,
            loss: mean_std(&losses).0,
            kl_aborts,
            stop_flag: false,
            collapse,
        })
    }

    fn artifact(&self) -> RunArtifact {
        let summary = summarize(&self.rows, self.config.threshold, self.config.stop_window);
        let mut rows = self.rows.clone();
        if summary.stop_reached {
            rows[summary.stop - 1].stop_flag = true;
        }
        RunArtifact {
            schema: ARTIFACT_SCHEMA,
            config: self.config.clone(),
            rows,
            summary,
            head_hash_initial: self.head_hash_initial.clone(),
            head_hash_final: self.net.head_hash(),
            checkpoint: self.net.to_checkpoint(),
        }
    }
}

/// Trains for `config.epochs` epochs, calling `observer` after each one.
/// On failure the error carries every completed epoch.
pub fn run_experiment_with(
    config: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRow),
) -> Result<RunArtifact, PgError> {
    let mut t = Trainer::new(config)?;
    for epoch in 1..=config.epochs {
        match t.epoch(epoch) {
            Ok(row) => {
                observer(&row);
                t.rows.push(row);
            }
            Err(e) => {
                return Err(PgError::Aborted {
                    epoch,
                    source: Box::new(e),
                    partial: Box::new(t.artifact()),
                })
            }
        }
    }
    Ok(t.artifact())
}

pub fn run_experiment(config: &TrainConfig) -> Result<RunArtifact, PgError> {
    run_experiment_with(config, &mut |_| {})
}

/// Activation dump of the probe states: every gridworld cell with its
/// oracle label, or up to `metric_samples` states visited by the policy,
/// labelled by its argmax, for cart-pole.
pub fn activation_dump(
    net: &PolicyNet,
    config: &TrainConfig,
    seed: u64,
) -> Result<(Vec<ActivationRecord>, LabelSource), PgError> {
    let (x, labels, source) = match probe_for(config)? {
        Probe::Exhaustive(x, labels) => (x, Some(labels), LabelSource::Oracle),
        Probe::Sampled => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut env = config.env_config().build();
            let mut states = Vec::new();
            while states.len() < config.metric_samples {
                let e = collect_episode(env.as_mut(), net, 0.0, &mut rng)?;
                states.extend(e.steps.into_iter().map(|s| s.state));
            }
            states.truncate(config.metric_samples);
            (state_matrix(states.iter(), net.input_dim()), None, LabelSource::Argmax)
        }
    };
    let cache = net.forward_batch(&x)?;
    let records = (0..x.nrows())
        .map(|i| ActivationRecord {
            state_id: i,
            class_k: match &labels {
                Some(l) => l[i],
                None => cache.logits.row(i).transpose().argmax().0,
            },
            h: cache.activations.row(i).iter().copied().collect(),
        })
        .collect();
    Ok((records, source))
}
