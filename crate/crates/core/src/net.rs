//! Feed-forward policy network with hand-written backpropagation.
//!
//! The backbone is a stack of dense ReLU layers producing the activation `h`;
//! the head is a linear action-selection layer `W` (`K x d`) producing logits
//! `z = W h`. The head can be frozen to a simplex ETF, in which case it never
//! receives gradient and is never touched by the optimizers.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::etf::EtfMatrix;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("forward cache is stale (cache generation {cache}, net generation {net})")]
    StaleCache { cache: u64, net: u64 },
    #[error("non-finite gradient in parameter block {block}")]
    NonFiniteGradient { block: usize },
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Dense {
    fn he_uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Dense {
            weights: DMatrix::from_fn(outputs, inputs, |_, _| dist.sample(rng)),
            bias: DVector::zeros(outputs),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.weights.transpose();
        for mut row in z.row_iter_mut() {
            row += self.bias.transpose();
        }
        z
    }
}

/// Where a frozen head came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtfProvenance {
    pub seed: u64,
    pub k: usize,
    pub d: usize,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `K x d`, row `k` is `w_k`.
    pub weights: DMatrix<f64>,
    pub frozen: bool,
    pub provenance: Option<EtfProvenance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    input_dim: usize,
    layers: Vec<Dense>,
    head: Head,
    eh_clip: Option<f64>,
    generation: u64,
}

/// Everything the backward pass needs from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    inputs: Vec<DMatrix<f64>>,
    pre: Vec<DMatrix<f64>>,
    raw_activations: DMatrix<f64>,
    /// `n x d`, after the optional energy cap.
    pub activations: DMatrix<f64>,
    /// `n x K`
    pub logits: DMatrix<f64>,
    /// `n x K`, rows sum to one.
    pub probs: DMatrix<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_prob(&self, row: usize, action: usize) -> f64 {
        log_softmax_at(self.logits.row(row).iter().copied(), action)
    }
}

/// Single-sample forward output.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub activation: DVector<f64>,
    pub logits: DVector<f64>,
    pub probs: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Gradients for every parameter of a [`PolicyNet`], plus the loss they came
/// from. The head buffer stays zero when the head is frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub layers: Vec<DenseGrad>,
    pub head: DMatrix<f64>,
    pub loss: f64,
}

impl GradientTape {
    pub fn zeros_like(net: &PolicyNet) -> Self {
        GradientTape {
            layers: net
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weights: DMatrix::zeros(l.weights.nrows(), l.weights.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
            head: DMatrix::zeros(net.head.weights.nrows(), net.head.weights.ncols()),
            loss: 0.0,
        }
    }

    /// Gradient blocks in the same order as [`PolicyNet::param_blocks_mut`].
    pub fn blocks(&self, include_head: bool) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        if include_head {
            out.push(self.head.as_slice());
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.head.as_mut_slice());
        out
    }

    pub fn norm(&self) -> f64 {
        self.blocks(true)
            .iter()
            .flat_map(|b| b.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales the whole tape so its global norm is at most `max_norm`.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for block in self.blocks_mut() {
                block.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    pub fn add_assign(&mut self, other: &GradientTape) {
        let others = other.blocks(true);
        for (mine, theirs) in self.blocks_mut().into_iter().zip(others) {
            mine.iter_mut().zip(theirs).for_each(|(a, b)| *a += b);
        }
        self.loss += other.loss;
    }

    fn check_finite(&self) -> Result<(), NetError> {
        for (i, block) in self.blocks(true).iter().enumerate() {
            if block.iter().any(|g| !g.is_finite()) {
                return Err(NetError::NonFiniteGradient { block: i });
            }
        }
        Ok(())
    }
}

impl PolicyNet {
    /// Net with a learnable head initialized like a default linear layer,
    /// `U(-1/sqrt(d), 1/sqrt(d))`.
    pub fn learnable<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        actions: usize,
        rng: &mut R,
    ) -> Self {
        let layers = backbone(input_dim, hidden, rng);
        let d = hidden.last().copied().unwrap_or(input_dim);
        let bound = 1.0 / (d as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        PolicyNet {
            input_dim,
            layers,
            head: Head {
                weights: DMatrix::from_fn(actions, d, |_, _| dist.sample(rng)),
                frozen: false,
                provenance: None,
            },
            eh_clip: None,
            generation: 0,
        }
    }

    /// Net whose head is the given frame, frozen.
    pub fn with_frozen_etf<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        etf: &EtfMatrix,
        rng: &mut R,
    ) -> Result<Self, NetError> {
        let d = hidden.last().copied().unwrap_or(input_dim);
        if etf.d() != d {
            return Err(NetError::Shape {
                expected: format!("frame dimension {d}"),
                got: format!("{}", etf.d()),
            });
        }
        Ok(PolicyNet {
            input_dim,
            layers: backbone(input_dim, hidden, rng),
            head: Head {
                weights: etf.as_head(),
                frozen: true,
                provenance: Some(EtfProvenance {
                    seed: etf.seed(),
                    k: etf.k(),
                    d: etf.d(),
                    energy: etf.energy(),
                }),
            },
            eh_clip: None,
            generation: 0,
        })
    }

    /// Caps `||h||^2` at `energy` by rescaling each activation that exceeds it.
    pub fn set_activation_cap(&mut self, energy: Option<f64>) {
        self.eh_clip = energy;
    }

    pub fn activation_cap(&self) -> Option<f64> {
        self.eh_clip
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn activation_dim(&self) -> usize {
        self.head.weights.ncols()
    }

    pub fn action_count(&self) -> usize {
        self.head.weights.nrows()
    }

    pub fn hidden_dims(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.weights.nrows()).collect()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn is_frozen(&self) -> bool {
        self.head.frozen
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum::<usize>()
            + self.head.weights.len()
    }

    /// Mutable views of the learnable parameters; the frozen head is excluded.
    /// Invalidates outstanding forward caches.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out = Vec::with_capacity(2 * self.layers.len() + 1);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        if !self.head.frozen {
            out.push(self.head.weights.as_mut_slice());
        }
        out
    }

    /// Mutable access to a learnable head. `None` when frozen.
    pub fn head_weights_mut(&mut self) -> Option<&mut DMatrix<f64>> {
        if self.head.frozen {
            None
        } else {
            self.generation += 1;
            Some(&mut self.head.weights)
        }
    }

    pub fn forward_batch(&self, states: &DMatrix<f64>) -> Result<ForwardCache, NetError> {
        if states.ncols() != self.input_dim {
            return Err(NetError::Shape {
                expected: format!("{} input features", self.input_dim),
                got: format!("{}", states.ncols()),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut x = states.clone();
        for layer in &self.layers {
            let z = layer.forward(&x);
            inputs.push(x);
            x = z.map(|v| v.max(0.0));
            pre.push(z);
        }
        let raw_activations = x;
        let activations = match self.eh_clip {
            Some(cap) => {
                let mut h = raw_activations.clone();
                for mut row in h.row_iter_mut() {
                    let sq = row.norm_squared();
                    if sq > cap {
                        row *= (cap / sq).sqrt();
                    }
                }
                h
            }
            None => raw_activations.clone(),
        };
        let logits = &activations * self.head.weights.transpose();
        let mut probs = logits.clone();
        for mut row in probs.row_iter_mut() {
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        Ok(ForwardCache {
            generation: self.generation,
            inputs,
            pre,
            raw_activations,
            activations,
            logits,
            probs,
        })
    }

    pub fn forward(&self, state: &[f64]) -> Result<Forward, NetError> {
        let x = DMatrix::from_row_slice(1, state.len(), state);
        let cache = self.forward_batch(&x)?;
        Ok(Forward {
            activation: cache.activations.row(0).transpose(),
            logits: cache.logits.row(0).transpose(),
            probs: cache.probs.row(0).transpose(),
        })
    }

    /// Backpropagates `dlogits` (`n x K`, the loss gradient with respect to
    /// each sample's logits) through the cached forward pass.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &DMatrix<f64>) -> Result<GradientTape, NetError> {
        if cache.generation != self.generation {
            return Err(NetError::StaleCache {
                cache: cache.generation,
                net: self.generation,
            });
        }
        if dlogits.shape() != cache.logits.shape() {
            return Err(NetError::Shape {
                expected: format!("{:?}", cache.logits.shape()),
                got: format!("{:?}", dlogits.shape()),
            });
        }
        let mut tape = GradientTape::zeros_like(self);
        if !self.head.frozen {
            tape.head = dlogits.transpose() * &cache.activations;
        }
        let mut grad = dlogits * &self.head.weights;

        if let Some(cap) = self.eh_clip {
            for (r, raw) in cache.raw_activations.row_iter().enumerate() {
                let sq = raw.norm_squared();
                if sq > cap {
                    let norm = sq.sqrt();
                    let scale = cap.sqrt() / norm;
                    let dir = raw / norm;
                    let along = grad.row(r).dot(&dir);
                    let row = (grad.row(r) - dir * along) * scale;
                    grad.set_row(r, &row);
                }
            }
        }

        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dpre = grad.zip_map(&cache.pre[i], |g, z| if z > 0.0 { g } else { 0.0 });
            tape.layers[i].weights = dpre.transpose() * &cache.inputs[i];
            tape.layers[i].bias = dpre.row_sum().transpose();
            if i > 0 {
                grad = dpre * &layer.weights;
            }
        }
        Ok(tape)
    }

    /// SHA-256 of the head weights (row-major, little-endian), hex encoded.
    pub fn head_hash(&self) -> String {
        let mut hasher = Sha256::new();
        let w = &self.head.weights;
        for r in 0..w.nrows() {
            for c in 0..w.ncols() {
                hasher.update(w[(r, c)].to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema: CHECKPOINT_SCHEMA,
            input_dim: self.input_dim,
            hidden_dims: self.hidden_dims(),
            activation_cap: self.eh_clip,
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    rows: l.weights.nrows(),
                    cols: l.weights.ncols(),
                    weights: row_major(&l.weights),
                    bias: l.bias.as_slice().to_vec(),
                })
                .collect(),
            head: HeadRecord {
                rows: self.head.weights.nrows(),
                cols: self.head.weights.ncols(),
                weights: row_major(&self.head.weights),
                frozen: self.head.frozen,
                etf: self.head.provenance,
            },
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, NetError> {
        if ck.schema != CHECKPOINT_SCHEMA {
            return Err(NetError::Checkpoint(format!("unsupported schema {}", ck.schema)));
        }
        if ck.layers.len() != ck.hidden_dims.len() {
            return Err(NetError::Checkpoint("layer count does not match hidden_dims".into()));
        }
        let mut layers = Vec::with_capacity(ck.layers.len());
        let mut fan_in = ck.input_dim;
        for (rec, &width) in ck.layers.iter().zip(&ck.hidden_dims) {
            if rec.rows != width || rec.cols != fan_in {
                return Err(NetError::Checkpoint(format!(
                    "layer shape {}x{} does not chain (expected {width}x{fan_in})",
                    rec.rows, rec.cols
                )));
            }
            if rec.weights.len() != rec.rows * rec.cols || rec.bias.len() != rec.rows {
                return Err(NetError::Checkpoint("layer buffer length mismatch".into()));
            }
            layers.push(Dense {
                weights: DMatrix::from_row_slice(rec.rows, rec.cols, &rec.weights),
                bias: DVector::from_column_slice(&rec.bias),
            });
            fan_in = width;
        }
        let h = &ck.head;
        if h.cols != fan_in || h.weights.len() != h.rows * h.cols {
            return Err(NetError::Checkpoint("head shape mismatch".into()));
        }
        Ok(PolicyNet {
            input_dim: ck.input_dim,
            layers,
            head: Head {
                weights: DMatrix::from_row_slice(h.rows, h.cols, &h.weights),
                frozen: h.frozen,
                provenance: h.etf,
            },
            eh_clip: ck.activation_cap,
            generation: 0,
        })
    }
}

fn backbone<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Vec<Dense> {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut fan_in = input_dim;
    for &width in hidden {
        layers.push(Dense::he_uniform(fan_in, width, rng));
        fan_in = width;
    }
    layers
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn log_softmax_at(logits: impl Iterator<Item = f64> + Clone, index: usize) -> f64 {
    let max = logits.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.clone().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    logits.clone().nth(index).expect("index within logits") - lse
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadRecord {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub frozen: bool,
    pub etf: Option<EtfProvenance>,
}

/// Versioned JSON checkpoint of a [`PolicyNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema: u32,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub activation_cap: Option<f64>,
    pub layers: Vec<LayerRecord>,
    pub head: HeadRecord,
}

/// Plain gradient descent.
pub fn sgd_step(net: &mut PolicyNet, tape: &GradientTape, lr: f64) -> Result<(), NetError> {
    tape.check_finite()?;
    let include_head = !net.is_frozen();
    let grads = tape.blocks(include_head);
    for (params, grads) in net.param_blocks_mut().into_iter().zip(grads) {
        params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * g);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment buffers for one net.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub params: AdamParams,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Adam {
    pub fn new(params: AdamParams) -> Self {
        Adam {
            params,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One bias-corrected Adam update; the non-finite check happens before
    /// any parameter or moment is touched.
    pub fn step(&mut self, net: &mut PolicyNet, tape: &GradientTape, lr: f64) -> Result<(), NetError> {
        tape.check_finite()?;
        let include_head = !net.is_frozen();
        let grads = tape.blocks(include_head);
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        self.steps += 1;
        let AdamParams { beta1, beta2, epsilon } = self.params;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let blocks = net.param_blocks_mut();
        for (b, (params, grads)) in blocks.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[b], &mut self.second[b]);
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

/// Either optimizer, selected by configuration.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, net: &mut PolicyNet, tape: &GradientTape, lr: f64) -> Result<(), NetError> {
        match self {
            Optimizer::Sgd => sgd_step(net, tape, lr),
            Optimizer::Adam(adam) => adam.step(net, tape, lr),
        }
    }
}

/// Gradient of `sum_n psi_n * (-log p_n[a_n])` with respect to the logits:
/// row `n` is `psi_n * (p_n - onehot(a_n))`.
pub fn policy_logit_grad(probs: &DMatrix<f64>, actions: &[usize], weights: &[f64]) -> DMatrix<f64> {
    let mut g = probs.clone();
    for (n, (&a, &w)) in actions.iter().zip(weights).enumerate() {
        g[(n, a)] -= 1.0;
        let mut row = g.row_mut(n);
        row *= w;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etf::generate_etf;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_states(n: usize, dim: usize, seed: u64) -> DMatrix<f64> {
        let mut r = rng(seed);
        DMatrix::from_fn(n, dim, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let mut net = PolicyNet::learnable(3, &[5], 4, &mut rng(0));
        for block in net.param_blocks_mut() {
            block.iter_mut().for_each(|p| *p = 0.0);
        }
        let f = net.forward(&[0.3, -0.2, 0.9]).unwrap();
        for p in f.probs.iter() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn probabilities_sum_to_one() {
        let net = PolicyNet::learnable(6, &[16, 16], 5, &mut rng(1));
        let cache = net.forward_batch(&random_states(20, 6, 2)).unwrap();
        for row in cache.probs.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn wrong_input_width_is_a_shape_error() {
        let net = PolicyNet::learnable(3, &[4], 2, &mut rng(0));
        assert!(matches!(net.forward(&[1.0, 2.0]), Err(NetError::Shape { .. })));
    }

    #[test]
    fn frozen_etf_head_picks_aligned_action() {
        let etf = generate_etf(4, 8, 2.0, 3).unwrap();
        let net = PolicyNet::with_frozen_etf(8, &[], &etf, &mut rng(0)).unwrap();
        let e_h: f64 = 5.0;
        for k in 0..4 {
            let h = etf.column(k) * (e_h / etf.energy()).sqrt();
            // No hidden layers: the state is the activation.
            let f = net.forward(h.as_slice()).unwrap();
            assert_eq!(f.probs.argmax().0, k);
        }
    }

    #[test]
    fn frame_dimension_must_match_backbone() {
        let etf = generate_etf(3, 5, 1.0, 0).unwrap();
        assert!(PolicyNet::with_frozen_etf(4, &[6], &etf, &mut rng(0)).is_err());
    }

    #[test]
    fn single_sample_logit_gradient_is_p_minus_onehot() {
        let probs = DMatrix::from_row_slice(1, 3, &[0.2, 0.5, 0.3]);
        let g = policy_logit_grad(&probs, &[1], &[1.0]);
        assert_eq!(g, DMatrix::from_row_slice(1, 3, &[0.2, -0.5, 0.3]));
    }

    #[test]
    fn frozen_head_gets_zero_gradient() {
        let etf = generate_etf(3, 8, 1.0, 0).unwrap();
        let net = PolicyNet::with_frozen_etf(4, &[8], &etf, &mut rng(0)).unwrap();
        let cache = net.forward_batch(&random_states(5, 4, 1)).unwrap();
        let g = policy_logit_grad(&cache.probs, &[0, 1, 2, 0, 1], &[1.0; 5]);
        let tape = net.backward(&cache, &g).unwrap();
        assert!(tape.head.iter().all(|&v| v == 0.0));
        assert!(tape.layers[0].weights.amax() > 0.0);
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = PolicyNet::learnable(2, &[3], 2, &mut rng(0));
        let cache = net.forward_batch(&random_states(1, 2, 0)).unwrap();
        let tape = GradientTape::zeros_like(&net);
        sgd_step(&mut net, &tape, 0.1).unwrap();
        let g = DMatrix::zeros(1, 2);
        assert!(matches!(net.backward(&cache, &g), Err(NetError::StaleCache { .. })));
    }

    /// Loss used by the finite-difference checks.
    fn pg_loss(net: &PolicyNet, states: &DMatrix<f64>, actions: &[usize], psi: &[f64]) -> f64 {
        let cache = net.forward_batch(states).unwrap();
        (0..states.nrows())
            .map(|n| -cache.log_prob(n, actions[n]) * psi[n])
            .sum()
    }

    fn gradient_check(mut net: PolicyNet, seed: u64) -> f64 {
        let n = 6;
        let states = random_states(n, net.input_dim(), seed);
        let mut r = rng(seed + 100);
        let k = net.action_count();
        let actions: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let psi: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();

        let cache = net.forward_batch(&states).unwrap();
        let g = policy_logit_grad(&cache.probs, &actions, &psi);
        let tape = net.backward(&cache, &g).unwrap();
        let include_head = !net.is_frozen();
        let analytic: Vec<f64> = tape.blocks(include_head).concat();

        let step = 1e-5;
        let mut numeric = Vec::with_capacity(analytic.len());
        let block_lens: Vec<usize> = net.param_blocks_mut().iter().map(|b| b.len()).collect();
        for (b, len) in block_lens.into_iter().enumerate() {
            for i in 0..len {
                let orig = net.param_blocks_mut()[b][i];
                net.param_blocks_mut()[b][i] = orig + step;
                let up = pg_loss(&net, &states, &actions, &psi);
                net.param_blocks_mut()[b][i] = orig - step;
                let down = pg_loss(&net, &states, &actions, &psi);
                net.param_blocks_mut()[b][i] = orig;
                numeric.push((up - down) / (2.0 * step));
            }
        }
        analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let net = PolicyNet::learnable(4, &[12, 10], 3, &mut rng(7));
        assert!(net.parameter_count() <= 2000);
        let err = gradient_check(net, 7);
        assert!(err < 1e-5, "max relative error {err:e}");
    }

    #[test]
    fn backprop_matches_finite_differences_with_frozen_head_and_cap() {
        let etf = generate_etf(4, 10, 1.0, 1).unwrap();
        let mut net = PolicyNet::with_frozen_etf(5, &[10, 10], &etf, &mut rng(8)).unwrap();
        net.set_activation_cap(Some(0.5));
        let err = gradient_check(net, 9);
        assert!(err < 1e-5, "max relative error {err:e}");
    }

    #[test]
    fn zero_tape_leaves_net_unchanged() {
        let mut net = PolicyNet::learnable(3, &[4], 2, &mut rng(0));
        let before = net.clone();
        let tape = GradientTape::zeros_like(&net);
        sgd_step(&mut net, &tape, 0.5).unwrap();
        assert_eq!(net.layers(), before.layers());
        let mut adam = Adam::new(AdamParams::default());
        adam.step(&mut net, &tape, 0.5).unwrap();
        assert_eq!(net.layers(), before.layers());
        assert_eq!(net.head(), before.head());
    }

    #[test]
    fn sgd_on_scalar_quadratic() {
        // Net with no hidden layers, one input, one output: the head weight is w.
        let mut net = PolicyNet::learnable(1, &[], 1, &mut rng(0));
        net.head_weights_mut().unwrap()[(0, 0)] = 1.0;
        let mut tape = GradientTape::zeros_like(&net);
        // d/dw (w^2 / 2) = w
        tape.head[(0, 0)] = net.head().weights[(0, 0)];
        sgd_step(&mut net, &tape, 0.1).unwrap();
        assert!((net.head().weights[(0, 0)] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut net = PolicyNet::learnable(1, &[], 1, &mut rng(0));
        net.head_weights_mut().unwrap()[(0, 0)] = 1.0;
        let mut tape = GradientTape::zeros_like(&net);
        tape.head[(0, 0)] = 1.0;
        let lr = 1e-3;
        let mut adam = Adam::new(AdamParams::default());
        adam.step(&mut net, &tape, lr).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction: step = lr / (1 + eps).
        let expected = 1.0 - lr / (1.0 + 1e-8);
        assert!((net.head().weights[(0, 0)] - expected).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_step() {
        let mut net = PolicyNet::learnable(2, &[3], 2, &mut rng(0));
        let before = net.clone();
        let mut tape = GradientTape::zeros_like(&net);
        tape.layers[0].bias[1] = f64::NAN;
        assert!(matches!(
            sgd_step(&mut net, &tape, 0.1),
            Err(NetError::NonFiniteGradient { block: 1 })
        ));
        assert_eq!(net.layers(), before.layers());
    }

    #[test]
    fn frozen_head_is_bit_stable_under_training() {
        let etf = generate_etf(3, 16, 1.0, 5).unwrap();
        let mut net = PolicyNet::with_frozen_etf(4, &[16, 16], &etf, &mut rng(2)).unwrap();
        let before = net.head_hash();
        let mut adam = Adam::new(AdamParams::default());
        let states = random_states(8, 4, 3);
        let actions = [0, 1, 2, 0, 1, 2, 0, 1];
        for step in 0..1000 {
            let cache = net.forward_batch(&states).unwrap();
            let psi: Vec<f64> = (0..8).map(|i| ((i + step) % 3) as f64 - 1.0).collect();
            let g = policy_logit_grad(&cache.probs, &actions, &psi);
            let tape = net.backward(&cache, &g).unwrap();
            adam.step(&mut net, &tape, 1e-3).unwrap();
        }
        assert_eq!(before, net.head_hash());
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut net = PolicyNet::learnable(3, &[8], 2, &mut rng(4));
            let mut opt = Optimizer::Adam(Adam::new(AdamParams::default()));
            let states = random_states(4, 3, 5);
            for _ in 0..50 {
                let cache = net.forward_batch(&states).unwrap();
                let g = policy_logit_grad(&cache.probs, &[0, 1, 1, 0], &[1.0, -1.0, 0.5, 2.0]);
                let tape = net.backward(&cache, &g).unwrap();
                opt.step(&mut net, &tape, 1e-2).unwrap();
            }
            net
        };
        assert_eq!(run().to_checkpoint(), run().to_checkpoint());
    }

    #[test]
    fn checkpoint_round_trip() {
        let etf = generate_etf(2, 6, 1.0, 9).unwrap();
        let mut net = PolicyNet::with_frozen_etf(4, &[5, 6], &etf, &mut rng(1)).unwrap();
        net.set_activation_cap(Some(3.0));
        let json = serde_json::to_string(&net.to_checkpoint()).unwrap();
        let back = PolicyNet::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint(), net.to_checkpoint());
        assert_eq!(back.head_hash(), net.head_hash());
        assert_eq!(back.head().provenance.unwrap().seed, 9);
    }

    #[test]
    fn clip_norm_rescales() {
        let net = PolicyNet::learnable(2, &[2], 2, &mut rng(0));
        let mut tape = GradientTape::zeros_like(&net);
        tape.head[(0, 0)] = 3.0;
        tape.layers[0].bias[0] = 4.0;
        assert_eq!(tape.clip_norm(0.5), 5.0);
        assert!((tape.norm() - 0.5).abs() < 1e-12);
    }
}
