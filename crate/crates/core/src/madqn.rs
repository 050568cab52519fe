//! Independent per-UAV deep Q-learning for protocol and rate selection.
//!
//! Every agent owns an online and a target network, an Adam optimiser and a
//! replay buffer. Networks are plain fully connected ReLU stacks with a
//! linear head, trained on the mean squared TD error.

use std::io::{Read, Write};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;
use crate::sim_env::{Action, Env, EnvError, Observation};
use crate::timing::Protocol;

#[derive(Debug, Error)]
pub enum MadqnError {
    #[error("network shapes differ")]
    ShapeMismatch,
    #[error("training diverged: non-finite loss {loss} for agent {agent} at episode {episode}")]
    Divergence { agent: usize, episode: u64, loss: f64 },
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("batch of {batch} requested from a buffer holding {len}")]
    NotEnoughData { batch: usize, len: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid fixed policy: {0}")]
    BadPolicy(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fully connected network: ReLU on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

/// Gradient (or optimiser moment) with the shape of an [`Mlp`].
pub type Grads = Mlp;

impl Mlp {
    /// Layer sizes `[input, hidden.., output]`. Weights and biases are
    /// uniform in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| rng.random_range(-bound..=bound)));
            biases.push(DVector::from_fn(w[1], |_, _| rng.random_range(-bound..=bound)));
        }
        Mlp { weights, biases }
    }

    pub fn zeros_like(&self) -> Grads {
        Mlp {
            weights: self.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: self.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].ncols()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    pub fn input_len(&self) -> usize {
        self.weights[0].ncols()
    }

    pub fn output_len(&self) -> usize {
        self.weights.last().expect("at least one layer").nrows()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Outputs for a batch stored column-wise (`input x batch`).
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let last = self.weights.len() - 1;
        let mut a = x.clone();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if k < last {
                z.apply(|v| *v = v.max(0.0));
            }
            a = z;
        }
        a
    }

    pub fn forward_one(&self, x: &[f64]) -> Vec<f64> {
        self.forward(&DMatrix::from_column_slice(x.len(), 1, x)).as_slice().to_vec()
    }

    /// Mean over the batch of `(Q(x_b)[a_b] - y_b)^2` and its gradient.
    pub fn selected_mse_grad(&self, x: &DMatrix<f64>, actions: &[usize], targets: &[f64]) -> (f64, Grads) {
        let n = x.ncols();
        let last = self.weights.len() - 1;
        // forward, keeping every layer's input and pre-activation
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut pre = Vec::with_capacity(self.weights.len());
        let mut a = x.clone();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a;
            for mut col in z.column_iter_mut() {
                col += b;
            }
            inputs.push(a);
            a = if k < last { z.map(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        let q = a;
        let mut delta = DMatrix::zeros(q.nrows(), n);
        let mut loss = 0.0;
        for (col, (&act, &y)) in actions.iter().zip(targets).enumerate() {
            let e = q[(act, col)] - y;
            loss += e * e;
            delta[(act, col)] = 2.0 * e / n as f64;
        }
        loss /= n as f64;
        let mut grads = self.zeros_like();
        for k in (0..self.weights.len()).rev() {
            grads.weights[k] = &delta * inputs[k].transpose();
            grads.biases[k] = delta.column_sum();
            if k > 0 {
                let mut back = self.weights[k].transpose() * &delta;
                back.zip_apply(&pre[k - 1], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                delta = back;
            }
        }
        (loss, grads)
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes() == other.sizes()
    }

    /// All parameters, layer by layer: weights column-major, then biases.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, params: &[f64]) -> Result<(), MadqnError> {
        if params.len() != self.param_count() {
            return Err(MadqnError::ShapeMismatch);
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let n = w.len();
            w.as_mut_slice().copy_from_slice(&params[at..at + n]);
            at += n;
            let n = b.len();
            b.as_mut_slice().copy_from_slice(&params[at..at + n]);
            at += n;
        }
        Ok(())
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.as_mut_slice().iter_mut().chain(b.as_mut_slice().iter_mut()))
    }

    fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| w.as_slice().iter().chain(b.as_slice()))
    }
}

/// `theta_target <- tau * theta + (1 - tau) * theta_target`.
pub fn soft_update(online: &Mlp, target: &mut Mlp, tau: f64) -> Result<(), MadqnError> {
    if !online.same_shape(target) {
        return Err(MadqnError::ShapeMismatch);
    }
    for (t, o) in target.params_mut().zip(online.params()) {
        *t = tau * o + (1.0 - tau) * *t;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.param_count();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in net.params_mut().zip(grads.params()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
}

/// Fixed-capacity FIFO of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    data: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer {
            capacity,
            data: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends, overwriting the oldest entry once full.
    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.data.len() < self.capacity { 0 } else { self.next };
        self.data[split..].iter().chain(&self.data[..split])
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>, MadqnError> {
        if batch > self.data.len() || batch == 0 {
            return Err(MadqnError::NotEnoughData {
                batch,
                len: self.data.len(),
            });
        }
        Ok((0..batch).map(|_| rng.random_range(0..self.data.len())).collect())
    }

    pub fn get(&self, index: usize) -> &Transition {
        &self.data[index]
    }
}

/// Linear decay from `initial` to `final_rate` over `decay_episodes`, then flat.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub final_rate: f64,
    pub decay_episodes: u64,
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        EpsilonSchedule {
            initial: 1.0,
            final_rate: 0.1,
            decay_episodes: 500,
        }
    }
}

impl EpsilonSchedule {
    /// Exploration rate for 1-based `episode`.
    pub fn value(&self, episode: u64) -> f64 {
        if episode < self.decay_episodes {
            self.initial - episode as f64 * (self.initial - self.final_rate) / self.decay_episodes as f64
        } else {
            self.final_rate
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Epsilon-greedy choice over the network outputs for `features`.
pub fn select_action<R: Rng + ?Sized>(q: &Mlp, features: &[f64], epsilon: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < epsilon {
        rng.random_range(0..q.output_len())
    } else {
        argmax(&q.forward_one(features))
    }
}

/// `r + gamma * max_a q_next[a]`.
pub fn td_target(reward: f64, q_next: &[f64], gamma: f64) -> f64 {
    reward + gamma * q_next.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub episodes: u64,
    pub steps_per_episode: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Weight of the online network in each soft update.
    pub tau_soft: f64,
    pub epsilon: EpsilonSchedule,
    pub hidden: Vec<usize>,
    /// Learning starts once an agent's buffer holds this many transitions.
    /// `None` waits for `warmup_episodes` worth of steps (capped at capacity).
    pub warmup_transitions: Option<usize>,
    pub warmup_episodes: u64,
    /// Rewards are multiplied by this before storage.
    pub reward_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 1000,
            steps_per_episode: 100,
            batch_size: 256,
            buffer_capacity: 25_000,
            gamma: 0.95,
            learning_rate: 1e-4,
            tau_soft: 0.001,
            epsilon: EpsilonSchedule::default(),
            hidden: vec![256, 128],
            warmup_transitions: None,
            warmup_episodes: 250,
            reward_scale: 1.0,
        }
    }
}

impl TrainConfig {
    /// Small-fleet preset that trains in minutes on one CPU core.
    ///
    /// Positions are redrawn every step, so the next observation does not
    /// depend on the action and the task is a contextual bandit: `gamma` is 0.
    /// Smaller networks, a faster soft update and reward scaling keep the
    /// noisy delay rewards from swamping the differences between actions.
    pub fn desk_scale() -> Self {
        TrainConfig {
            episodes: 300,
            steps_per_episode: 100,
            batch_size: 256,
            buffer_capacity: 25_000,
            gamma: 0.0,
            learning_rate: 1e-4,
            tau_soft: 0.01,
            epsilon: EpsilonSchedule {
                initial: 1.0,
                final_rate: 0.1,
                decay_episodes: 200,
            },
            hidden: vec![64, 64],
            warmup_transitions: Some(1000),
            warmup_episodes: 0,
            reward_scale: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<(), MadqnError> {
        let bad = |s: &str| Err(MadqnError::Config(s.to_string()));
        if self.episodes == 0 || self.steps_per_episode == 0 {
            return bad("episodes and steps_per_episode must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return bad("batch_size must be positive and at most buffer_capacity");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.tau_soft) {
            return bad("tau_soft must be in [0, 1]");
        }
        let e = &self.epsilon;
        if !(0.0..=1.0).contains(&e.initial) || !(0.0..=1.0).contains(&e.final_rate) || e.decay_episodes == 0 {
            return bad("epsilon rates must be in [0, 1] with a positive decay period");
        }
        if !(self.reward_scale.is_finite() && self.reward_scale > 0.0) {
            return bad("reward_scale must be positive");
        }
        Ok(())
    }

    pub fn warmup(&self) -> usize {
        let w = self
            .warmup_transitions
            .unwrap_or((self.warmup_episodes * self.steps_per_episode) as usize);
        w.clamp(self.batch_size, self.buffer_capacity)
    }
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub online: Mlp,
    pub target: Mlp,
    pub optimizer: Adam,
    pub buffer: ReplayBuffer,
}

impl Agent {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, cfg: &TrainConfig, rng: &mut R) -> Self {
        let mut sizes = vec![input];
        sizes.extend(&cfg.hidden);
        sizes.push(output);
        let online = Mlp::new(&sizes, rng);
        Agent {
            target: online.clone(),
            optimizer: Adam::new(&online, cfg.learning_rate),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            online,
        }
    }

    /// One gradient step on a minibatch drawn from the buffer, followed by a
    /// soft target update. Returns the loss before the step.
    pub fn train_step<R: Rng + ?Sized>(&mut self, cfg: &TrainConfig, rng: &mut R) -> Result<f64, MadqnError> {
        let idx = self.buffer.sample_indices(cfg.batch_size, rng)?;
        let n_in = self.online.input_len();
        let mut x = DMatrix::zeros(n_in, idx.len());
        let mut x_next = DMatrix::zeros(n_in, idx.len());
        let mut actions = Vec::with_capacity(idx.len());
        let mut rewards = Vec::with_capacity(idx.len());
        for (col, &i) in idx.iter().enumerate() {
            let t = self.buffer.get(i);
            x.column_mut(col).copy_from_slice(&t.obs);
            x_next.column_mut(col).copy_from_slice(&t.next_obs);
            actions.push(t.action);
            rewards.push(t.reward);
        }
        let q_next = self.target.forward(&x_next);
        let targets: Vec<f64> = q_next
            .column_iter()
            .zip(&rewards)
            .map(|(col, &r)| td_target(r, col.as_slice(), cfg.gamma))
            .collect();
        let loss = fit_batch(&mut self.online, &mut self.optimizer, &x, &actions, &targets)?;
        soft_update(&self.online, &mut self.target, cfg.tau_soft)?;
        Ok(loss)
    }
}

/// One Adam step on the mean squared error of the selected outputs.
pub fn fit_batch(net: &mut Mlp, opt: &mut Adam, x: &DMatrix<f64>, actions: &[usize], targets: &[f64]) -> Result<f64, MadqnError> {
    let (loss, grads) = net.selected_mse_grad(x, actions, targets);
    if !loss.is_finite() {
        return Err(MadqnError::NonFiniteLoss(loss));
    }
    opt.step(net, &grads);
    Ok(loss)
}

/// Per-episode training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: u64,
    /// Mean reward per step of each agent (unscaled, ms).
    pub agent_rewards: Vec<f64>,
    pub mean_reward: f64,
    /// Mean fleet delay over the episode's steps, ms.
    pub mean_objective: f64,
    pub epsilon: f64,
    /// Mean training loss over the episode, `None` before learning starts.
    pub mean_loss: Option<f64>,
}

/// Runs the training loop and returns the agents and the episode log.
pub fn train(env: &mut Env, cfg: &TrainConfig, seed: u64) -> Result<(Vec<Agent>, Vec<EpisodeLog>), MadqnError> {
    train_with(env, cfg, seed, |_| {})
}

/// [`train`] with a callback after every episode.
pub fn train_with(
    env: &mut Env,
    cfg: &TrainConfig,
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeLog),
) -> Result<(Vec<Agent>, Vec<EpisodeLog>), MadqnError> {
    cfg.validate()?;
    let m = env.cfg.fleet_size;
    let psi = env.cfg.psi_max;
    let scale = env.cfg.distance_scale;
    let n_in = env.cfg.feature_len();
    let n_out = env.action_size();
    let mut agents: Vec<Agent> = (0..m)
        .map(|j| Agent::new(n_in, n_out, cfg, &mut substream(seed, "init_network", j as u64)))
        .collect();
    let mut explore: Vec<ChaCha8Rng> = (0..m).map(|j| substream(seed, "epsilon", j as u64)).collect();
    let mut batch_rng: Vec<ChaCha8Rng> = (0..m).map(|j| substream(seed, "minibatch", j as u64)).collect();
    let warmup = cfg.warmup();
    let mut log = Vec::with_capacity(cfg.episodes as usize);

    for episode in 1..=cfg.episodes {
        let epsilon = cfg.epsilon.value(episode);
        let mut obs: Vec<Vec<f64>> = env.reset(episode).iter().map(|o| o.features(psi, scale)).collect();
        let mut reward_sum = vec![0.0; m];
        let mut objective_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for _ in 0..cfg.steps_per_episode {
            let actions: Vec<usize> = (0..m)
                .map(|j| select_action(&agents[j].online, &obs[j], epsilon, &mut explore[j]))
                .collect();
            let step = env.step(&actions)?;
            let next: Vec<Vec<f64>> = step.observations.iter().map(|o| o.features(psi, scale)).collect();
            objective_sum += step.objective;
            for j in 0..m {
                reward_sum[j] += step.rewards[j];
                agents[j].buffer.push(Transition {
                    obs: obs[j].clone(),
                    action: actions[j],
                    reward: step.rewards[j] * cfg.reward_scale,
                    next_obs: next[j].clone(),
                });
            }
            for (j, agent) in agents.iter_mut().enumerate() {
                if agent.buffer.len() >= warmup {
                    let loss = agent.train_step(cfg, &mut batch_rng[j]).map_err(|e| match e {
                        MadqnError::NonFiniteLoss(loss) => MadqnError::Divergence { agent: j, episode, loss },
                        other => other,
                    })?;
                    loss_sum += loss;
                    loss_count += 1;
                }
            }
            obs = next;
        }
        let steps = cfg.steps_per_episode as f64;
        let agent_rewards: Vec<f64> = reward_sum.iter().map(|r| r / steps).collect();
        let entry = EpisodeLog {
            episode,
            mean_reward: agent_rewards.iter().sum::<f64>() / m as f64,
            agent_rewards,
            mean_objective: objective_sum / steps,
            epsilon,
            mean_loss: (loss_count > 0).then(|| loss_sum / loss_count as f64),
        };
        on_episode(&entry);
        log.push(entry);
    }
    Ok((agents, log))
}

/// Who decides the UAVs' actions during evaluation.
#[derive(Debug, Clone)]
pub enum Policy {
    /// Greedy actions of the trained online networks, one per UAV.
    Learned(Vec<Mlp>),
    Fixed(Action),
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BaselineKind {
    Fixed { protocol: Protocol, rate: u32 },
    Random,
}

/// Fixed or random baseline for an action space with rates up to `psi_max`.
pub fn baseline_policy(kind: BaselineKind, psi_max: u32) -> Result<Policy, MadqnError> {
    match kind {
        BaselineKind::Fixed { protocol, rate } => {
            if rate == 0 || rate > psi_max {
                return Err(MadqnError::BadPolicy(format!("rate {rate} is outside 1..={psi_max}")));
            }
            Ok(Policy::Fixed(Action { protocol, rate }))
        }
        BaselineKind::Random => Ok(Policy::Random),
    }
}

impl Policy {
    pub fn label(&self) -> String {
        match self {
            Policy::Learned(_) => "learned".into(),
            Policy::Fixed(a) => format!("fixed_{}_{}", a.protocol, a.rate),
            Policy::Random => "random".into(),
        }
    }

    pub fn act<R: Rng + ?Sized>(&self, j: usize, features: &[f64], psi_max: u32, rng: &mut R) -> usize {
        match self {
            Policy::Learned(nets) => argmax(&nets[j].forward_one(features)),
            Policy::Fixed(a) => a.index(psi_max),
            Policy::Random => rng.random_range(0..Action::space_size(psi_max)),
        }
    }
}

/// Outcome of running a policy without learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub policy: String,
    pub seed: u64,
    pub episodes: u64,
    pub steps: u64,
    /// Mean fleet delay over all evaluated steps, ms.
    pub mean_delay_ms: f64,
    pub mean_reward: f64,
    /// Mean wall-clock time of one UAV's action selection, microseconds.
    pub decision_latency_us: f64,
    /// How often each action index was chosen.
    pub action_counts: Vec<u64>,
}

/// Runs `policy` for `episodes` x `steps` on `env` and averages the fleet delay.
pub fn evaluate(env: &mut Env, policy: &Policy, episodes: u64, steps: u64, seed: u64) -> Result<Evaluation, MadqnError> {
    let m = env.cfg.fleet_size;
    let psi = env.cfg.psi_max;
    let scale = env.cfg.distance_scale;
    if let Policy::Learned(nets) = policy {
        if nets.len() != m || nets.iter().any(|n| n.input_len() != env.cfg.feature_len() || n.output_len() != env.action_size()) {
            return Err(MadqnError::ShapeMismatch);
        }
    }
    let mut rng = substream(seed, "evaluation_policy", 0);
    let mut delay = 0.0;
    let mut reward = 0.0;
    let mut decide_ns = 0u128;
    let mut decisions = 0u64;
    let mut counts = vec![0u64; env.action_size()];
    for episode in 0..episodes {
        let mut obs = env.reset(episode);
        for _ in 0..steps {
            let mut actions = Vec::with_capacity(m);
            for (j, o) in obs.iter().enumerate() {
                let start = Instant::now();
                let a = policy.act(j, &o.features(psi, scale), psi, &mut rng);
                decide_ns += start.elapsed().as_nanos();
                decisions += 1;
                counts[a] += 1;
                actions.push(a);
            }
            let step = env.step(&actions)?;
            delay += step.objective;
            reward += step.rewards.iter().sum::<f64>() / m as f64;
            obs = step.observations;
        }
    }
    let n = (episodes * steps).max(1) as f64;
    Ok(Evaluation {
        policy: policy.label(),
        seed,
        episodes,
        steps,
        mean_delay_ms: delay / n,
        mean_reward: reward / n,
        decision_latency_us: decide_ns as f64 / 1000.0 / decisions.max(1) as f64,
        action_counts: counts,
    })
}

/// Observation features for every UAV of `observations`.
pub fn features_of(observations: &[Observation], psi_max: u32, distance_scale: f64) -> Vec<Vec<f64>> {
    observations.iter().map(|o| o.features(psi_max, distance_scale)).collect()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RIDQ";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes networks in the checkpoint format: magic `RIDQ`, version, network
/// count, then per network the layer count, the layer sizes and the
/// parameters of [`Mlp::flat`]. Integers are u32 and floats f64, little-endian.
pub fn write_checkpoint<W: Write>(out: &mut W, nets: &[Mlp]) -> Result<(), MadqnError> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(nets.len() as u32).to_le_bytes())?;
    for net in nets {
        let sizes = net.sizes();
        out.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in &sizes {
            out.write_all(&(*s as u32).to_le_bytes())?;
        }
        for p in net.flat() {
            out.write_all(&p.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: &mut R) -> Result<Vec<Mlp>, MadqnError> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(MadqnError::Checkpoint("bad magic".into()));
    }
    let version = read_u32(input)?;
    if version != CHECKPOINT_VERSION {
        return Err(MadqnError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(input)? as usize;
    let mut nets = Vec::with_capacity(count);
    for _ in 0..count {
        let layers = read_u32(input)? as usize;
        if !(2..=64).contains(&layers) {
            return Err(MadqnError::Checkpoint(format!("implausible layer count {layers}")));
        }
        let sizes = (0..layers).map(|_| read_u32(input).map(|s| s as usize)).collect::<Result<Vec<_>, _>>()?;
        let mut net = Mlp {
            weights: sizes.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: sizes[1..].iter().map(|&n| DVector::zeros(n)).collect(),
        };
        let mut params = vec![0.0; net.param_count()];
        let mut buf = [0u8; 8];
        for p in params.iter_mut() {
            input.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        net.set_flat(&params)?;
        nets.push(net);
    }
    Ok(nets)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, MadqnError> {
    let mut buf = [0u8; 4];
    input.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng() -> ChaCha8Rng {
        substream(11, "test", 0)
    }

    #[test]
    fn epsilon_schedule_formula() {
        let s = EpsilonSchedule::default();
        assert_eq!(s.value(0), 1.0);
        assert!((s.value(250) - 0.55).abs() < 1e-12);
        assert!((s.value(499) - (1.0 - 499.0 * 0.9 / 500.0)).abs() < 1e-12);
        assert_eq!(s.value(500), 0.1);
        assert_eq!(s.value(10_000), 0.1);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn td_target_cases() {
        assert_eq!(td_target(2.0, &[1.0, 7.0], 0.0), 2.0);
        assert!((td_target(-1.0, &[4.0, 4.0, 4.0], 0.95) - (-1.0 + 0.95 * 4.0)).abs() < 1e-12);
    }

    #[test]
    fn soft_update_cases() {
        let mut r = rng();
        let a = Mlp::new(&[2, 3, 2], &mut r);
        let b0 = Mlp::new(&[2, 3, 2], &mut r);
        let mut b = b0.clone();
        soft_update(&a, &mut b, 0.0).unwrap();
        assert_eq!(b, b0);
        soft_update(&a, &mut b, 1.0).unwrap();
        assert_eq!(b, a);
        let mut s = Mlp::new(&[1, 1], &mut r);
        let mut t = s.clone();
        s.set_flat(&[2.0, 0.0]).unwrap();
        t.set_flat(&[4.0, 0.0]).unwrap();
        soft_update(&s, &mut t, 0.5).unwrap();
        assert_eq!(t.flat(), vec![3.0, 0.0]);
        let other = Mlp::new(&[2, 4, 2], &mut r);
        assert!(soft_update(&other, &mut b, 0.5).is_err());
    }

    #[test]
    fn linear_unit_gradient_by_hand() {
        // q = w x + b, one sample, target y: dL/dw = 2 (q - y) x, dL/db = 2 (q - y)
        let mut net = Mlp::new(&[1, 1], &mut rng());
        net.set_flat(&[0.5, 0.25]).unwrap();
        let x = DMatrix::from_column_slice(1, 1, &[2.0]);
        let (loss, g) = net.selected_mse_grad(&x, &[0], &[3.0]);
        let e = 0.5 * 2.0 + 0.25 - 3.0;
        assert!((loss - e * e).abs() < 1e-12);
        assert!((g.weights[0][(0, 0)] - 2.0 * e * 2.0).abs() < 1e-12);
        assert!((g.biases[0][0] - 2.0 * e).abs() < 1e-12);
    }

    #[test]
    fn matched_targets_leave_parameters() {
        let mut r = rng();
        let mut net = Mlp::new(&[3, 5, 4], &mut r);
        let x = DMatrix::from_fn(3, 6, |_, _| r.random_range(-1.0..1.0));
        let q = net.forward(&x);
        let actions = vec![0, 1, 2, 3, 0, 1];
        let targets: Vec<f64> = actions.iter().enumerate().map(|(c, &a)| q[(a, c)]).collect();
        let before = net.clone();
        let mut opt = Adam::new(&net, 1e-3);
        let loss = fit_batch(&mut net, &mut opt, &x, &actions, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn replay_is_fifo() {
        let mut buf = ReplayBuffer::new(3);
        let t = |k: usize| Transition {
            obs: vec![k as f64],
            action: k,
            reward: 0.0,
            next_obs: vec![],
        };
        for k in 0..5 {
            buf.push(t(k));
        }
        assert_eq!(buf.len(), 3);
        let order: Vec<usize> = buf.iter().map(|t| t.action).collect();
        assert_eq!(order, vec![2, 3, 4]);
        assert!(buf.sample_indices(4, &mut rng()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut r = rng();
        let nets = vec![Mlp::new(&[4, 8, 3], &mut r), Mlp::new(&[4, 8, 3], &mut r)];
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &nets).unwrap();
        assert_eq!(&bytes[..4], b"RIDQ");
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, nets);
        bytes[0] = b'X';
        assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn baselines() {
        let p = baseline_policy(
            BaselineKind::Fixed {
                protocol: Protocol::Ble4,
                rate: 9,
            },
            10,
        )
        .unwrap();
        let mut r = rng();
        for _ in 0..10 {
            assert_eq!(p.act(0, &[], 10, &mut r), 8);
        }
        assert!(baseline_policy(
            BaselineKind::Fixed {
                protocol: Protocol::Wifi,
                rate: 11
            },
            10
        )
        .is_err());
    }
}
