//! Multi-agent protocol-selection environment.
//!
//! Each UAV picks a protocol and a message rate every step. The step applies
//! the choices, evaluates the expected link delays of the frozen snapshot,
//! pays every UAV its reward and then scatters the fleet to new random
//! positions (unless placement is frozen).

use log::warn;
use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expected_delay::{objective_from_links, DelayError, DelayModel, LinkSummary, UndeliverablePolicy};
use crate::interference::{Fleet, InterferenceError, LinkBudget, RadioConfig};
use crate::rng::substream;
use crate::timing::{Protocol, TimingConfig, WifiChannel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action index {index} is outside 0..{size}")]
    BadAction { index: usize, size: usize },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error(transparent)]
    Delay(#[from] DelayError),
    #[error(transparent)]
    Interference(#[from] InterferenceError),
}

/// One UAV's radio choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Action {
    pub protocol: Protocol,
    pub rate: u32,
}

impl Action {
    pub fn new(protocol: Protocol, rate: u32, psi_max: u32) -> Result<Self, EnvError> {
        if rate == 0 || rate > psi_max {
            return Err(EnvError::Config(format!("rate {rate} is outside 1..={psi_max}")));
        }
        Ok(Action { protocol, rate })
    }

    /// Number of discrete actions, `3 * psi_max`.
    pub fn space_size(psi_max: u32) -> usize {
        3 * psi_max as usize
    }

    /// `protocol_index * psi_max + (rate - 1)`.
    pub fn index(self, psi_max: u32) -> usize {
        self.protocol.index() * psi_max as usize + (self.rate as usize - 1)
    }

    pub fn from_index(index: usize, psi_max: u32) -> Result<Self, EnvError> {
        let size = Action::space_size(psi_max);
        if index >= size {
            return Err(EnvError::BadAction { index, size });
        }
        let p = psi_max as usize;
        Ok(Action {
            protocol: Protocol::from_index(index / p).expect("index below 3 * psi_max"),
            rate: (index % p) as u32 + 1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { alpha: 1.0, beta: 1.0 }
    }
}

/// How the configured area sizes are read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AreaSemantics {
    /// Each entry is the side of a square, in metres.
    #[default]
    Side,
    /// Each entry is a surface in square metres.
    Area,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Fresh uniform positions after every step.
    #[default]
    Random,
    /// Positions drawn once per episode and kept.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub fleet_size: usize,
    /// Candidate area sizes. One is drawn per episode when there are several.
    pub areas: Vec<f64>,
    pub area_semantics: AreaSemantics,
    /// Altitude band `[low, high]`, metres.
    pub altitude: [f64; 2],
    pub psi_max: u32,
    pub reward: RewardWeights,
    pub placement: Placement,
    pub timing: TimingConfig,
    pub budget: LinkBudget,
    pub undeliverable: UndeliverablePolicy,
    /// Divides neighbour distances in the feature vector, metres.
    pub distance_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            fleet_size: 10,
            areas: vec![100.0, 500.0, 1000.0, 3000.0, 5000.0, 10000.0],
            area_semantics: AreaSemantics::Side,
            altitude: [30.0, 120.0],
            psi_max: 10,
            reward: RewardWeights::default(),
            placement: Placement::Random,
            timing: TimingConfig::default(),
            budget: LinkBudget::default(),
            undeliverable: UndeliverablePolicy::default(),
            distance_scale: 1000.0,
        }
    }
}

impl EnvConfig {
    /// Five UAVs and five rates per protocol over the given area sizes, with
    /// distances scaled to the BLE 4 range.
    pub fn desk_scale(areas: Vec<f64>) -> Self {
        EnvConfig {
            fleet_size: 5,
            psi_max: 5,
            areas,
            distance_scale: 200.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |s: &str| Err(EnvError::Config(s.to_string()));
        if self.fleet_size == 0 {
            return bad("fleet_size must be at least 1");
        }
        if self.areas.is_empty() || self.areas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return bad("areas must be a non-empty list of positive sizes");
        }
        if !(self.altitude[0].is_finite() && self.altitude[1].is_finite() && self.altitude[0] <= self.altitude[1]) {
            return bad("altitude must be [low, high] with low <= high");
        }
        if self.psi_max == 0 {
            return bad("psi_max must be at least 1");
        }
        if !(self.reward.alpha.is_finite() && self.reward.beta.is_finite()) {
            return bad("reward weights must be finite");
        }
        if !(self.distance_scale > 0.0) {
            return bad("distance_scale must be positive");
        }
        self.budget.validate()?;
        Ok(())
    }

    /// Side length of the square for configured entry `index`, metres.
    pub fn side(&self, index: usize) -> f64 {
        let a = self.areas[index];
        match self.area_semantics {
            AreaSemantics::Side => a,
            AreaSemantics::Area => a.sqrt(),
        }
    }

    /// Length of [`Observation::features`].
    pub fn feature_len(&self) -> usize {
        6 + (self.fleet_size - 1) * NEIGHBOR_FEATURES
    }
}

/// Uniform positions in `[0, side]^2` with altitudes in the band.
pub fn random_positions<R: Rng + ?Sized>(m: usize, side: f64, altitude: [f64; 2], rng: &mut R) -> Vec<Vector3<f64>> {
    (0..m)
        .map(|_| {
            let x = rng.random_range(0.0..=side);
            let y = rng.random_range(0.0..=side);
            let z = if altitude[1] > altitude[0] { rng.random_range(altitude[0]..=altitude[1]) } else { altitude[0] };
            Vector3::new(x, y, z)
        })
        .collect()
}

/// One neighbour as seen by an observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborObs {
    pub id: usize,
    pub distance: f64,
    pub protocol: Protocol,
    pub rate: u32,
}

const NEIGHBOR_FEATURES: usize = 5;

/// Distance feature of an empty neighbour slot. Real distances are >= 0.
pub const PAD_DISTANCE: f64 = -1.0;

/// Local observation of one UAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub protocol: Protocol,
    /// Last rate used on each protocol, 0 if never used.
    pub rates: [u32; 3],
    /// Neighbours within reach of this UAV on any protocol, ascending id.
    pub neighbors: Vec<NeighborObs>,
    /// Number of neighbour slots (fleet size minus one).
    pub slots: usize,
}

impl Observation {
    /// Fixed-length network input: own protocol one-hot, own rates over
    /// `psi_max`, then per slot (distance / scale, protocol one-hot, rate /
    /// `psi_max`). Empty slots hold `PAD_DISTANCE` and zeros.
    pub fn features(&self, psi_max: u32, distance_scale: f64) -> Vec<f64> {
        let psi = psi_max as f64;
        let mut out = Vec::with_capacity(6 + self.slots * NEIGHBOR_FEATURES);
        out.extend(one_hot(self.protocol));
        out.extend(self.rates.iter().map(|&r| r as f64 / psi));
        for k in 0..self.slots {
            match self.neighbors.get(k) {
                Some(n) => {
                    out.push(n.distance / distance_scale);
                    out.extend(one_hot(n.protocol));
                    out.push(n.rate as f64 / psi);
                }
                None => {
                    out.push(PAD_DISTANCE);
                    out.extend([0.0; 4]);
                }
            }
        }
        out
    }
}

fn one_hot(p: Protocol) -> [f64; 3] {
    let mut v = [0.0; 3];
    v[p.index()] = 1.0;
    v
}

/// Observation of UAV `j` on a frozen snapshot. `rates` are `j`'s last rates.
pub fn observe(fleet: &Fleet, j: usize, rates: [u32; 3]) -> Observation {
    let mut neighbors = Vec::new();
    for k in 0..fleet.len() {
        let radio = fleet.radios[k];
        if k != j && Protocol::ALL.iter().any(|&p| fleet.in_range(k, j, p)) {
            neighbors.push(NeighborObs {
                id: k,
                distance: fleet.distance(k, j),
                protocol: radio.protocol,
                rate: radio.rate,
            });
        }
    }
    Observation {
        protocol: fleet.radios[j].protocol,
        rates,
        neighbors,
        slots: fleet.len().saturating_sub(1),
    }
}

/// Reward of UAV `j`: `alpha * local + beta * global` with
/// `local = -mean_i d(j,i)` and `global = mean_i (d_global - d(j,i))`, ms.
/// A UAV that reaches nobody gets 0.
pub fn reward(j: usize, links: &[LinkSummary], m: usize, weights: &RewardWeights) -> f64 {
    let per_uav = per_sender_means(links, m);
    let global = objective_from_links(m, &per_uav);
    reward_from_means(per_uav[j], global, weights)
}

fn reward_from_means(own: Option<f64>, global: f64, weights: &RewardWeights) -> f64 {
    match own {
        Some(d) => weights.alpha * -d + weights.beta * (global - d),
        None => 0.0,
    }
}

fn per_sender_means(links: &[LinkSummary], m: usize) -> Vec<Option<f64>> {
    let mut sums = vec![(0.0, 0usize); m];
    for link in links {
        sums[link.sender].0 += link.mean_delay_ms;
        sums[link.sender].1 += 1;
    }
    sums.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()
}

/// Everything one step produced.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub rewards: Vec<f64>,
    /// Fleet-wide mean delay of the evaluated snapshot, ms.
    pub objective: f64,
    pub links: Vec<LinkSummary>,
    pub observations: Vec<Observation>,
}

/// Environment state. One step at a time.
#[derive(Debug, Clone)]
pub struct Env {
    pub cfg: EnvConfig,
    model: DelayModel,
    seed: u64,
    episode: u64,
    side: f64,
    positions: Vec<Vector3<f64>>,
    shadowing: Vec<f64>,
    channels: Vec<WifiChannel>,
    radios: Vec<RadioConfig>,
    rates: Vec<[u32; 3]>,
    placement_rng: ChaCha8Rng,
    shadowing_rng: ChaCha8Rng,
}

impl Env {
    pub fn new(cfg: EnvConfig, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        let model = DelayModel::new(cfg.timing.clone(), cfg.psi_max, cfg.undeliverable)?;
        let m = cfg.fleet_size;
        let mut env = Env {
            model,
            seed,
            episode: 0,
            side: cfg.side(0),
            positions: Vec::new(),
            shadowing: Vec::new(),
            channels: vec![WifiChannel::Ch1; m],
            radios: Vec::new(),
            rates: vec![[0; 3]; m],
            placement_rng: substream(seed, "placement", 0),
            shadowing_rng: substream(seed, "shadowing", 0),
            cfg,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn model(&self) -> &DelayModel {
        &self.model
    }

    pub fn action_size(&self) -> usize {
        Action::space_size(self.cfg.psi_max)
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    /// Starts episode `episode`: draws the area (when several are configured),
    /// the Wi-Fi channels, a random initial radio per UAV and the first
    /// placement. Everything comes from streams keyed by the episode.
    pub fn reset(&mut self, episode: u64) -> Vec<Observation> {
        let m = self.cfg.fleet_size;
        self.episode = episode;
        let area_index = if self.cfg.areas.len() > 1 {
            substream(self.seed, "area", episode).random_range(0..self.cfg.areas.len())
        } else {
            0
        };
        self.side = self.cfg.side(area_index);
        let mut channel_rng = substream(self.seed, "channel", episode);
        self.channels = (0..m).map(|_| WifiChannel::ALL[channel_rng.random_range(0..3)]).collect();
        let mut init_rng = substream(self.seed, "initial_radio", episode);
        let size = self.action_size();
        self.rates = vec![[0; 3]; m];
        self.radios = (0..m)
            .map(|j| {
                let a = Action::from_index(init_rng.random_range(0..size), self.cfg.psi_max).expect("index in range");
                self.rates[j][a.protocol.index()] = a.rate;
                RadioConfig::new(a.protocol, a.rate).with_channel(self.channels[j])
            })
            .collect();
        self.placement_rng = substream(self.seed, "placement", episode);
        self.shadowing_rng = substream(self.seed, "shadowing", episode);
        self.place();
        self.observations()
    }

    fn place(&mut self) {
        let m = self.cfg.fleet_size;
        self.positions = random_positions(m, self.side, self.cfg.altitude, &mut self.placement_rng);
        self.shadowing = self.cfg.budget.sample_shadowing(m, &mut self.shadowing_rng);
    }

    pub fn fleet(&self) -> Fleet {
        Fleet::new(self.positions.clone(), self.radios.clone(), self.shadowing.clone(), self.cfg.budget.clone())
            .expect("sizes kept consistent")
    }

    pub fn observations(&self) -> Vec<Observation> {
        let fleet = self.fleet();
        (0..self.cfg.fleet_size).map(|j| observe(&fleet, j, self.rates[j])).collect()
    }

    /// Applies one action index per UAV, pays rewards on the current
    /// snapshot, then moves the fleet (random placement) and observes.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        let m = self.cfg.fleet_size;
        if actions.len() != m {
            return Err(EnvError::ActionCount {
                expected: m,
                got: actions.len(),
            });
        }
        let decoded = actions
            .iter()
            .map(|&a| Action::from_index(a, self.cfg.psi_max))
            .collect::<Result<Vec<_>, _>>()?;
        for (j, a) in decoded.iter().enumerate() {
            self.radios[j] = RadioConfig::new(a.protocol, a.rate).with_channel(self.channels[j]);
            self.rates[j][a.protocol.index()] = a.rate;
        }
        let fleet = self.fleet();
        let links = self.model.link_table(&fleet)?;
        let per_uav = per_sender_means(&links, m);
        let objective = objective_from_links(m, &per_uav);
        let rewards: Vec<f64> = per_uav.iter().map(|d| reward_from_means(*d, objective, &self.cfg.reward)).collect();
        check_reward_identity(&rewards, &per_uav, objective, &self.cfg.reward);
        if self.cfg.placement == Placement::Random {
            self.place();
        }
        Ok(StepResult {
            rewards,
            objective,
            links,
            observations: self.observations(),
        })
    }
}

/// `sum_j r_j = -(alpha + beta) * m * g + beta * k * g`, with `k` the UAVs
/// that reach someone. Holds because the reachable UAVs' means sum to `m * g`.
fn check_reward_identity(rewards: &[f64], per_uav: &[Option<f64>], global: f64, w: &RewardWeights) {
    let m = per_uav.len() as f64;
    let k = per_uav.iter().filter(|d| d.is_some()).count() as f64;
    if k < m {
        warn!("{} of {} UAVs reach no receiver this step", m - k, m);
    }
    let expected = -(w.alpha + w.beta) * m * global + w.beta * k * global;
    let total: f64 = rewards.iter().sum();
    debug_assert!(
        (total - expected).abs() <= 1e-9 * (1.0 + expected.abs()),
        "reward identity broken: {total} vs {expected}"
    );
}
