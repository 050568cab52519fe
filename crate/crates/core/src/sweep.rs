//! Fixed-protocol fleet sweeps: every UAV uses the same protocol and rate,
//! placed uniformly in a square area, and the fleet-wide delay and loss are
//! averaged over seeds.
//!
//! Placement, channel and shadowing streams depend on the seed only, so the
//! same seed gives the same relative geometry in every area and for every
//! protocol.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::expected_delay::{objective_from_links, DelayError, DelayModel, UndeliverablePolicy};
use crate::interference::{Fleet, LinkBudget, RadioConfig};
use crate::rng::substream;
use crate::sim_env::{random_positions, Action, AreaSemantics};
use crate::timing::{Protocol, TimingConfig, WifiChannel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub fleet_size: usize,
    pub areas: Vec<f64>,
    pub area_semantics: AreaSemantics,
    pub altitude: [f64; 2],
    pub protocols: Vec<Protocol>,
    /// Rates to sweep. Empty means `1..=psi_max`.
    pub rates: Vec<u32>,
    /// Explicit (protocol, rate) pairs. When non-empty they replace
    /// `protocols` x `rates`.
    pub modes: Vec<Action>,
    pub psi_max: u32,
    pub seeds: u64,
    pub first_seed: u64,
    pub timing: TimingConfig,
    pub budget: LinkBudget,
    pub undeliverable: UndeliverablePolicy,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            fleet_size: 10,
            areas: vec![100.0, 500.0, 1000.0, 3000.0, 5000.0, 10000.0],
            area_semantics: AreaSemantics::Side,
            altitude: [30.0, 120.0],
            protocols: Protocol::ALL.to_vec(),
            rates: Vec::new(),
            modes: Vec::new(),
            psi_max: 10,
            seeds: 10,
            first_seed: 0,
            timing: TimingConfig::default(),
            budget: LinkBudget::default(),
            undeliverable: UndeliverablePolicy::default(),
        }
    }
}

impl SweepConfig {
    pub fn side(&self, area: f64) -> f64 {
        match self.area_semantics {
            AreaSemantics::Side => area,
            AreaSemantics::Area => area.sqrt(),
        }
    }

    pub fn rate_list(&self) -> Vec<u32> {
        if self.rates.is_empty() {
            (1..=self.psi_max).collect()
        } else {
            self.rates.clone()
        }
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (self.first_seed..self.first_seed + self.seeds).collect()
    }

    /// Every (protocol, rate, area) cell in output order.
    pub fn cells(&self) -> Vec<Cell> {
        let modes: Vec<Action> = if self.modes.is_empty() {
            self.protocols
                .iter()
                .flat_map(|&protocol| self.rate_list().into_iter().map(move |rate| Action { protocol, rate }))
                .collect()
        } else {
            self.modes.clone()
        };
        let mut out = Vec::new();
        for m in modes {
            for &area in &self.areas {
                out.push(Cell {
                    protocol: m.protocol,
                    rate: m.rate,
                    area,
                });
            }
        }
        out
    }

    /// Names the first invalid field.
    pub fn validate(&self) -> Result<(), String> {
        if self.fleet_size < 2 {
            return Err("fleet_size: need at least 2 UAVs".into());
        }
        if self.areas.is_empty() || self.areas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err("areas: need a non-empty list of positive sizes".into());
        }
        if !(self.altitude[0] <= self.altitude[1]) {
            return Err("altitude: need [low, high] with low <= high".into());
        }
        if self.protocols.is_empty() {
            return Err("protocols: need at least one protocol".into());
        }
        if self.psi_max == 0 {
            return Err("psi_max: must be at least 1".into());
        }
        if let Some(r) = self.rate_list().iter().find(|r| **r == 0 || **r > self.psi_max) {
            return Err(format!("rates: {r} is outside 1..={}", self.psi_max));
        }
        if let Some(m) = self.modes.iter().find(|m| m.rate == 0 || m.rate > self.psi_max) {
            return Err(format!("modes: rate {} is outside 1..={}", m.rate, self.psi_max));
        }
        if self.seeds == 0 {
            return Err("seeds: must be at least 1".into());
        }
        self.budget.validate().map_err(|e| format!("budget: {e}"))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub protocol: Protocol,
    pub rate: u32,
    pub area: f64,
}

/// One seed of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSample {
    pub protocol: Protocol,
    pub rate: u32,
    pub area: f64,
    pub seed: u64,
    /// Fleet-wide mean delay, ms.
    pub mean_delay_ms: f64,
    /// Number of (sender, receiver) links in the active receive sets.
    pub links: usize,
    /// Sum over links of the per-cycle miss probability.
    pub loss_sum: f64,
}

impl CellSample {
    /// Mean per-cycle miss probability over the links, 0 without links.
    pub fn loss_rate(&self) -> f64 {
        if self.links == 0 {
            0.0
        } else {
            self.loss_sum / self.links as f64
        }
    }
}

/// The fleet of seed `seed`: every UAV on `protocol` at `rate`, with random
/// positions, Wi-Fi channels and shadowing.
pub fn fixed_fleet(cfg: &SweepConfig, protocol: Protocol, rate: u32, side: f64, seed: u64) -> Fleet {
    let m = cfg.fleet_size;
    let positions = random_positions(m, side, cfg.altitude, &mut substream(seed, "placement", 0));
    let mut channel_rng = substream(seed, "channel", 0);
    let radios = (0..m)
        .map(|_| RadioConfig::new(protocol, rate).with_channel(WifiChannel::ALL[channel_rng.random_range(0..3)]))
        .collect();
    let shadowing = cfg.budget.sample_shadowing(m, &mut substream(seed, "shadowing", 0));
    Fleet::new(positions, radios, shadowing, cfg.budget.clone()).expect("sizes are consistent")
}

pub fn sample_cell(model: &DelayModel, cfg: &SweepConfig, cell: Cell, seed: u64) -> Result<CellSample, DelayError> {
    let fleet = fixed_fleet(cfg, cell.protocol, cell.rate, cfg.side(cell.area), seed);
    let links = model.link_table(&fleet)?;
    let per_uav = model.per_uav_delay(&fleet, &links);
    Ok(CellSample {
        protocol: cell.protocol,
        rate: cell.rate,
        area: cell.area,
        seed,
        mean_delay_ms: objective_from_links(fleet.len(), &per_uav),
        links: links.len(),
        loss_sum: links.iter().map(|l| l.loss_rate).sum(),
    })
}

/// Seed aggregate of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub protocol: Protocol,
    pub rate: u32,
    pub area: f64,
    pub seeds: usize,
    pub mean_delay_ms: f64,
    pub median_delay_ms: f64,
    /// Pooled over all links of all seeds.
    pub loss_rate: f64,
    pub links: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Groups samples by cell, keeping first-seen cell order.
pub fn summarize(samples: &[CellSample]) -> Vec<CellStats> {
    let mut cells: Vec<(Cell, Vec<&CellSample>)> = Vec::new();
    for s in samples {
        let cell = Cell {
            protocol: s.protocol,
            rate: s.rate,
            area: s.area,
        };
        match cells.iter_mut().find(|(c, _)| *c == cell) {
            Some((_, v)) => v.push(s),
            None => cells.push((cell, vec![s])),
        }
    }
    cells
        .into_iter()
        .map(|(cell, v)| {
            let delays: Vec<f64> = v.iter().map(|s| s.mean_delay_ms).collect();
            let links: usize = v.iter().map(|s| s.links).sum();
            let loss: f64 = v.iter().map(|s| s.loss_sum).sum();
            CellStats {
                protocol: cell.protocol,
                rate: cell.rate,
                area: cell.area,
                seeds: v.len(),
                mean_delay_ms: delays.iter().sum::<f64>() / delays.len() as f64,
                median_delay_ms: median(&delays),
                loss_rate: if links == 0 { 0.0 } else { loss / links as f64 },
                links,
            }
        })
        .collect()
}

/// Runs every cell and seed sequentially, in [`SweepConfig::cells`] order.
pub fn run_sweep(cfg: &SweepConfig) -> Result<Vec<CellSample>, DelayError> {
    let model = DelayModel::new(cfg.timing.clone(), cfg.psi_max, cfg.undeliverable)?;
    let mut out = Vec::new();
    for cell in cfg.cells() {
        for seed in cfg.seed_list() {
            out.push(sample_cell(&model, cfg, cell, seed)?);
        }
    }
    Ok(out)
}
