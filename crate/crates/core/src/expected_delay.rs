//! Expected Remote ID message delay per link.
//!
//! Within one GNSS cycle a message gets several chances to be received (the
//! matching slots of that cycle). Each chance survives collisions with
//! probability `p`; if all fail the next cycle repeats the same pattern one
//! `T_GNSS` later. The infinite sum over cycles is geometric and evaluated in
//! closed form.
//!
//! Match sets only depend on protocol, rate, start slot and (for Wi-Fi) the
//! channel, so [`DelayModel`] precomputes them once for every rate up to
//! `psi_max` and evaluates links against the cached tables.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interference::{Fleet, InterferenceError, ProbabilityBundle};
use crate::timing::{
    ble5_event_delay, ble5_pointer_counts, ble_match_slots, wifi_match_slots, wifi_reception_delay, Protocol,
    TimingConfig, TimingError, WifiChannel,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DelayError {
    #[error(transparent)]
    Timing(#[from] TimingError),
    #[error(transparent)]
    Interference(#[from] InterferenceError),
    #[error("constraint ({letter}) violated by UAV {uav}: {detail}")]
    Constraint { letter: char, uav: usize, detail: String },
}

/// Expected delay of one link at one start slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinkDelay {
    /// Expected delay in slots.
    Delivered(f64),
    /// No matching slot, or every attempt is certain to collide.
    Undeliverable,
}

impl LinkDelay {
    pub fn slots(self) -> Option<f64> {
        match self {
            LinkDelay::Delivered(d) => Some(d),
            LinkDelay::Undeliverable => None,
        }
    }
}

/// Expected delay when the attempts of every cycle arrive at `delays`
/// (ascending, in slots, measured from the cycle start) and each attempt
/// independently succeeds with probability `p`.
pub fn retry_series_delay(delays: &[u64], p: f64, period: u64) -> LinkDelay {
    if delays.is_empty() || p <= 0.0 {
        return LinkDelay::Undeliverable;
    }
    let q = 1.0 - p;
    let mut weight = 1.0;
    let mut first_cycle = 0.0;
    for &d in delays {
        first_cycle += weight * p * d as f64;
        weight *= q;
    }
    // weight = q^N, the probability that a whole cycle fails
    let fail = weight;
    LinkDelay::Delivered((first_cycle + period as f64 * fail) / (1.0 - fail))
}

/// Probability that every attempt of a cycle fails.
pub fn cycle_miss_probability(attempts: usize, p: f64) -> f64 {
    (1.0 - p).powi(attempts as i32)
}

/// Expected BLE 5 delay. `events[ξ-1] = (P_succ(ξ), D(ξ))` where `P_succ(ξ)`
/// is the probability that the ξ-th auxiliary packet of a cycle is received.
pub fn event_series_delay(events: &[(f64, u64)], period: u64) -> LinkDelay {
    let mut survive = 1.0;
    let mut first_cycle = 0.0;
    for &(p, d) in events {
        first_cycle += survive * p * d as f64;
        survive *= 1.0 - p;
    }
    if survive >= 1.0 {
        return LinkDelay::Undeliverable;
    }
    LinkDelay::Delivered((first_cycle + period as f64 * survive) / (1.0 - survive))
}

/// `(1 - (1 - p_pri)^n) * p_sec`: at least one of `n` matched pointers
/// survives and the auxiliary packet it points to survives.
pub fn ble5_event_success(pointers: u32, p_primary: f64, p_secondary: f64) -> f64 {
    (1.0 - (1.0 - p_primary).powi(pointers as i32)) * p_secondary
}

/// Per-start-slot data a link evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub enum CycleSchedule {
    /// Ascending reception delays (slots) of the matching packets.
    Attempts(Vec<u64>),
    /// Matched pointer count for every advertising event.
    Events(Vec<u32>),
}

/// Schedules for every start slot of one (protocol, rate, channel).
#[derive(Debug, Clone)]
pub struct ScheduleTable {
    pub protocol: Protocol,
    pub rate: u32,
    pub gnss: u64,
    /// `D(ξ)` for BLE 5, empty otherwise.
    pub event_delays: Vec<u64>,
    pub per_start: Vec<CycleSchedule>,
}

impl ScheduleTable {
    pub fn build(timing: &TimingConfig, protocol: Protocol, rate: u32, channel: WifiChannel) -> Result<Self, TimingError> {
        match protocol {
            Protocol::Ble4 | Protocol::Ble5 => {
                let cfg = timing.ble(protocol, rate)?;
                let mut per_start = Vec::with_capacity(cfg.supercycle() as usize);
                for t0 in 0..cfg.supercycle() {
                    let set = ble_match_slots(t0, &cfg)?;
                    per_start.push(match protocol {
                        Protocol::Ble4 => CycleSchedule::Attempts(set.union().iter().map(|&x| x - t0 + cfg.pdu).collect()),
                        _ => CycleSchedule::Events(ble5_pointer_counts(&set, &cfg)),
                    });
                }
                let event_delays = match protocol {
                    Protocol::Ble5 => (1..=rate).map(|xi| ble5_event_delay(xi, &cfg)).collect(),
                    _ => Vec::new(),
                };
                Ok(ScheduleTable {
                    protocol,
                    rate,
                    gnss: cfg.gnss,
                    event_delays,
                    per_start,
                })
            }
            Protocol::Wifi => {
                let cfg = timing.wifi(rate)?;
                let mut per_start = Vec::with_capacity(cfg.supercycle() as usize);
                for t0 in 0..cfg.supercycle() {
                    let set = wifi_match_slots(t0, channel, &cfg)?;
                    let delays = set.union().iter().map(|&x| wifi_reception_delay(x, t0, &cfg)).collect();
                    per_start.push(CycleSchedule::Attempts(delays));
                }
                Ok(ScheduleTable {
                    protocol,
                    rate,
                    gnss: cfg.gnss,
                    event_delays: Vec::new(),
                    per_start,
                })
            }
        }
    }

    /// Expected delay and per-cycle miss probability at start slot index `t0`.
    pub fn evaluate(&self, t0: usize, probs: &ProbabilityBundle) -> (LinkDelay, f64) {
        match &self.per_start[t0] {
            CycleSchedule::Attempts(delays) => {
                let p = probs.primary();
                (retry_series_delay(delays, p, self.gnss), cycle_miss_probability(delays.len(), p))
            }
            CycleSchedule::Events(counts) => {
                let events: Vec<(f64, u64)> = counts
                    .iter()
                    .zip(&self.event_delays)
                    .map(|(&n, &d)| (ble5_event_success(n, probs.primary(), probs.secondary()), d))
                    .collect();
                let miss = events.iter().map(|(p, _)| 1.0 - p).product();
                (event_series_delay(&events, self.gnss), miss)
            }
        }
    }
}

impl ScheduleTable {
    /// Draws one delivery: the attempts of each cycle are tried in order and
    /// cycles repeat until one survives. `None` if nothing survives within
    /// `max_cycles`.
    pub fn sample_delivery<R: Rng + ?Sized>(&self, t0: usize, probs: &ProbabilityBundle, rng: &mut R, max_cycles: u32) -> Option<u64> {
        for k in 0..max_cycles as u64 {
            let offset = k * self.gnss;
            match &self.per_start[t0] {
                CycleSchedule::Attempts(delays) => {
                    let p = probs.primary();
                    for &d in delays {
                        if rng.random::<f64>() < p {
                            return Some(d + offset);
                        }
                    }
                }
                CycleSchedule::Events(counts) => {
                    for (&n, &d) in counts.iter().zip(&self.event_delays) {
                        let pointer = (0..n).any(|_| rng.random::<f64>() < probs.primary());
                        if pointer && rng.random::<f64>() < probs.secondary() {
                            return Some(d + offset);
                        }
                    }
                }
            }
        }
        None
    }
}

/// t0-averaged delay of one ordered link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSummary {
    pub sender: usize,
    pub receiver: usize,
    pub protocol: Protocol,
    pub rate: u32,
    pub t0_count: usize,
    /// Start slots at which the message can never be delivered.
    pub undeliverable: usize,
    pub mean_delay_ms: f64,
    /// Mean over start slots of the probability that a GNSS cycle delivers nothing.
    pub loss_rate: f64,
}

/// How start slots without any possible delivery enter the average delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "ms")]
pub enum UndeliverablePolicy {
    /// Count them as a fixed delay in milliseconds.
    Penalty(f64),
    /// Leave them out of the average (the link delay is NaN if all are out).
    Exclude,
}

impl Default for UndeliverablePolicy {
    fn default() -> Self {
        UndeliverablePolicy::Penalty(1000.0)
    }
}

/// Link-delay evaluator with cached match tables.
#[derive(Debug, Clone)]
pub struct DelayModel {
    pub timing: TimingConfig,
    pub psi_max: u32,
    pub undeliverable: UndeliverablePolicy,
    tables: BTreeMap<(Protocol, u32, WifiChannel), ScheduleTable>,
}

impl DelayModel {
    pub fn new(timing: TimingConfig, psi_max: u32, undeliverable: UndeliverablePolicy) -> Result<Self, DelayError> {
        if psi_max == 0 {
            return Err(TimingError::ZeroRate(0).into());
        }
        let mut tables = BTreeMap::new();
        for rate in 1..=psi_max {
            for protocol in [Protocol::Ble4, Protocol::Ble5] {
                tables.insert(
                    (protocol, rate, WifiChannel::Ch1),
                    ScheduleTable::build(&timing, protocol, rate, WifiChannel::Ch1)?,
                );
            }
            for channel in WifiChannel::ALL {
                tables.insert(
                    (Protocol::Wifi, rate, channel),
                    ScheduleTable::build(&timing, Protocol::Wifi, rate, channel)?,
                );
            }
        }
        Ok(DelayModel {
            timing,
            psi_max,
            undeliverable,
            tables,
        })
    }

    pub fn table(&self, protocol: Protocol, rate: u32, channel: WifiChannel) -> Option<&ScheduleTable> {
        let channel = if protocol == Protocol::Wifi { channel } else { WifiChannel::Ch1 };
        self.tables.get(&(protocol, rate, channel))
    }

    /// Checks the per-UAV constraints of the delay-minimization problem:
    /// (c) `rate <= psi_max` and (d) `rate` a positive integer. One-hot
    /// protocol selection, (a) and (b), holds by construction.
    pub fn validate(&self, fleet: &Fleet) -> Result<(), DelayError> {
        for (uav, radio) in fleet.radios.iter().enumerate() {
            if radio.rate == 0 {
                return Err(DelayError::Constraint {
                    letter: 'd',
                    uav,
                    detail: "message rate must be a positive integer".into(),
                });
            }
            if radio.rate > self.psi_max {
                return Err(DelayError::Constraint {
                    letter: 'c',
                    uav,
                    detail: format!("rate {} exceeds psi_max {}", radio.rate, self.psi_max),
                });
            }
        }
        Ok(())
    }

    /// Expected delay (slots) of `sender -> receiver` at every start slot.
    pub fn link_delays(&self, fleet: &Fleet, sender: usize, receiver: usize) -> Result<Vec<(LinkDelay, f64)>, DelayError> {
        let probs = fleet.collision_survival(sender, receiver, &self.timing)?;
        let radio = fleet.radios[sender];
        let table = self.table(radio.protocol, radio.rate, radio.wifi_channel).ok_or(DelayError::Constraint {
            letter: 'c',
            uav: sender,
            detail: format!("rate {} exceeds psi_max {}", radio.rate, self.psi_max),
        })?;
        Ok((0..table.per_start.len()).map(|t0| table.evaluate(t0, &probs)).collect())
    }

    /// Mean over start slots of the link delay, in milliseconds.
    pub fn average_link_delay(&self, fleet: &Fleet, sender: usize, receiver: usize) -> Result<LinkSummary, DelayError> {
        let per_start = self.link_delays(fleet, sender, receiver)?;
        let radio = fleet.radios[sender];
        let slot_ms = self.timing.slot_ms;
        let mut total = 0.0;
        let mut counted = 0usize;
        let mut undeliverable = 0usize;
        let mut loss = 0.0;
        for (delay, miss) in &per_start {
            loss += miss;
            match (delay, self.undeliverable) {
                (LinkDelay::Delivered(d), _) => {
                    total += d * slot_ms;
                    counted += 1;
                }
                (LinkDelay::Undeliverable, UndeliverablePolicy::Penalty(ms)) => {
                    undeliverable += 1;
                    total += ms;
                    counted += 1;
                }
                (LinkDelay::Undeliverable, UndeliverablePolicy::Exclude) => undeliverable += 1,
            }
        }
        Ok(LinkSummary {
            sender,
            receiver,
            protocol: radio.protocol,
            rate: radio.rate,
            t0_count: per_start.len(),
            undeliverable,
            mean_delay_ms: if counted == 0 { f64::NAN } else { total / counted as f64 },
            loss_rate: loss / per_start.len() as f64,
        })
    }

    /// Every reachable ordered link on the senders' active protocols, ordered
    /// by (sender, receiver).
    pub fn link_table(&self, fleet: &Fleet) -> Result<Vec<LinkSummary>, DelayError> {
        self.validate(fleet)?;
        let mut out = Vec::new();
        for j in 0..fleet.len() {
            for i in fleet.active_recv_set(j) {
                out.push(self.average_link_delay(fleet, j, i)?);
            }
        }
        Ok(out)
    }

    /// Per-UAV mean delay over the receivers its active protocol reaches.
    /// `None` for UAVs that reach nobody.
    pub fn per_uav_delay(&self, fleet: &Fleet, links: &[LinkSummary]) -> Vec<Option<f64>> {
        let mut sums = vec![(0.0, 0usize); fleet.len()];
        for link in links {
            sums[link.sender].0 += link.mean_delay_ms;
            sums[link.sender].1 += 1;
        }
        sums.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()
    }

    /// Fleet objective: mean over UAVs of the per-UAV mean link delay (ms).
    /// UAVs without receivers contribute 0.
    pub fn system_objective(&self, fleet: &Fleet) -> Result<f64, DelayError> {
        let links = self.link_table(fleet)?;
        Ok(objective_from_links(fleet.len(), &self.per_uav_delay(fleet, &links)))
    }
}

/// Mean over all `m` UAVs of the per-UAV delays; UAVs without receivers add 0.
pub fn objective_from_links(m: usize, per_uav: &[Option<f64>]) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (uav, value) in per_uav.iter().enumerate() {
        match value {
            Some(v) => total += v,
            None => warn!("UAV {uav} reaches no receiver; it contributes 0 to the objective"),
        }
    }
    total / m as f64
}
