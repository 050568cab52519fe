//! Slot-level reception timing for BLE 4, BLE 5 and Wi-Fi Remote ID broadcasts.
//!
//! Time is divided into slots of `slot_ms` (0.125 ms by default) and every
//! duration is floored onto that grid. A transmitter broadcasts periodically
//! from a start slot `t0`; the receiver scans periodically from slot 0. The
//! slots where a whole packet lands inside an active scan window on the right
//! channel are found with the Chinese remainder theorem, which needs coprime
//! periods, so the transmit interval is replaced by its nearest value coprime
//! with the scan supercycle.
//!
//! [`timeline_oracle`] recomputes the same sets by walking every slot of the
//! schedule and is used to cross-check the CRT path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimingError {
    #[error("CRT requires coprime periods (got {0} and {1})")]
    NotCoprime(u64, u64),
    #[error("periods must be at least one slot")]
    ZeroPeriod,
    #[error("invalid duration {duration_ms} ms for slot length {delta_ms} ms")]
    InvalidDuration { duration_ms: f64, delta_ms: f64 },
    #[error("start slot {t0} outside the scan supercycle [0, {supercycle})")]
    StartOutOfRange { t0: u64, supercycle: u64 },
    #[error("message rate must be at least 1 (got {0})")]
    ZeroRate(u32),
    #[error("{0} timing requested for a {1} configuration")]
    WrongProtocol(Protocol, Protocol),
    #[error("event index {xi} outside 1..={rate}")]
    EventIndex { xi: u32, rate: u32 },
    #[error("timing parameter `{0}` discretizes to zero slots")]
    EmptyParameter(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Ble4,
    Ble5,
    Wifi,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Ble4, Protocol::Ble5, Protocol::Wifi];

    pub fn index(self) -> usize {
        match self {
            Protocol::Ble4 => 0,
            Protocol::Ble5 => 1,
            Protocol::Wifi => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Protocol> {
        Protocol::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Ble4 => "BLE4",
            Protocol::Ble5 => "BLE5",
            Protocol::Wifi => "WIFI",
        }
    }

    pub fn parse(name: &str) -> Option<Protocol> {
        match name.to_ascii_uppercase().replace([' ', '-', '_'], "").as_str() {
            "BLE4" => Some(Protocol::Ble4),
            "BLE5" => Some(Protocol::Ble5),
            "WIFI" => Some(Protocol::Wifi),
            _ => None,
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The three non-overlapping 2.4 GHz Wi-Fi channels used for beacons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WifiChannel {
    Ch1,
    Ch6,
    Ch11,
}

impl WifiChannel {
    pub const ALL: [WifiChannel; 3] = [WifiChannel::Ch1, WifiChannel::Ch6, WifiChannel::Ch11];

    /// Position in the receiver's scan order.
    pub fn index(self) -> usize {
        match self {
            WifiChannel::Ch1 => 0,
            WifiChannel::Ch6 => 1,
            WifiChannel::Ch11 => 2,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            WifiChannel::Ch1 => 1,
            WifiChannel::Ch6 => 6,
            WifiChannel::Ch11 => 11,
        }
    }

    pub fn from_number(number: u8) -> Option<WifiChannel> {
        match number {
            1 => Some(WifiChannel::Ch1),
            6 => Some(WifiChannel::Ch6),
            11 => Some(WifiChannel::Ch11),
            _ => None,
        }
    }
}

/// A duration expressed as a whole number of slots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotQuantity {
    pub slots: u64,
    pub delta_ms: f64,
}

impl SlotQuantity {
    pub fn from_ms(duration_ms: f64, delta_ms: f64) -> Result<Self, TimingError> {
        Ok(SlotQuantity {
            slots: discretize(duration_ms, delta_ms)?,
            delta_ms,
        })
    }

    pub fn as_ms(&self) -> f64 {
        self.slots as f64 * self.delta_ms
    }
}

/// `floor(duration / delta)`.
///
/// A relative guard of 1e-9 absorbs representation error so that, e.g.,
/// 0.3 ms on a 0.1 ms grid is 3 slots rather than 2.
pub fn discretize(duration_ms: f64, delta_ms: f64) -> Result<u64, TimingError> {
    if !(duration_ms.is_finite() && delta_ms.is_finite()) || duration_ms < 0.0 || delta_ms <= 0.0 {
        return Err(TimingError::InvalidDuration {
            duration_ms,
            delta_ms,
        });
    }
    let ratio = duration_ms / delta_ms;
    Ok((ratio + ratio.abs() * 1e-9 + 1e-12).floor() as u64)
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

/// Inverse of `value` modulo `modulus`, when it exists.
pub fn mod_inverse(value: u64, modulus: u64) -> Option<u64> {
    if modulus == 1 {
        return Some(0);
    }
    let (mut old_r, mut r) = (value as i128 % modulus as i128, modulus as i128);
    let (mut old_s, mut s) = (1i128, 0i128);
    while r != 0 {
        let q = old_r / r;
        (old_r, r) = (r, old_r - q * r);
        (old_s, s) = (s, old_s - q * s);
    }
    if old_r != 1 {
        return None;
    }
    Some(old_s.rem_euclid(modulus as i128) as u64)
}

/// The arithmetic progression `{offset + k * period | k >= 0}` of slots where
/// two periodic events coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coincidence {
    pub offset: u64,
    pub period: u64,
}

impl Coincidence {
    /// Members of the progression inside `[lo, hi]`.
    pub fn members_in(&self, lo: u64, hi: u64) -> impl Iterator<Item = u64> {
        let period = self.period;
        let first = if self.offset >= lo {
            self.offset
        } else {
            let steps = (lo - self.offset).div_ceil(period);
            self.offset + steps * period
        };
        (0..)
            .map(move |k| first + k * period)
            .take_while(move |&x| x <= hi)
    }
}

/// Slots `x` with `x ≡ t1 (mod s1)` and `x ≡ t2 (mod s2)`.
pub fn crt_match(t1: u64, t2: u64, s1: u64, s2: u64) -> Result<Coincidence, TimingError> {
    if s1 == 0 || s2 == 0 {
        return Err(TimingError::ZeroPeriod);
    }
    if gcd(s1, s2) != 1 {
        return Err(TimingError::NotCoprime(s1, s2));
    }
    let period = s1 as u128 * s2 as u128;
    let inv2 = mod_inverse(s2 % s1, s1).ok_or(TimingError::NotCoprime(s1, s2))? as u128;
    let inv1 = mod_inverse(s1 % s2, s2).ok_or(TimingError::NotCoprime(s1, s2))? as u128;
    let a = (t1 as u128 % period) * s2 as u128 % period * inv2 % period;
    let b = (t2 as u128 % period) * s1 as u128 % period * inv1 % period;
    Ok(Coincidence {
        offset: ((a + b) % period) as u64,
        period: period as u64,
    })
}

/// Nearest integer to `value` that is coprime with `modulus`; ties go down.
pub fn coprime_approx(value: u64, modulus: u64) -> u64 {
    let value = value.max(1);
    if modulus <= 1 {
        return value;
    }
    for step in 0..=value {
        let below = value - step;
        if below >= 1 && gcd(below, modulus) == 1 {
            return below;
        }
        let above = value + step;
        if gcd(above, modulus) == 1 {
            return above;
        }
    }
    1
}

/// Protocol timing constants in milliseconds (defaults reproduce the
/// reference parameter table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingConfig {
    pub slot_ms: f64,
    pub gnss_period_ms: f64,
    pub ble4_pdu_ms: f64,
    pub ble5_pdu_ms: f64,
    pub pdu_gap_ms: f64,
    pub scan_window_ms: f64,
    pub scan_interval_ms: f64,
    pub aux_packet_ms: f64,
    pub aux_offset_ms: f64,
    /// Window after `aux_offset` in which the auxiliary packet is scheduled.
    /// Not part of the reference table; 2 ms is an assumed default.
    pub aux_uncertainty_ms: f64,
    pub adv_random_delay_ms: f64,
    pub beacon_ms: f64,
    pub wifi_dwell_ms: f64,
    pub wifi_switch_ms: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            slot_ms: 0.125,
            gnss_period_ms: 1000.0,
            ble4_pdu_ms: 0.376,
            ble5_pdu_ms: 1.152,
            pdu_gap_ms: 0.125,
            scan_window_ms: 2.0,
            scan_interval_ms: 8.0,
            aux_packet_ms: 3.328,
            aux_offset_ms: 5.0,
            aux_uncertainty_ms: 2.0,
            adv_random_delay_ms: 5.0,
            beacon_ms: 0.632,
            wifi_dwell_ms: 6.0,
            wifi_switch_ms: 1.0,
        }
    }
}

impl TimingConfig {
    fn slots(&self, ms: f64) -> Result<u64, TimingError> {
        discretize(ms, self.slot_ms)
    }

    fn nonzero(&self, ms: f64, name: &'static str) -> Result<u64, TimingError> {
        match self.slots(ms)? {
            0 => Err(TimingError::EmptyParameter(name)),
            n => Ok(n),
        }
    }

    pub fn gnss_slots(&self) -> Result<u64, TimingError> {
        self.nonzero(self.gnss_period_ms, "gnss_period_ms")
    }

    /// Discretized BLE timing for `protocol` (BLE 4 or BLE 5) at `rate`
    /// advertising events per GNSS cycle.
    pub fn ble(&self, protocol: Protocol, rate: u32) -> Result<BleSlots, TimingError> {
        if rate == 0 {
            return Err(TimingError::ZeroRate(rate));
        }
        let pdu_ms = match protocol {
            Protocol::Ble4 => self.ble4_pdu_ms,
            Protocol::Ble5 => self.ble5_pdu_ms,
            Protocol::Wifi => return Err(TimingError::WrongProtocol(Protocol::Ble4, protocol)),
        };
        let gnss = self.gnss_slots()?;
        let scan_interval = self.nonzero(self.scan_interval_ms, "scan_interval_ms")?;
        let adv_interval = (gnss / rate as u64).max(1);
        Ok(BleSlots {
            protocol,
            rate,
            gnss,
            pdu: self.nonzero(pdu_ms, "pdu_ms")?,
            pdu_gap: self.slots(self.pdu_gap_ms)?,
            scan_window: self.slots(self.scan_window_ms)?,
            scan_interval,
            adv_interval,
            adv_interval_hat: coprime_approx(adv_interval, 3 * scan_interval),
            aux_packet: self.slots(self.aux_packet_ms)?,
            aux_offset: self.slots(self.aux_offset_ms)?,
            aux_uncertainty: self.slots(self.aux_uncertainty_ms)?,
            random_delay: self.slots(self.adv_random_delay_ms)?,
        })
    }

    pub fn ble4(&self, rate: u32) -> Result<BleSlots, TimingError> {
        self.ble(Protocol::Ble4, rate)
    }

    pub fn ble5(&self, rate: u32) -> Result<BleSlots, TimingError> {
        self.ble(Protocol::Ble5, rate)
    }

    pub fn wifi(&self, rate: u32) -> Result<WifiSlots, TimingError> {
        if rate == 0 {
            return Err(TimingError::ZeroRate(rate));
        }
        let gnss = self.gnss_slots()?;
        let dwell = self.nonzero(self.wifi_dwell_ms, "wifi_dwell_ms")?;
        let switch = self.slots(self.wifi_switch_ms)?;
        let beacon_interval = (gnss / rate as u64).max(1);
        Ok(WifiSlots {
            rate,
            gnss,
            beacon: self.nonzero(self.beacon_ms, "beacon_ms")?,
            dwell,
            switch,
            beacon_interval,
            beacon_interval_hat: coprime_approx(beacon_interval, 3 * (dwell + switch)),
        })
    }

    /// Length of the averaging domain for `t0` (the scanner supercycle).
    pub fn supercycle(&self, protocol: Protocol) -> Result<u64, TimingError> {
        match protocol {
            Protocol::Ble4 | Protocol::Ble5 => Ok(3 * self.nonzero(self.scan_interval_ms, "scan_interval_ms")?),
            Protocol::Wifi => Ok(3 * (self.nonzero(self.wifi_dwell_ms, "wifi_dwell_ms")? + self.slots(self.wifi_switch_ms)?)),
        }
    }
}

/// Discretized BLE advertiser/scanner timing at a given message rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleSlots {
    pub protocol: Protocol,
    pub rate: u32,
    pub gnss: u64,
    pub pdu: u64,
    pub pdu_gap: u64,
    pub scan_window: u64,
    pub scan_interval: u64,
    /// `gnss / rate`, floored.
    pub adv_interval: u64,
    /// Nearest interval coprime with `3 * scan_interval`.
    pub adv_interval_hat: u64,
    pub aux_packet: u64,
    pub aux_offset: u64,
    pub aux_uncertainty: u64,
    pub random_delay: u64,
}

impl BleSlots {
    pub fn supercycle(&self) -> u64 {
        3 * self.scan_interval
    }

    /// Start of channel `c`'s PDU (c = 0, 1, 2 for 37, 38, 39) relative to the event start.
    pub fn channel_lead(&self, channel: usize) -> u64 {
        channel as u64 * (self.pdu + self.pdu_gap)
    }
}

/// Discretized Wi-Fi beacon/passive-scan timing at a given message rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WifiSlots {
    pub rate: u32,
    pub gnss: u64,
    pub beacon: u64,
    pub dwell: u64,
    pub switch: u64,
    pub beacon_interval: u64,
    pub beacon_interval_hat: u64,
}

impl WifiSlots {
    pub fn supercycle(&self) -> u64 {
        3 * (self.dwell + self.switch)
    }

    /// Inclusive range of scan offsets on which a beacon on `channel` fits
    /// entirely inside the dwell. `None` when the beacon is longer than the dwell.
    pub fn scan_offsets(&self, channel: WifiChannel) -> Option<(u64, u64)> {
        if self.dwell < self.beacon {
            return None;
        }
        let lo = channel.index() as u64 * (self.dwell + self.switch);
        Some((lo, lo + self.dwell - self.beacon))
    }
}

/// Per-channel matching slots for one GNSS cycle starting at `t0`.
///
/// BLE uses all three entries (channels 37, 38, 39); Wi-Fi fills only the
/// transmitter's channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchSlotSet {
    pub protocol: Protocol,
    pub t0: u64,
    pub wifi_channel: Option<WifiChannel>,
    pub channels: [Vec<u64>; 3],
}

impl MatchSlotSet {
    fn empty(protocol: Protocol, t0: u64, wifi_channel: Option<WifiChannel>) -> Self {
        MatchSlotSet {
            protocol,
            t0,
            wifi_channel,
            channels: [Vec::new(), Vec::new(), Vec::new()],
        }
    }

    pub fn channel_label(&self, index: usize) -> u8 {
        match self.protocol {
            Protocol::Ble4 | Protocol::Ble5 => 37 + index as u8,
            Protocol::Wifi => WifiChannel::ALL[index].number(),
        }
    }

    /// All matching slots, ascending.
    pub fn union(&self) -> Vec<u64> {
        let mut all: Vec<u64> = self.channels.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    pub fn len(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check_start(t0: u64, supercycle: u64) -> Result<(), TimingError> {
    if t0 >= supercycle {
        Err(TimingError::StartOutOfRange { t0, supercycle })
    } else {
        Ok(())
    }
}

/// Matching slots of the three primary-channel PDUs (BLE 4 payload PDUs or
/// BLE 5 pointer PDUs) against the one-channel-per-scan-interval scanner.
pub fn ble_match_slots(t0: u64, cfg: &BleSlots) -> Result<MatchSlotSet, TimingError> {
    let supercycle = cfg.supercycle();
    check_start(t0, supercycle)?;
    let mut set = MatchSlotSet::empty(cfg.protocol, t0, None);
    if cfg.scan_window < cfg.pdu {
        return Ok(set);
    }
    for (channel, slots) in set.channels.iter_mut().enumerate() {
        let start = t0 + cfg.channel_lead(channel);
        // the cycle's `rate` events; the next one carries the next message
        let last = (start + (cfg.rate as u64 - 1) * cfg.adv_interval_hat).min(t0 + cfg.gnss);
        let lo = channel as u64 * cfg.scan_interval;
        for offset in lo..=lo + cfg.scan_window - cfg.pdu {
            let hits = crt_match(start, offset, cfg.adv_interval_hat, supercycle)?;
            slots.extend(hits.members_in(start, last));
        }
        slots.sort_unstable();
        slots.dedup();
    }
    Ok(set)
}

pub fn ble4_match_slots(t0: u64, cfg: &BleSlots) -> Result<MatchSlotSet, TimingError> {
    if cfg.protocol != Protocol::Ble4 {
        return Err(TimingError::WrongProtocol(Protocol::Ble4, cfg.protocol));
    }
    ble_match_slots(t0, cfg)
}

pub fn ble5_match_slots(t0: u64, cfg: &BleSlots) -> Result<MatchSlotSet, TimingError> {
    if cfg.protocol != Protocol::Ble5 {
        return Err(TimingError::WrongProtocol(Protocol::Ble5, cfg.protocol));
    }
    ble_match_slots(t0, cfg)
}

/// `δ - t0 + A_P`: slots from the start of the GNSS cycle until the matched
/// PDU has been fully received.
pub fn ble4_reception_delay(match_slot: u64, t0: u64, cfg: &BleSlots) -> u64 {
    match_slot - t0 + cfg.pdu
}

/// Number of matched pointer PDUs belonging to each advertising event
/// `ξ = 1..=rate`. Event `ξ` owns `[t0 + (ξ-1)·Â_I, t0 + ξ·Â_I)`.
pub fn ble5_pointer_counts(set: &MatchSlotSet, cfg: &BleSlots) -> Vec<u32> {
    let mut counts = vec![0u32; cfg.rate as usize];
    for slot in set.channels.iter().flatten() {
        let event = ((slot - set.t0) / cfg.adv_interval_hat) as usize;
        if let Some(count) = counts.get_mut(event) {
            *count += 1;
        }
    }
    counts
}

/// Closed-form auxiliary-packet delay of event `xi`:
/// `(ξ-1)·A_I + A_Offset + O_U + T_AUX`.
pub fn ble5_event_delay(xi: u32, cfg: &BleSlots) -> u64 {
    (xi as u64 - 1) * cfg.adv_interval + cfg.aux_offset + cfg.aux_uncertainty + cfg.aux_packet
}

/// Delay of the `xi`-th auxiliary packet when at least one of its pointers
/// matched, `None` otherwise.
pub fn ble5_aux_delay(xi: u32, set: &MatchSlotSet, cfg: &BleSlots) -> Result<Option<u64>, TimingError> {
    if xi == 0 || xi > cfg.rate {
        return Err(TimingError::EventIndex { xi, rate: cfg.rate });
    }
    let lo = set.t0 + (xi as u64 - 1) * cfg.adv_interval_hat;
    let hi = set.t0 + xi as u64 * cfg.adv_interval_hat;
    let received = set.channels.iter().flatten().any(|&slot| slot >= lo && slot < hi);
    Ok(received.then(|| ble5_event_delay(xi, cfg)))
}

/// Beacon matching slots for a transmitter fixed on `channel`.
pub fn wifi_match_slots(t0: u64, channel: WifiChannel, cfg: &WifiSlots) -> Result<MatchSlotSet, TimingError> {
    let supercycle = cfg.supercycle();
    check_start(t0, supercycle)?;
    let mut set = MatchSlotSet::empty(Protocol::Wifi, t0, Some(channel));
    let Some((lo, hi)) = cfg.scan_offsets(channel) else {
        return Ok(set);
    };
    let slots = &mut set.channels[channel.index()];
    let last = (t0 + (cfg.rate as u64 - 1) * cfg.beacon_interval_hat).min(t0 + cfg.gnss);
    for offset in lo..=hi {
        let hits = crt_match(t0, offset, cfg.beacon_interval_hat, supercycle)?;
        slots.extend(hits.members_in(t0, last));
    }
    slots.sort_unstable();
    slots.dedup();
    Ok(set)
}

/// `δ - t0 + B_D`.
pub fn wifi_reception_delay(match_slot: u64, t0: u64, cfg: &WifiSlots) -> u64 {
    match_slot - t0 + cfg.beacon
}

/// Which transmit interval the oracle uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleInterval {
    /// `T_GNSS / ψ`, as the radio would actually be configured.
    Exact,
    /// The coprime approximation used by the CRT model.
    Coprime,
}

/// Schedule handed to [`timeline_oracle`].
#[derive(Debug, Clone)]
pub enum OracleSchedule {
    Ble(BleSlots),
    Wifi(WifiSlots, WifiChannel),
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub interval: OracleInterval,
    /// Adds a uniform `[0, random_delay]` slot jitter to every BLE advertising
    /// interval, drawn from this seed.
    pub jitter_seed: Option<u64>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            interval: OracleInterval::Exact,
            jitter_seed: None,
        }
    }
}

/// Slot-by-slot simulation of one GNSS cycle of broadcasts against the scan
/// schedule. The cycle holds `rate` events starting at `t0`. A packet matches
/// when every slot it occupies falls in an active scan window tuned to its
/// channel and its first slot lies in `[t0, t0 + T_GNSS]`.
pub fn timeline_oracle(t0: u64, schedule: &OracleSchedule, options: &OracleOptions) -> MatchSlotSet {
    let mut rng = options.jitter_seed.map(ChaCha8Rng::seed_from_u64);
    match schedule {
        OracleSchedule::Ble(cfg) => {
            let interval = match options.interval {
                OracleInterval::Exact => cfg.adv_interval,
                OracleInterval::Coprime => cfg.adv_interval_hat,
            };
            // Transmissions: (start, length, channel), emitted event by event.
            let mut packets = Vec::new();
            let mut event = t0;
            for _ in 0..cfg.rate {
                if event > t0 + cfg.gnss {
                    break;
                }
                for channel in 0..3 {
                    packets.push((event + cfg.channel_lead(channel), cfg.pdu, channel));
                }
                let jitter = match rng.as_mut() {
                    Some(rng) if cfg.random_delay > 0 => rng.random_range(0..=cfg.random_delay),
                    _ => 0,
                };
                event += interval + jitter;
            }
            let supercycle = cfg.supercycle();
            let rx = |slot: u64| -> Option<usize> {
                let phase = slot % supercycle;
                let channel = (phase / cfg.scan_interval) as usize;
                (phase % cfg.scan_interval < cfg.scan_window).then_some(channel)
            };
            walk_slots(cfg.protocol, t0, cfg.gnss, None, &packets, rx)
        }
        OracleSchedule::Wifi(cfg, channel) => {
            let interval = match options.interval {
                OracleInterval::Exact => cfg.beacon_interval,
                OracleInterval::Coprime => cfg.beacon_interval_hat,
            };
            let mut packets = Vec::new();
            let mut beacon = t0;
            for _ in 0..cfg.rate {
                if beacon > t0 + cfg.gnss {
                    break;
                }
                packets.push((beacon, cfg.beacon, channel.index()));
                beacon += interval;
            }
            let supercycle = cfg.supercycle();
            let per_channel = cfg.dwell + cfg.switch;
            let rx = |slot: u64| -> Option<usize> {
                let phase = slot % supercycle;
                let channel = (phase / per_channel) as usize;
                (phase % per_channel < cfg.dwell).then_some(channel)
            };
            walk_slots(Protocol::Wifi, t0, cfg.gnss, Some(*channel), &packets, rx)
        }
    }
}

fn walk_slots(
    protocol: Protocol,
    t0: u64,
    gnss: u64,
    wifi_channel: Option<WifiChannel>,
    packets: &[(u64, u64, usize)],
    rx: impl Fn(u64) -> Option<usize>,
) -> MatchSlotSet {
    let mut set = MatchSlotSet::empty(protocol, t0, wifi_channel);
    let horizon = packets.iter().map(|(s, len, _)| s + len).max().unwrap_or(t0);
    // tx[slot - t0] = channel being transmitted in that slot
    let mut tx: Vec<Option<(usize, u64)>> = vec![None; (horizon - t0 + 1) as usize];
    for &(start, len, channel) in packets {
        for slot in start..start + len {
            tx[(slot - t0) as usize] = Some((channel, start));
        }
    }
    // A packet survives while every one of its slots is heard on its channel.
    let mut current: Option<(usize, u64, bool)> = None;
    for slot in t0..=horizon {
        let here = tx[(slot - t0) as usize];
        match (current, here) {
            (Some((ch, start, ok)), Some((ch2, start2))) if ch == ch2 && start == start2 => {
                current = Some((ch, start, ok && rx(slot) == Some(ch)));
            }
            _ => {
                if let Some((ch, start, ok)) = current.take() {
                    if ok && start <= t0 + gnss {
                        set.channels[ch].push(start);
                    }
                }
                current = here.map(|(ch, start)| (ch, start, rx(slot) == Some(ch)));
            }
        }
    }
    if let Some((ch, start, ok)) = current {
        if ok && start <= t0 + gnss {
            set.channels[ch].push(start);
        }
    }
    set
}
