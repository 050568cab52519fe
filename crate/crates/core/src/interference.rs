//! Radio reachability and per-packet collision survival probabilities.
//!
//! A sender reaches a receiver when its transmit power minus the log-distance
//! path loss (plus a per-link shadowing sample) clears the receiver
//! sensitivity of the sender's protocol. Collision survival is a product of
//! linear per-interferer factors `1 - window * rate / T_GNSS` over the other
//! senders that reach the receiver; each factor is clamped at 0.

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timing::{Protocol, TimingConfig, WifiChannel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterferenceError {
    #[error("path loss is undefined at distance {0} m")]
    BadDistance(f64),
    #[error("UAV {0} is not in the fleet")]
    UnknownUav(usize),
    #[error("sender {sender} uses {sender_protocol}, formula requested for {requested}")]
    ProtocolMismatch {
        sender: usize,
        sender_protocol: Protocol,
        requested: Protocol,
    },
    #[error("sender {sender} does not reach receiver {receiver}")]
    Unreachable { sender: usize, receiver: usize },
    #[error("shadowing matrix has {got} entries, expected {expected}")]
    ShadowingShape { got: usize, expected: usize },
    #[error("invalid link budget: {0}")]
    BadBudget(&'static str),
}

/// Radio settings of one UAV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    pub protocol: Protocol,
    pub rate: u32,
    pub tx_power_dbm: f64,
    /// Only meaningful when `protocol` is Wi-Fi.
    pub wifi_channel: WifiChannel,
}

impl RadioConfig {
    pub fn new(protocol: Protocol, rate: u32) -> Self {
        RadioConfig {
            protocol,
            rate,
            tx_power_dbm: 18.0,
            wifi_channel: WifiChannel::Ch1,
        }
    }

    pub fn with_channel(mut self, channel: WifiChannel) -> Self {
        self.wifi_channel = channel;
        self
    }
}

/// Log-distance path loss with log-normal shadowing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkBudget {
    pub path_loss_exponent: f64,
    pub shadowing_sigma_db: f64,
    /// Loss at 1 m. The default puts the zero-shadowing ranges at about
    /// 250 m (BLE 4), 0.94 km (BLE 5) and 2.2 km (Wi-Fi).
    pub reference_loss_db: f64,
    pub ble4_sensitivity_dbm: f64,
    pub ble5_sensitivity_dbm: f64,
    pub wifi_sensitivity_dbm: f64,
}

impl Default for LinkBudget {
    fn default() -> Self {
        LinkBudget {
            path_loss_exponent: 2.1,
            shadowing_sigma_db: 6f64.sqrt(),
            reference_loss_db: 52.6,
            ble4_sensitivity_dbm: -85.0,
            ble5_sensitivity_dbm: -97.0,
            wifi_sensitivity_dbm: -105.0,
        }
    }
}

impl LinkBudget {
    pub fn validate(&self) -> Result<(), InterferenceError> {
        if !(self.path_loss_exponent > 0.0) {
            return Err(InterferenceError::BadBudget("path loss exponent must be positive"));
        }
        if !(self.shadowing_sigma_db >= 0.0) {
            return Err(InterferenceError::BadBudget("shadowing sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn sensitivity_dbm(&self, protocol: Protocol) -> f64 {
        match protocol {
            Protocol::Ble4 => self.ble4_sensitivity_dbm,
            Protocol::Ble5 => self.ble5_sensitivity_dbm,
            Protocol::Wifi => self.wifi_sensitivity_dbm,
        }
    }

    /// Distance at which the unshadowed received power equals the sensitivity.
    pub fn nominal_range_m(&self, protocol: Protocol, tx_power_dbm: f64) -> f64 {
        let margin = tx_power_dbm - self.sensitivity_dbm(protocol) - self.reference_loss_db;
        10f64.powf(margin / (10.0 * self.path_loss_exponent))
    }

    /// Draws one shadowing value per ordered pair, row-major `[sender * m + receiver]`.
    /// The diagonal is zero.
    pub fn sample_shadowing<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> Vec<f64> {
        let mut out = vec![0.0; m * m];
        if self.shadowing_sigma_db == 0.0 {
            return out;
        }
        let normal = Normal::new(0.0, self.shadowing_sigma_db).expect("sigma validated");
        for j in 0..m {
            for i in 0..m {
                if i != j {
                    out[j * m + i] = normal.sample(rng);
                }
            }
        }
        out
    }
}

/// `reference + 10·n·log10(d) + shadow`.
pub fn path_loss_db(distance_m: f64, budget: &LinkBudget, shadow_sample_db: f64) -> Result<f64, InterferenceError> {
    if !(distance_m > 0.0) || !distance_m.is_finite() {
        return Err(InterferenceError::BadDistance(distance_m));
    }
    Ok(budget.reference_loss_db + 10.0 * budget.path_loss_exponent * distance_m.log10() + shadow_sample_db)
}

/// A frozen snapshot of UAV positions, radio settings and link shadowing.
#[derive(Debug, Clone)]
pub struct Fleet {
    pub positions: Vec<Vector3<f64>>,
    pub radios: Vec<RadioConfig>,
    /// Row-major `[sender * m + receiver]`, in dB.
    pub shadowing_db: Vec<f64>,
    pub budget: LinkBudget,
}

impl Fleet {
    pub fn new(
        positions: Vec<Vector3<f64>>,
        radios: Vec<RadioConfig>,
        shadowing_db: Vec<f64>,
        budget: LinkBudget,
    ) -> Result<Self, InterferenceError> {
        let m = positions.len();
        if radios.len() != m {
            return Err(InterferenceError::UnknownUav(radios.len().min(m)));
        }
        if shadowing_db.len() != m * m {
            return Err(InterferenceError::ShadowingShape {
                got: shadowing_db.len(),
                expected: m * m,
            });
        }
        budget.validate()?;
        Ok(Fleet {
            positions,
            radios,
            shadowing_db,
            budget,
        })
    }

    /// Fleet without shadowing.
    pub fn unshadowed(positions: Vec<Vector3<f64>>, radios: Vec<RadioConfig>, budget: LinkBudget) -> Result<Self, InterferenceError> {
        let m = positions.len();
        Fleet::new(positions, radios, vec![0.0; m * m], budget)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn check(&self, id: usize) -> Result<(), InterferenceError> {
        if id < self.len() {
            Ok(())
        } else {
            Err(InterferenceError::UnknownUav(id))
        }
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        (self.positions[a] - self.positions[b]).norm()
    }

    /// Received power at `receiver` from `sender` in dBm. Distances below the
    /// 1 m reference point are evaluated at 1 m.
    pub fn received_power_dbm(&self, sender: usize, receiver: usize) -> f64 {
        let d = self.distance(sender, receiver).max(1.0);
        let shadow = self.shadowing_db[sender * self.len() + receiver];
        let loss = path_loss_db(d, &self.budget, shadow).expect("distance clamped to 1 m");
        self.radios[sender].tx_power_dbm - loss
    }

    /// Whether `sender`'s signal on `protocol` clears the receiver sensitivity,
    /// regardless of the protocol `sender` currently uses.
    pub fn in_range(&self, sender: usize, receiver: usize, protocol: Protocol) -> bool {
        sender != receiver && self.received_power_dbm(sender, receiver) >= self.budget.sensitivity_dbm(protocol)
    }

    /// Senders on `protocol` that reach `receiver`.
    pub fn reach_set(&self, receiver: usize, protocol: Protocol) -> Vec<usize> {
        if receiver >= self.len() {
            return Vec::new();
        }
        (0..self.len())
            .filter(|&j| self.radios[j].protocol == protocol && self.in_range(j, receiver, protocol))
            .collect()
    }

    /// Receivers reached by `sender` when it broadcasts on `protocol`; empty
    /// if `sender` is on another protocol.
    pub fn recv_set(&self, sender: usize, protocol: Protocol) -> Vec<usize> {
        if sender >= self.len() || self.radios[sender].protocol != protocol {
            return Vec::new();
        }
        (0..self.len()).filter(|&i| self.in_range(sender, i, protocol)).collect()
    }

    /// Receivers reached by `sender` on its active protocol.
    pub fn active_recv_set(&self, sender: usize) -> Vec<usize> {
        match self.radios.get(sender) {
            Some(radio) => self.recv_set(sender, radio.protocol),
            None => Vec::new(),
        }
    }

    /// Survival probabilities for one packet from `sender` to `receiver`.
    pub fn collision_survival(&self, sender: usize, receiver: usize, timing: &TimingConfig) -> Result<ProbabilityBundle, InterferenceError> {
        self.check(sender)?;
        self.check(receiver)?;
        let protocol = self.radios[sender].protocol;
        if !self.in_range(sender, receiver, protocol) {
            return Err(InterferenceError::Unreachable { sender, receiver });
        }
        let t = timing.gnss_period_ms;
        let others = |p: Protocol| self.reach_set(receiver, p).into_iter().filter(move |&k| k != sender);
        let product = |p: Protocol, window_ms: f64| -> f64 {
            others(p)
                .map(|k| survival_factor(window_ms, self.radios[k].rate, t))
                .product()
        };
        let ble_pdu_sum = timing.ble4_pdu_ms + timing.ble5_pdu_ms;
        let aux_wifi = 9.0 * (timing.aux_packet_ms + timing.beacon_ms) / 37.0;
        let bundle = match protocol {
            Protocol::Ble4 => ProbabilityBundle {
                protocol,
                sti: product(Protocol::Ble4, 2.0 * timing.ble4_pdu_ms),
                cti: product(Protocol::Ble5, ble_pdu_sum),
                secondary_sti: 1.0,
                secondary_cti: 1.0,
            },
            Protocol::Ble5 => ProbabilityBundle {
                protocol,
                sti: product(Protocol::Ble5, 2.0 * timing.ble5_pdu_ms),
                cti: product(Protocol::Ble4, ble_pdu_sum),
                secondary_sti: product(Protocol::Ble5, 2.0 * timing.aux_packet_ms / 37.0),
                secondary_cti: product(Protocol::Wifi, aux_wifi),
            },
            Protocol::Wifi => {
                let channel = self.radios[sender].wifi_channel;
                let sti = others(Protocol::Wifi)
                    .filter(|&k| self.radios[k].wifi_channel == channel)
                    .map(|k| survival_factor(2.0 * timing.beacon_ms, self.radios[k].rate, t))
                    .product();
                ProbabilityBundle {
                    protocol,
                    sti,
                    cti: product(Protocol::Ble5, aux_wifi),
                    secondary_sti: 1.0,
                    secondary_cti: 1.0,
                }
            }
        };
        Ok(bundle)
    }

    /// Like [`Fleet::collision_survival`] but checks the sender's protocol first.
    pub fn collision_survival_for(
        &self,
        protocol: Protocol,
        sender: usize,
        receiver: usize,
        timing: &TimingConfig,
    ) -> Result<ProbabilityBundle, InterferenceError> {
        self.check(sender)?;
        let sender_protocol = self.radios[sender].protocol;
        if sender_protocol != protocol {
            return Err(InterferenceError::ProtocolMismatch {
                sender,
                sender_protocol,
                requested: protocol,
            });
        }
        self.collision_survival(sender, receiver, timing)
    }
}

/// `max(0, 1 - window * rate / period)`.
pub fn survival_factor(window_ms: f64, rate: u32, period_ms: f64) -> f64 {
    (1.0 - window_ms * rate as f64 / period_ms).clamp(0.0, 1.0)
}

/// Per-attempt collision survival for one link.
///
/// For BLE 4 and Wi-Fi only `sti` and `cti` apply. For BLE 5 they are the
/// primary-channel (pointer PDU) factors and `secondary_*` cover the
/// auxiliary packet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityBundle {
    pub protocol: Protocol,
    pub sti: f64,
    pub cti: f64,
    pub secondary_sti: f64,
    pub secondary_cti: f64,
}

impl ProbabilityBundle {
    pub fn clear(protocol: Protocol) -> Self {
        ProbabilityBundle {
            protocol,
            sti: 1.0,
            cti: 1.0,
            secondary_sti: 1.0,
            secondary_cti: 1.0,
        }
    }

    /// Survival of a packet on the primary channel(s).
    pub fn primary(&self) -> f64 {
        self.sti * self.cti
    }

    /// Survival of a BLE 5 auxiliary packet; 1 for the other protocols.
    pub fn secondary(&self) -> f64 {
        self.secondary_sti * self.secondary_cti
    }
}
