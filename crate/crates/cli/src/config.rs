//! Run configuration: one TOML file with a section per command, plus
//! `section.field=value` overrides from the command line.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ridsim::dmuca::CannedScenario;
use ridsim::madqn::{BaselineKind, TrainConfig};
use ridsim::orca::AvoidanceConfig;
use ridsim::sim_env::{Action, EnvConfig};
use ridsim::sweep::SweepConfig;
use ridsim::timing::Protocol;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub delay_sweep: SweepConfig,
    pub packet_loss: PacketLossConfig,
    pub dmuca: DmucaConfig,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Also write the per-link delay table of every sweep cell and seed.
    pub link_tables: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            delay_sweep: SweepConfig::default(),
            packet_loss: PacketLossConfig::default(),
            dmuca: DmucaConfig::default(),
            train: TrainSection::default(),
            evaluate: EvaluateSection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Sweep defaults for the loss experiment: the best fixed rate of each
/// protocol and many seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PacketLossConfig(pub SweepConfig);

impl Default for PacketLossConfig {
    fn default() -> Self {
        PacketLossConfig(SweepConfig {
            modes: vec![
                Action {
                    protocol: Protocol::Ble4,
                    rate: 9,
                },
                Action {
                    protocol: Protocol::Ble5,
                    rate: 10,
                },
                Action {
                    protocol: Protocol::Wifi,
                    rate: 10,
                },
            ],
            seeds: 500,
            ..SweepConfig::default()
        })
    }
}

/// Message delay regime of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelaySpec {
    /// Uniform in `[lo, hi]` seconds.
    Sampled { lo: f64, hi: f64 },
    /// Slot-level protocol model, every UAV on the same radio.
    Protocol { protocol: Protocol, rate: u32 },
}

impl DelaySpec {
    /// File-name friendly label.
    pub fn label(&self) -> String {
        match self {
            DelaySpec::Sampled { lo, hi } => format!("sampled_{lo}-{hi}"),
            DelaySpec::Protocol { protocol, rate } => format!("protocol_{protocol}_{rate}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DmucaConfig {
    pub scenario: CannedScenario,
    pub avoidance: AvoidanceConfig,
    pub regimes: Vec<DelaySpec>,
    pub seeds: u64,
    pub first_seed: u64,
    /// Full trajectory, separation and delay logs are written for this many
    /// seeds of each regime.
    pub trace_seeds: u64,
    /// Integration steps between trace rows.
    pub trace_every: usize,
    pub gnss_period: f64,
}

impl Default for DmucaConfig {
    fn default() -> Self {
        DmucaConfig {
            scenario: CannedScenario::default(),
            avoidance: AvoidanceConfig::default(),
            regimes: vec![
                DelaySpec::Sampled { lo: 0.0, hi: 1.0 },
                DelaySpec::Sampled { lo: 1.0, hi: 2.0 },
                DelaySpec::Sampled { lo: 2.0, hi: 3.0 },
            ],
            seeds: 20,
            first_seed: 0,
            trace_seeds: 1,
            trace_every: 10,
            gnss_period: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub env: EnvConfig,
    pub agent: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            seed: 0,
            env: EnvConfig::default(),
            agent: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Environment to evaluate in. Defaults to the training environment.
    pub env: Option<EnvConfig>,
    /// Checkpoint of learned networks. Without one only baselines run.
    pub checkpoint: Option<PathBuf>,
    pub episodes: u64,
    pub steps: u64,
    pub seeds: Vec<u64>,
    /// Baselines to compare. Empty means every fixed action plus random.
    pub baselines: Vec<BaselineKind>,
    /// Also evaluate each configured area on its own.
    pub per_area: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            env: None,
            checkpoint: None,
            episodes: 20,
            steps: 20,
            seeds: (1000..1005).collect(),
            baselines: Vec::new(),
            per_area: true,
        }
    }
}

/// Reads `path` (or the defaults) and applies `overrides` of the form
/// `section.field.sub=value`, where `value` is TOML (bare words are strings).
pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            text.parse::<toml::Table>().with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    // fields left out of [packet_loss] keep the loss defaults, not the plain sweep ones
    if let Some(toml::Value::Table(given)) = value.get_mut("packet_loss") {
        let toml::Value::Table(mut merged) = toml::Value::try_from(PacketLossConfig::default())? else {
            bail!("packet_loss defaults are not a table");
        };
        merged.extend(std::mem::take(given));
        *given = merged;
    }
    let cfg: Config = toml::Value::Table(value).try_into().context("invalid config")?;
    Ok(cfg)
}

fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` is not key=value");
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key}` has an empty segment");
    }
    let value = parse_value(raw.trim());
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override key `{key}`: `{part}` is not a table"),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// SHA-256 of the compact JSON rendering of a config section.
pub fn hash<T: Serialize>(section: &T) -> Result<String> {
    let text = serde_json::to_string(section).context("serialising config")?;
    Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}
