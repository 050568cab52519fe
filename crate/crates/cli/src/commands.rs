use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;
use ridsim::dmuca::{run_scenario, DelayMode, RunResult, Scenario};
use ridsim::expected_delay::{DelayModel, UndeliverablePolicy};
use ridsim::interference::{LinkBudget, RadioConfig};
use ridsim::madqn::{self, read_checkpoint, write_checkpoint, BaselineKind, MadqnError, Policy};
use ridsim::sim_env::{Action, Env, EnvConfig};
use ridsim::sweep::{fixed_fleet, sample_cell, summarize, CellSample, SweepConfig};
use ridsim::timing::{Protocol, TimingConfig};
use serde::Serialize;

use crate::config::{self, Config, DelaySpec};
use crate::manifest::{RunManifest, CSV_SCHEMA_VERSION};
use crate::ConfigError;

/// Collects the files a command writes, relative to its output directory.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn csv(&mut self, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
        Ok(csv::Writer::from_writer(self.file(name)?))
    }

    fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?))
    }

    fn finish<T: Serialize>(self, command: &str, cfg: &Config, section: &T, seeds: Vec<u64>, started: Instant, metrics: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema: CSV_SCHEMA_VERSION,
            config_hash: config::hash(section)?,
            seeds,
            outputs: self.files,
            wall_clock_s: started.elapsed().as_secs_f64(),
            metrics,
            config: serde_json::to_value(cfg)?,
        };
        manifest.write(&self.dir)?;
        info!("{command}: wrote {} files to {}", manifest.outputs.len(), self.dir.display());
        Ok(())
    }
}

pub fn dispatch(command: &str, cfg: &Config, out: &Path) -> Result<()> {
    match command {
        "delay-sweep" => delay_sweep(cfg, out),
        "packet-loss" => packet_loss(cfg, out),
        "dmuca" => dmuca(cfg, out),
        "train" => train(cfg, out),
        "evaluate" => evaluate(cfg, out),
        other => Err(ConfigError(format!("unknown command `{other}`")).into()),
    }
}

#[derive(Serialize)]
struct SweepRow {
    protocol: Protocol,
    psi: u32,
    area: f64,
    seeds: usize,
    mean_delay_ms: f64,
    median_delay_ms: f64,
    loss_rate: f64,
    links: usize,
}

#[derive(Serialize)]
struct SweepSeedRow {
    protocol: Protocol,
    psi: u32,
    area: f64,
    seed: u64,
    mean_delay_ms: f64,
    loss_rate: f64,
    links: usize,
}

#[derive(Serialize)]
struct LinkRow {
    area: f64,
    seed: u64,
    sender: usize,
    receiver: usize,
    protocol: Protocol,
    psi: u32,
    t0_count: usize,
    mean_delay_ms: f64,
    loss_rate: f64,
}

fn run_cells(sweep: &SweepConfig) -> Result<(DelayModel, Vec<CellSample>)> {
    sweep.validate().map_err(ConfigError)?;
    let model = DelayModel::new(sweep.timing.clone(), sweep.psi_max, sweep.undeliverable).map_err(|e| ConfigError(e.to_string()))?;
    let jobs: Vec<_> = sweep.cells().into_iter().flat_map(|c| sweep.seed_list().into_iter().map(move |s| (c, s))).collect();
    let samples = jobs
        .par_iter()
        .map(|&(cell, seed)| sample_cell(&model, sweep, cell, seed))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((model, samples))
}

fn write_sweep(name: &str, sweep: &SweepConfig, cfg: &Config, section: &impl Serialize, out: &Path, link_tables: bool) -> Result<()> {
    let started = Instant::now();
    let (model, samples) = run_cells(sweep)?;
    let mut outputs = Outputs::new(out)?;
    let stem = name.replace('-', "_");
    let mut w = outputs.csv(&format!("{stem}.csv"))?;
    for s in summarize(&samples) {
        w.serialize(SweepRow {
            protocol: s.protocol,
            psi: s.rate,
            area: s.area,
            seeds: s.seeds,
            mean_delay_ms: s.mean_delay_ms,
            median_delay_ms: s.median_delay_ms,
            loss_rate: s.loss_rate,
            links: s.links,
        })?;
    }
    w.flush()?;
    let mut w = outputs.csv(&format!("{stem}_seeds.csv"))?;
    for s in &samples {
        w.serialize(SweepSeedRow {
            protocol: s.protocol,
            psi: s.rate,
            area: s.area,
            seed: s.seed,
            mean_delay_ms: s.mean_delay_ms,
            loss_rate: s.loss_rate(),
            links: s.links,
        })?;
    }
    w.flush()?;
    if link_tables {
        let mut w = outputs.csv(&format!("{stem}_links.csv"))?;
        for s in &samples {
            let fleet = fixed_fleet(sweep, s.protocol, s.rate, sweep.side(s.area), s.seed);
            for l in model.link_table(&fleet)? {
                w.serialize(LinkRow {
                    area: s.area,
                    seed: s.seed,
                    sender: l.sender,
                    receiver: l.receiver,
                    protocol: l.protocol,
                    psi: l.rate,
                    t0_count: l.t0_count,
                    mean_delay_ms: l.mean_delay_ms,
                    loss_rate: l.loss_rate,
                })?;
            }
        }
        w.flush()?;
    }
    outputs.finish(name, cfg, section, sweep.seed_list(), started, serde_json::json!({}))
}

fn delay_sweep(cfg: &Config, out: &Path) -> Result<()> {
    write_sweep("delay-sweep", &cfg.delay_sweep, cfg, &cfg.delay_sweep, out, cfg.output.link_tables)
}

fn packet_loss(cfg: &Config, out: &Path) -> Result<()> {
    write_sweep("packet-loss", &cfg.packet_loss.0, cfg, &cfg.packet_loss, out, cfg.output.link_tables)
}

#[derive(Serialize)]
struct RunRow {
    regime: String,
    seed: u64,
    min_distance: f64,
    pairs_below_conflict: usize,
    conflict_steps: usize,
    collision_steps: usize,
    mean_prediction_error: f64,
    relaxed_decisions: usize,
    max_final_track_error: f64,
}

#[derive(Serialize)]
struct PairRow {
    regime: String,
    seed: u64,
    id_a: usize,
    id_b: usize,
    min_distance: f64,
    time_of_min: f64,
    conflict_steps: usize,
    time_below_conflict: f64,
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    id: usize,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Serialize)]
struct SeparationRow {
    t: f64,
    id_a: usize,
    id_b: usize,
    distance: f64,
}

#[derive(Serialize)]
struct DelayRow {
    sent: f64,
    sender: usize,
    receiver: usize,
    delivered: bool,
    delay_s: Option<f64>,
}

pub fn build_scenario(d: &config::DmucaConfig, spec: DelaySpec, seed: u64) -> Result<Scenario> {
    let delay = match spec {
        DelaySpec::Sampled { lo, hi } => DelayMode::Sampled { lo, hi },
        DelaySpec::Protocol { protocol, rate } => {
            let model = DelayModel::new(TimingConfig::default(), rate.max(10), UndeliverablePolicy::default())
                .map_err(|e| ConfigError(format!("dmuca.regimes: {e}")))?;
            DelayMode::Protocol {
                model: Box::new(model),
                radios: vec![RadioConfig::new(protocol, rate); 5],
                budget: LinkBudget::default(),
            }
        }
    };
    let mut scenario = d
        .scenario
        .scenario(delay, d.avoidance, seed)
        .map_err(|e| ConfigError(format!("dmuca: {e}")))?;
    scenario.gnss_period = d.gnss_period;
    scenario.validate().map_err(|e| ConfigError(format!("dmuca: {e}")))?;
    Ok(scenario)
}

fn dmuca(cfg: &Config, out: &Path) -> Result<()> {
    let started = Instant::now();
    let d = &cfg.dmuca;
    if d.seeds == 0 || d.regimes.is_empty() || d.trace_every == 0 {
        return Err(ConfigError("dmuca: seeds, regimes and trace_every must be non-empty".into()).into());
    }
    let seeds: Vec<u64> = (d.first_seed..d.first_seed + d.seeds).collect();
    let mut jobs = Vec::new();
    for &spec in &d.regimes {
        for &seed in &seeds {
            jobs.push((spec, seed, build_scenario(d, spec, seed)?));
        }
    }
    let results: Vec<RunResult> = jobs
        .par_iter()
        .map(|(_, _, scenario)| run_scenario(scenario))
        .collect::<Result<_, _>>()?;
    let mut outputs = Outputs::new(out)?;
    let mut runs = outputs.csv("runs.csv")?;
    let mut pairs = outputs.csv("pair_minima.csv")?;
    let conflict = 2.0 * d.scenario.conflict_radius;
    for ((spec, seed, scenario), result) in jobs.iter().zip(&results) {
        let summary = result.summary(scenario);
        let regime = spec.label();
        runs.serialize(RunRow {
            regime: regime.clone(),
            seed: *seed,
            min_distance: summary.min_distance,
            pairs_below_conflict: summary.pairs_below(conflict),
            conflict_steps: summary.conflict_steps,
            collision_steps: summary.collision_steps,
            mean_prediction_error: result.mean_prediction_error,
            relaxed_decisions: result.relaxed_decisions,
            max_final_track_error: result.final_track_error.iter().cloned().fold(0.0, f64::max),
        })?;
        for p in &summary.pairs {
            pairs.serialize(PairRow {
                regime: regime.clone(),
                seed: *seed,
                id_a: p.id_a,
                id_b: p.id_b,
                min_distance: p.min_distance,
                time_of_min: p.time_of_min,
                conflict_steps: p.conflict_steps,
                time_below_conflict: p.time_below_conflict,
            })?;
        }
        if *seed < d.first_seed + d.trace_seeds {
            write_traces(&mut outputs, &format!("traces/{regime}_seed{seed}"), result, d.trace_every)?;
        }
    }
    runs.flush()?;
    pairs.flush()?;
    outputs.finish("dmuca", cfg, d, seeds, started, serde_json::json!({}))
}

fn write_traces(outputs: &mut Outputs, stem: &str, result: &RunResult, every: usize) -> Result<()> {
    let times = &result.separation.times;
    let mut w = outputs.csv(&format!("{stem}_trajectory.csv"))?;
    for (step, row) in result.positions.iter().enumerate().step_by(every) {
        for (id, p) in row.iter().enumerate() {
            w.serialize(TrajectoryRow {
                t: times[step],
                id,
                x: p.x,
                y: p.y,
                z: p.z,
            })?;
        }
    }
    w.flush()?;
    let mut w = outputs.csv(&format!("{stem}_separation.csv"))?;
    for (step, row) in result.separation.distances.iter().enumerate().step_by(every) {
        for (&(a, b), &distance) in result.separation.pairs.iter().zip(row) {
            w.serialize(SeparationRow {
                t: times[step],
                id_a: a,
                id_b: b,
                distance,
            })?;
        }
    }
    w.flush()?;
    let mut w = outputs.csv(&format!("{stem}_delays.csv"))?;
    for r in &result.deliveries {
        w.serialize(DelayRow {
            sent: r.sent,
            sender: r.sender,
            receiver: r.receiver,
            delivered: r.delay.is_some(),
            delay_s: r.delay,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn checked_env(cfg: &EnvConfig, seed: u64) -> Result<Env> {
    Env::new(cfg.clone(), seed).map_err(|e| ConfigError(format!("env: {e}")).into())
}

fn train(cfg: &Config, out: &Path) -> Result<()> {
    let started = Instant::now();
    let t = &cfg.train;
    t.agent.validate().map_err(|e| ConfigError(format!("train.agent: {e}")))?;
    let mut env = checked_env(&t.env, t.seed)?;
    let (agents, log) = madqn::train_with(&mut env, &t.agent, t.seed, |l| {
        if l.episode % 10 == 0 || l.episode == t.agent.episodes {
            info!(
                "episode {}: mean reward {:.2}, mean delay {:.2} ms, epsilon {:.3}",
                l.episode, l.mean_reward, l.mean_objective, l.epsilon
            );
        }
    })?;
    let mut outputs = Outputs::new(out)?;
    let mut w = csv::Writer::from_writer(outputs.file("training_log.csv")?);
    let m = t.env.fleet_size;
    let mut header = vec!["episode".to_string()];
    header.extend((0..m).map(|j| format!("reward_uav{j}")));
    header.extend(["mean_reward", "mean_delay_ms", "epsilon", "mean_loss"].map(String::from));
    w.write_record(&header)?;
    for l in &log {
        let mut row = vec![l.episode.to_string()];
        row.extend(l.agent_rewards.iter().map(|r| r.to_string()));
        row.push(l.mean_reward.to_string());
        row.push(l.mean_objective.to_string());
        row.push(l.epsilon.to_string());
        row.push(l.mean_loss.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    let nets: Vec<_> = agents.into_iter().map(|a| a.online).collect();
    let mut f = outputs.file("checkpoint.ridq")?;
    write_checkpoint(&mut f, &nets)?;
    drop(f);
    outputs.finish("train", cfg, t, vec![t.seed], started, serde_json::json!({}))
}

#[derive(Serialize)]
struct EvalRow {
    policy: String,
    area: String,
    seed: u64,
    mean_delay_ms: f64,
    mean_reward: f64,
}

#[derive(Serialize)]
struct EvalSummaryRow {
    policy: String,
    area: String,
    seeds: usize,
    median_delay_ms: f64,
    mean_delay_ms: f64,
}

fn all_baselines(psi_max: u32) -> Vec<BaselineKind> {
    let mut out: Vec<BaselineKind> = (0..Action::space_size(psi_max))
        .map(|i| {
            let a = Action::from_index(i, psi_max).expect("index in range");
            BaselineKind::Fixed {
                protocol: a.protocol,
                rate: a.rate,
            }
        })
        .collect();
    out.push(BaselineKind::Random);
    out
}

fn evaluate(cfg: &Config, out: &Path) -> Result<()> {
    let started = Instant::now();
    let e = &cfg.evaluate;
    let env_cfg = e.env.clone().unwrap_or_else(|| cfg.train.env.clone());
    env_cfg.validate().map_err(|err| ConfigError(format!("evaluate.env: {err}")))?;
    if e.seeds.is_empty() || e.episodes == 0 || e.steps == 0 {
        bail!(ConfigError("evaluate: seeds, episodes and steps must be non-empty".into()));
    }
    let mut policies = Vec::new();
    if let Some(path) = &e.checkpoint {
        let mut f = File::open(path).map_err(|err| ConfigError(format!("evaluate.checkpoint {}: {err}", path.display())))?;
        let nets = read_checkpoint(&mut f).map_err(|err| ConfigError(format!("evaluate.checkpoint: {err}")))?;
        policies.push(Policy::Learned(nets));
    }
    let baselines = if e.baselines.is_empty() { all_baselines(env_cfg.psi_max) } else { e.baselines.clone() };
    for b in baselines {
        policies.push(madqn::baseline_policy(b, env_cfg.psi_max).map_err(|err| ConfigError(format!("evaluate.baselines: {err}")))?);
    }
    let mut regimes: Vec<(String, EnvConfig)> = vec![("mixed".into(), env_cfg.clone())];
    if e.per_area && env_cfg.areas.len() > 1 {
        for &a in &env_cfg.areas {
            regimes.push((a.to_string(), EnvConfig { areas: vec![a], ..env_cfg.clone() }));
        }
    }
    let mut jobs = Vec::new();
    for (pi, _) in policies.iter().enumerate() {
        for (ri, _) in regimes.iter().enumerate() {
            for &seed in &e.seeds {
                jobs.push((pi, ri, seed));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(pi, ri, seed)| {
            let mut env = Env::new(regimes[ri].1.clone(), seed).map_err(MadqnError::from)?;
            madqn::evaluate(&mut env, &policies[pi], e.episodes, e.steps, seed)
        })
        .collect::<Result<Vec<_>, _>>()
        .map_err(|err| match err {
            MadqnError::ShapeMismatch => anyhow::Error::new(ConfigError("checkpoint networks do not fit the environment".into())),
            other => other.into(),
        })?;
    let mut outputs = Outputs::new(out)?;
    let mut w = outputs.csv("evaluation.csv")?;
    for (&(_, ri, seed), r) in jobs.iter().zip(&results) {
        w.serialize(EvalRow {
            policy: r.policy.clone(),
            area: regimes[ri].0.clone(),
            seed,
            mean_delay_ms: r.mean_delay_ms,
            mean_reward: r.mean_reward,
        })?;
    }
    w.flush()?;
    let mut w = outputs.csv("evaluation_summary.csv")?;
    let mut latency = serde_json::Map::new();
    for (pi, p) in policies.iter().enumerate() {
        let mut lat = Vec::new();
        for (ri, (area, _)) in regimes.iter().enumerate() {
            let delays: Vec<f64> = jobs
                .iter()
                .zip(&results)
                .filter(|((a, b, _), _)| *a == pi && *b == ri)
                .map(|(_, r)| {
                    lat.push(r.decision_latency_us);
                    r.mean_delay_ms
                })
                .collect();
            w.serialize(EvalSummaryRow {
                policy: p.label(),
                area: area.clone(),
                seeds: delays.len(),
                median_delay_ms: ridsim::sweep::median(&delays),
                mean_delay_ms: delays.iter().sum::<f64>() / delays.len() as f64,
            })?;
        }
        latency.insert(p.label(), serde_json::json!(lat.iter().sum::<f64>() / lat.len() as f64));
    }
    w.flush()?;
    outputs.finish(
        "evaluate",
        cfg,
        &(e, &env_cfg),
        e.seeds.clone(),
        started,
        serde_json::json!({ "decision_latency_us": latency }),
    )
}
