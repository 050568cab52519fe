//! Closed-loop distributed collision avoidance over Remote ID.
//!
//! Every GNSS period each UAV broadcasts its position and velocity. Each
//! receiver gets the message after its own delay (or never). At every
//! decision period a UAV extrapolates its neighbours' last reports to the
//! current time, and
//! - if its current velocity conflicts with any of them, switches to the
//!   ORCA velocity closest to its current one;
//! - otherwise keeps its velocity until `n_noncollide` clear periods have
//!   passed, then steers back to its plan, still filtered through ORCA.
//!
//! Whenever ORCA is applied, the constraint set holds one plane for every
//! neighbour close enough to matter within the time window, not only for the
//! neighbours currently in conflict.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expected_delay::DelayModel;
use crate::interference::{Fleet, LinkBudget, RadioConfig};
use crate::orca::{
    optimal_velocity, orca_constraint, orca_halfspace_seeded, within_reach, AvoidanceConfig, HalfSpace, OrcaError, UavState, Vec3,
};
use crate::prediction::{RemoteIdMessage, TrackTable};
use crate::rng::substream;
use crate::trajectory::{recovery_velocity, TimedTrajectory, TrajectoryError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("segment {segment} needs {speed:.3} m/s, above v_max {v_max} m/s")]
    InfeasibleSpeed { segment: usize, speed: f64, v_max: f64 },
    #[error("delay interval [{lo}, {hi}] is invalid")]
    BadDelayInterval { lo: f64, hi: f64 },
    #[error("scenario has {uavs} UAVs but {trajectories} trajectories")]
    Mismatch { uavs: usize, trajectories: usize },
    #[error("invalid timing: {0}")]
    BadTiming(&'static str),
    #[error("duration {duration} s ends before the last trajectory ({end} s)")]
    TooShort { duration: f64, end: f64 },
    #[error(transparent)]
    Orca(#[from] OrcaError),
}

/// Piecewise-linear trajectory through timed waypoints, sampled every
/// `sample_dt` seconds (waypoints are always kept).
pub fn waypoint_trajectory(
    waypoints: &[(f64, Vec3)],
    v_max: f64,
    sample_dt: f64,
    recovery_interval: f64,
) -> Result<TimedTrajectory, ScenarioError> {
    if waypoints.len() < 2 {
        return Err(TrajectoryError::TooShort.into());
    }
    let mut samples = vec![waypoints[0]];
    for (segment, pair) in waypoints.windows(2).enumerate() {
        let (t0, p0) = pair[0];
        let (t1, p1) = pair[1];
        if !(t1 > t0) {
            return Err(TrajectoryError::NotIncreasing(segment + 1).into());
        }
        let speed = (p1 - p0).norm() / (t1 - t0);
        if speed > v_max + 1e-9 {
            return Err(ScenarioError::InfeasibleSpeed { segment, speed, v_max });
        }
        let steps = if sample_dt > 0.0 { ((t1 - t0) / sample_dt).ceil().max(1.0) as usize } else { 1 };
        for k in 1..=steps {
            let s = k as f64 / steps as f64;
            samples.push((t0 + (t1 - t0) * s, p0 + (p1 - p0) * s));
        }
    }
    Ok(TimedTrajectory::new(samples, recovery_interval)?)
}

/// How long each broadcast takes to reach each receiver.
#[derive(Debug, Clone)]
pub enum DelayMode {
    /// Uniform in `[lo, hi]` seconds, always delivered.
    Sampled { lo: f64, hi: f64 },
    /// Drawn from the slot-level protocol model: random start slot, the
    /// sender's match schedule and per-attempt collision survival. Receivers
    /// outside the sender's range get nothing.
    Protocol {
        model: Box<DelayModel>,
        radios: Vec<RadioConfig>,
        budget: LinkBudget,
    },
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub uavs: Vec<UavState>,
    pub trajectories: Vec<TimedTrajectory>,
    pub gnss_period: f64,
    /// Integration step, seconds. Decisions happen every `avoidance.t_orca`.
    pub dt: f64,
    pub delay: DelayMode,
    pub avoidance: AvoidanceConfig,
    pub duration: f64,
    pub seed: u64,
    /// Tracks not refreshed for this long are ignored.
    pub track_max_age: f64,
}

/// Parameters of the built-in five-UAV crossing scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CannedScenario {
    pub side: f64,
    pub flight_time: f64,
    pub converge_time: f64,
    /// Distance from the centre of the start and end points, metres.
    pub radius: f64,
    /// Radius of the ring of aim points around the centre, metres.
    pub aim_spread: f64,
    pub conflict_radius: f64,
    pub physical_radius: f64,
    pub v_max: f64,
    pub recovery_interval: f64,
}

impl Default for CannedScenario {
    fn default() -> Self {
        CannedScenario {
            side: 1000.0,
            flight_time: 500.0,
            converge_time: 250.0,
            radius: 450.0,
            aim_spread: 3.0,
            conflict_radius: 5.0,
            physical_radius: 1.0,
            v_max: 5.0,
            recovery_interval: 10.0,
        }
    }
}

impl CannedScenario {
    /// Five UAVs starting on a circle around the centre of the airspace, all
    /// passing near the centre at `converge_time` and ending diametrically
    /// opposite at `flight_time`.
    pub fn trajectories(&self) -> Result<Vec<TimedTrajectory>, ScenarioError> {
        let c = Vec3::new(self.side / 2.0, self.side / 2.0, 0.0);
        let altitudes = [100.0, 130.0, 160.0, 120.0, 140.0];
        (0..5)
            .map(|k| {
                let theta = std::f64::consts::TAU * k as f64 / 5.0;
                let dir = Vec3::new(theta.cos(), theta.sin(), 0.0);
                let aim_theta = theta + std::f64::consts::FRAC_PI_2;
                let aim = c + Vec3::new(aim_theta.cos(), aim_theta.sin(), 0.0) * self.aim_spread + Vec3::new(0.0, 0.0, 150.0);
                let start = c + dir * self.radius + Vec3::new(0.0, 0.0, altitudes[k]);
                let end = c - dir * self.radius + Vec3::new(0.0, 0.0, altitudes[(k + 2) % 5]);
                waypoint_trajectory(
                    &[(0.0, start), (self.converge_time, aim), (self.flight_time, end)],
                    self.v_max,
                    1.0,
                    self.recovery_interval,
                )
            })
            .collect()
    }

    pub fn scenario(&self, delay: DelayMode, avoidance: AvoidanceConfig, seed: u64) -> Result<Scenario, ScenarioError> {
        let trajectories = self.trajectories()?;
        let uavs = trajectories
            .iter()
            .enumerate()
            .map(|(id, traj)| UavState {
                id,
                position: traj.position_at(0.0),
                velocity: Vec3::zeros(),
                physical_radius: self.physical_radius,
                conflict_radius: self.conflict_radius,
                v_max: self.v_max,
            })
            .collect();
        Scenario::new(uavs, trajectories, delay, avoidance, self.flight_time, seed)
    }
}

impl Scenario {
    pub fn new(
        uavs: Vec<UavState>,
        trajectories: Vec<TimedTrajectory>,
        delay: DelayMode,
        avoidance: AvoidanceConfig,
        duration: f64,
        seed: u64,
    ) -> Result<Self, ScenarioError> {
        let scenario = Scenario {
            uavs,
            trajectories,
            gnss_period: 1.0,
            dt: avoidance.t_orca,
            delay,
            avoidance,
            duration,
            seed,
            track_max_age: 3.0,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.uavs.len() != self.trajectories.len() {
            return Err(ScenarioError::Mismatch {
                uavs: self.uavs.len(),
                trajectories: self.trajectories.len(),
            });
        }
        if let DelayMode::Sampled { lo, hi } = self.delay {
            if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
                return Err(ScenarioError::BadDelayInterval { lo, hi });
            }
        }
        if !(self.dt > 0.0 && self.gnss_period >= self.dt && self.avoidance.t_orca >= self.dt) {
            return Err(ScenarioError::BadTiming("need 0 < dt <= t_orca and dt <= gnss_period"));
        }
        if !(self.avoidance.tau > 0.0) || self.avoidance.n_noncollide == 0 {
            return Err(ScenarioError::BadTiming("tau must be positive and n_noncollide at least 1"));
        }
        let end = self.trajectories.iter().map(|t| t.end_time()).fold(0.0, f64::max);
        if self.duration < end {
            return Err(ScenarioError::TooShort {
                duration: self.duration,
                end,
            });
        }
        Ok(())
    }
}

/// One broadcast as seen by one receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeliveryRecord {
    pub sent: f64,
    pub sender: usize,
    pub receiver: usize,
    /// Seconds, `None` if the message never arrived.
    pub delay: Option<f64>,
}

/// Pairwise distances at every integration step.
#[derive(Debug, Clone, Default)]
pub struct SeparationTrace {
    pub times: Vec<f64>,
    pub pairs: Vec<(usize, usize)>,
    /// `distances[step][pair]`.
    pub distances: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairSummary {
    pub id_a: usize,
    pub id_b: usize,
    pub min_distance: f64,
    pub time_of_min: f64,
    /// Steps with distance below the combined conflict radii.
    pub conflict_steps: usize,
    /// Steps with distance below the combined physical radii.
    pub collision_steps: usize,
    pub time_below_conflict: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationSummary {
    pub pairs: Vec<PairSummary>,
    pub min_distance: f64,
    pub conflict_steps: usize,
    pub collision_steps: usize,
}

impl SeparationSummary {
    pub fn pairs_below(&self, threshold: f64) -> usize {
        self.pairs.iter().filter(|p| p.min_distance < threshold).count()
    }
}

/// Per-pair minima and threshold counts of a trace.
pub fn separation_metrics(trace: &SeparationTrace, conflict_distance: f64, collision_distance: f64) -> SeparationSummary {
    let step = if trace.times.len() > 1 { trace.times[1] - trace.times[0] } else { 0.0 };
    let pairs: Vec<PairSummary> = trace
        .pairs
        .iter()
        .enumerate()
        .map(|(k, &(a, b))| {
            let mut summary = PairSummary {
                id_a: a,
                id_b: b,
                min_distance: f64::INFINITY,
                time_of_min: f64::NAN,
                conflict_steps: 0,
                collision_steps: 0,
                time_below_conflict: 0.0,
            };
            for (row, &t) in trace.distances.iter().zip(&trace.times) {
                let d = row[k];
                if d < summary.min_distance {
                    summary.min_distance = d;
                    summary.time_of_min = t;
                }
                if d < conflict_distance {
                    summary.conflict_steps += 1;
                }
                if d < collision_distance {
                    summary.collision_steps += 1;
                }
            }
            summary.time_below_conflict = summary.conflict_steps as f64 * step;
            summary
        })
        .collect();
    SeparationSummary {
        min_distance: pairs.iter().map(|p| p.min_distance).fold(f64::INFINITY, f64::min),
        conflict_steps: pairs.iter().map(|p| p.conflict_steps).sum(),
        collision_steps: pairs.iter().map(|p| p.collision_steps).sum(),
        pairs,
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    /// `positions[step][uav]`, aligned with `separation.times`.
    pub positions: Vec<Vec<Vec3>>,
    pub separation: SeparationTrace,
    pub deliveries: Vec<DeliveryRecord>,
    /// Mean distance between predicted and true neighbour positions over all
    /// decisions that used a track.
    pub mean_prediction_error: f64,
    /// Decision periods that ended in the relaxed (infeasible) ORCA branch.
    pub relaxed_decisions: usize,
    /// Remaining distance to the plan at the end of the run, per UAV.
    pub final_track_error: Vec<f64>,
}

impl RunResult {
    pub fn summary(&self, scenario: &Scenario) -> SeparationSummary {
        let conflict = scenario.uavs.iter().map(|u| u.conflict_radius).fold(0.0, f64::max) * 2.0;
        let physical = scenario.uavs.iter().map(|u| u.physical_radius).fold(0.0, f64::max) * 2.0;
        separation_metrics(&self.separation, conflict, physical)
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    due: f64,
    seq: u64,
    receiver: usize,
    msg: RemoteIdMessage,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // min-heap on (due, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other.due.total_cmp(&self.due).then_with(|| other.seq.cmp(&self.seq))
    }
}

/// Upper bound on retry cycles simulated for one message in protocol mode.
const MAX_RETRY_CYCLES: u32 = 64;

/// Runs the scenario to completion.
pub fn run_scenario(scenario: &Scenario) -> Result<RunResult, ScenarioError> {
    scenario.validate()?;
    let m = scenario.uavs.len();
    let mut delay_rng = substream(scenario.seed, "delay", 0);
    let mut states = scenario.uavs.clone();
    let mut trajectories = scenario.trajectories.clone();
    let mut tracks = vec![TrackTable::new(); m];
    let mut clear = vec![scenario.avoidance.n_noncollide; m];
    let mut queue = BinaryHeap::new();
    let mut seq = 0u64;

    let shadowing = match &scenario.delay {
        DelayMode::Protocol { budget, .. } => budget.sample_shadowing(m, &mut substream(scenario.seed, "shadowing", 0)),
        DelayMode::Sampled { .. } => Vec::new(),
    };

    let steps = (scenario.duration / scenario.dt).round() as usize;
    let gnss_every = ((scenario.gnss_period / scenario.dt).round() as usize).max(1);
    let decide_every = ((scenario.avoidance.t_orca / scenario.dt).round() as usize).max(1);
    let decision_dt = decide_every as f64 * scenario.dt;

    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let mut result = RunResult {
        positions: Vec::with_capacity(steps + 1),
        separation: SeparationTrace {
            times: Vec::with_capacity(steps + 1),
            pairs: pairs.clone(),
            distances: Vec::with_capacity(steps + 1),
        },
        deliveries: Vec::new(),
        mean_prediction_error: 0.0,
        relaxed_decisions: 0,
        final_track_error: Vec::new(),
    };
    let mut prediction_error = (0.0, 0usize);

    for step in 0..=steps {
        let t = step as f64 * scenario.dt;

        // log the state at t
        result.separation.times.push(t);
        result.positions.push(states.iter().map(|s| s.position).collect());
        result
            .separation
            .distances
            .push(pairs.iter().map(|&(a, b)| (states[a].position - states[b].position).norm()).collect());
        if step == steps {
            break;
        }

        // observe: broadcast
        if step % gnss_every == 0 {
            let fleet = match &scenario.delay {
                DelayMode::Protocol { radios, budget, .. } => Some(
                    Fleet::new(states.iter().map(|s| s.position).collect(), radios.clone(), shadowing.clone(), budget.clone())
                        .map_err(|_| ScenarioError::BadTiming("radio list does not match the fleet"))?,
                ),
                DelayMode::Sampled { .. } => None,
            };
            for sender in 0..m {
                let msg = RemoteIdMessage {
                    sender_id: states[sender].id,
                    position: states[sender].position,
                    velocity: states[sender].velocity,
                    timestamp: t,
                };
                for receiver in 0..m {
                    if receiver == sender {
                        continue;
                    }
                    let delay = match (&scenario.delay, &fleet) {
                        (DelayMode::Sampled { lo, hi }, _) => Some(if hi > lo { delay_rng.random_range(*lo..=*hi) } else { *lo }),
                        (DelayMode::Protocol { model, .. }, Some(fleet)) => sample_protocol_delay(model, fleet, sender, receiver, &mut delay_rng),
                        _ => None,
                    };
                    result.deliveries.push(DeliveryRecord {
                        sent: t,
                        sender,
                        receiver,
                        delay,
                    });
                    if let Some(d) = delay {
                        seq += 1;
                        queue.push(Pending {
                            due: t + d,
                            seq,
                            receiver,
                            msg,
                        });
                    }
                }
            }
        }

        // deliver everything due by now
        while let Some(top) = queue.peek() {
            if top.due > t + 1e-9 {
                break;
            }
            let p = queue.pop().expect("peeked");
            tracks[p.receiver].update(p.msg, p.due);
        }

        // orient + decide
        if step % decide_every == 0 {
            let snapshot = states.clone();
            for i in 0..m {
                tracks[i].evict_older_than(t, scenario.track_max_age);
                let me = snapshot[i];
                let neighbours: Vec<UavState> = tracks[i]
                    .iter()
                    .filter_map(|track| {
                        let (position, velocity) = track.predict(t).ok()?;
                        let other = snapshot.iter().find(|s| s.id == track.last_message.sender_id)?;
                        prediction_error.0 += (position - other.position).norm();
                        prediction_error.1 += 1;
                        Some(UavState {
                            position,
                            velocity,
                            ..*other
                        })
                    })
                    .collect();

                let in_conflict = neighbours
                    .iter()
                    .map(|other| orca_halfspace_seeded(&me, other, &me.velocity, &scenario.avoidance).map(|h| h.is_some()))
                    .collect::<Result<Vec<bool>, OrcaError>>()?
                    .into_iter()
                    .any(|c| c);
                let velocity = if in_conflict {
                    clear[i] = 0;
                    let planes = constraints(&me, &neighbours, &me.velocity, &scenario.avoidance)?;
                    let sol = optimal_velocity(&me, &planes, &me.velocity);
                    result.relaxed_decisions += sol.relaxed as usize;
                    sol.velocity
                } else {
                    clear[i] = clear[i].saturating_add(1);
                    if clear[i] >= scenario.avoidance.n_noncollide {
                        let rec = recovery_velocity(&trajectories[i], &me.position, t, me.v_max);
                        trajectories[i].postpone(rec.slip * decision_dt);
                        let planes = constraints(&me, &neighbours, &me.velocity, &scenario.avoidance)?;
                        let sol = optimal_velocity(&me, &planes, &rec.velocity);
                        result.relaxed_decisions += sol.relaxed as usize;
                        sol.velocity
                    } else {
                        me.velocity
                    }
                };
                states[i].velocity = velocity;
            }
        }

        // integrate
        for s in states.iter_mut() {
            s.position += s.velocity * scenario.dt;
        }
    }

    result.mean_prediction_error = if prediction_error.1 > 0 {
        prediction_error.0 / prediction_error.1 as f64
    } else {
        0.0
    };
    result.final_track_error = states
        .iter()
        .zip(&trajectories)
        .map(|(s, traj)| (traj.position_at(scenario.duration) - s.position).norm())
        .collect();
    Ok(result)
}

/// ORCA planes against every neighbour that can matter within the time window.
fn constraints(me: &UavState, neighbours: &[UavState], seed: &Vec3, cfg: &AvoidanceConfig) -> Result<Vec<HalfSpace>, ScenarioError> {
    let mut out = Vec::new();
    for other in neighbours.iter().filter(|o| within_reach(me, o, cfg)) {
        out.push(orca_constraint(me, other, seed, cfg)?);
    }
    Ok(out)
}

fn sample_protocol_delay<R: Rng + ?Sized>(model: &DelayModel, fleet: &Fleet, sender: usize, receiver: usize, rng: &mut R) -> Option<f64> {
    let radio = fleet.radios[sender];
    if !fleet.in_range(sender, receiver, radio.protocol) {
        return None;
    }
    let probs = fleet.collision_survival(sender, receiver, &model.timing).ok()?;
    let table = model.table(radio.protocol, radio.rate, radio.wifi_channel)?;
    let t0 = rng.random_range(0..table.per_start.len());
    let slots = table.sample_delivery(t0, &probs, rng, MAX_RETRY_CYCLES)?;
    Some(slots as f64 * model.timing.slot_ms / 1000.0)
}
