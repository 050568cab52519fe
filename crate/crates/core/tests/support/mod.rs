//! Generators and independent oracles shared by the integration tests and the
//! acceptance suite.
#![allow(dead_code)]

use nalgebra::{DMatrix, Vector3};
use rand::Rng;
use ridsim::dmuca::{run_scenario, DelayMode, Scenario};
use ridsim::expected_delay::{DelayModel, LinkDelay, ScheduleTable, UndeliverablePolicy};
use ridsim::madqn::Mlp;
use ridsim::interference::{Fleet, LinkBudget, ProbabilityBundle, RadioConfig};
use ridsim::orca::{optimal_velocity, AvoidanceConfig, HalfSpace, UavState, Vec3};
use ridsim::rng::substream;
use ridsim::timing::{
    ble_match_slots, timeline_oracle, wifi_match_slots, OracleInterval, OracleOptions, OracleSchedule, Protocol,
    TimingConfig, WifiChannel,
};
use ridsim::trajectory::TimedTrajectory;

// ---- match sets ----

pub fn coprime_oracle() -> OracleOptions {
    OracleOptions {
        interval: OracleInterval::Coprime,
        jitter_seed: None,
    }
}

/// Multiples of the default slot so every duration sits on the grid.
fn slots_ms<R: Rng>(rng: &mut R, lo: u32, hi: u32) -> f64 {
    rng.random_range(lo..=hi) as f64 * 0.125
}

pub fn random_ble_config<R: Rng>(rng: &mut R) -> TimingConfig {
    let scan_interval = rng.random_range(8..=96);
    TimingConfig {
        gnss_period_ms: slots_ms(rng, 800, 8000),
        ble4_pdu_ms: slots_ms(rng, 1, 6),
        ble5_pdu_ms: slots_ms(rng, 4, 12),
        pdu_gap_ms: slots_ms(rng, 0, 2),
        scan_interval_ms: scan_interval as f64 * 0.125,
        scan_window_ms: slots_ms(rng, 1, scan_interval),
        ..TimingConfig::default()
    }
}

pub fn random_wifi_config<R: Rng>(rng: &mut R) -> TimingConfig {
    TimingConfig {
        gnss_period_ms: slots_ms(rng, 800, 8000),
        beacon_ms: slots_ms(rng, 1, 8),
        wifi_dwell_ms: slots_ms(rng, 2, 80),
        wifi_switch_ms: slots_ms(rng, 0, 16),
        ..TimingConfig::default()
    }
}

/// Random (config, rate, t0) cases whose CRT match sets differ from the slot walk.
pub fn crt_mismatches(protocol: Protocol, seed: u64, cases: usize) -> usize {
    let mut rng = substream(seed, "crt_oracle", protocol.index() as u64);
    let mut bad = 0;
    for case in 0..cases {
        let rate = rng.random_range(1..=10);
        let (crt, walked) = match protocol {
            Protocol::Wifi => {
                let slots = random_wifi_config(&mut rng).wifi(rate).unwrap();
                let t0 = rng.random_range(0..slots.supercycle());
                let channel = WifiChannel::ALL[case % 3];
                (
                    wifi_match_slots(t0, channel, &slots).unwrap(),
                    timeline_oracle(t0, &OracleSchedule::Wifi(slots, channel), &coprime_oracle()),
                )
            }
            _ => {
                let slots = random_ble_config(&mut rng).ble(protocol, rate).unwrap();
                let t0 = rng.random_range(0..slots.supercycle());
                (
                    ble_match_slots(t0, &slots).unwrap(),
                    timeline_oracle(t0, &OracleSchedule::Ble(slots), &coprime_oracle()),
                )
            }
        };
        if crt != walked {
            eprintln!("{protocol} case {case}: crt {:?} walk {:?}", crt.channels, walked.channels);
            bad += 1;
        }
    }
    bad
}

// ---- expected delay ----

pub const PENALTY_MS: f64 = 1000.0;

/// One cycle's retry structure rebuilt from the slot walk.
pub enum Cycle {
    /// Reception delays of every matching packet, ascending.
    Attempts(Vec<u64>),
    /// `(matched pointers, auxiliary delay)` for each advertising event.
    Events(Vec<(u32, u64)>),
}

pub fn walked_cycle(timing: &TimingConfig, protocol: Protocol, rate: u32, channel: WifiChannel, t0: u64) -> Cycle {
    let opts = coprime_oracle();
    match protocol {
        Protocol::Wifi => {
            let cfg = timing.wifi(rate).unwrap();
            let set = timeline_oracle(t0, &OracleSchedule::Wifi(cfg.clone(), channel), &opts);
            Cycle::Attempts(set.union().iter().map(|s| s - t0 + cfg.beacon).collect())
        }
        Protocol::Ble4 => {
            let cfg = timing.ble4(rate).unwrap();
            let set = timeline_oracle(t0, &OracleSchedule::Ble(cfg.clone()), &opts);
            Cycle::Attempts(set.union().iter().map(|s| s - t0 + cfg.pdu).collect())
        }
        Protocol::Ble5 => {
            let cfg = timing.ble5(rate).unwrap();
            let set = timeline_oracle(t0, &OracleSchedule::Ble(cfg.clone()), &opts);
            let slot = |ms: f64| (ms / timing.slot_ms).floor() as u64;
            let fixed = slot(timing.aux_offset_ms) + slot(timing.aux_uncertainty_ms) + slot(timing.aux_packet_ms);
            let events = (0..rate as u64)
                .map(|k| {
                    let lo = t0 + k * cfg.adv_interval_hat;
                    let hi = lo + cfg.adv_interval_hat;
                    let n = set.union().iter().filter(|&&s| s >= lo && s < hi).count() as u32;
                    (n, k * cfg.adv_interval + fixed)
                })
                .collect();
            Cycle::Events(events)
        }
    }
}

pub fn deliverable(cycle: &Cycle, probs: &ProbabilityBundle) -> bool {
    match cycle {
        Cycle::Attempts(d) => !d.is_empty() && probs.primary() > 0.0,
        Cycle::Events(e) => e.iter().any(|&(n, _)| n > 0) && probs.primary() > 0.0 && probs.secondary() > 0.0,
    }
}

/// Plays cycles until one packet gets through.
pub fn simulate_once<R: Rng>(cycle: &Cycle, probs: &ProbabilityBundle, gnss: u64, rng: &mut R) -> u64 {
    let mut k = 0;
    loop {
        match cycle {
            Cycle::Attempts(delays) => {
                for &d in delays {
                    if rng.random::<f64>() < probs.primary() {
                        return d + k * gnss;
                    }
                }
            }
            Cycle::Events(events) => {
                for &(n, d) in events {
                    let mut pointer = false;
                    for _ in 0..n {
                        pointer |= rng.random::<f64>() < probs.primary();
                    }
                    if pointer && rng.random::<f64>() < probs.secondary() {
                        return d + k * gnss;
                    }
                }
            }
        }
        k += 1;
    }
}

pub fn random_probs<R: Rng>(protocol: Protocol, rng: &mut R) -> ProbabilityBundle {
    let mut p = ProbabilityBundle::clear(protocol);
    p.sti = rng.random_range(0.4..=1.0);
    p.cti = rng.random_range(0.6..=1.0);
    if protocol == Protocol::Ble5 {
        p.secondary_sti = rng.random_range(0.5..=1.0);
        p.secondary_cti = rng.random_range(0.7..=1.0);
    }
    p
}

pub fn relative_error(analytic: f64, sampled: f64) -> f64 {
    (analytic - sampled).abs() / sampled.abs().max(1e-12)
}

/// Largest relative error between the closed-form delay at one start slot and
/// a `trials`-draw simulation, over `instances` random deliverable cases.
pub fn start_slot_mc_error(protocol: Protocol, seed: u64, instances: usize, trials: usize) -> f64 {
    let timing = TimingConfig::default();
    let mut rng = substream(seed, "mc_per_start", protocol.index() as u64);
    let mut worst: f64 = 0.0;
    let mut found = 0;
    while found < instances {
        let rate = rng.random_range(1..=10);
        let channel = WifiChannel::ALL[rng.random_range(0..3)];
        let t0 = rng.random_range(0..timing.supercycle(protocol).unwrap());
        let cycle = walked_cycle(&timing, protocol, rate, channel, t0);
        let probs = random_probs(protocol, &mut rng);
        if !deliverable(&cycle, &probs) {
            continue;
        }
        let table = ScheduleTable::build(&timing, protocol, rate, channel).unwrap();
        let analytic = match table.evaluate(t0 as usize, &probs).0 {
            LinkDelay::Delivered(d) => d,
            LinkDelay::Undeliverable => return f64::INFINITY,
        };
        let total: f64 = (0..trials).map(|_| simulate_once(&cycle, &probs, table.gnss, &mut rng) as f64).sum();
        worst = worst.max(relative_error(analytic, total / trials as f64));
        found += 1;
    }
    worst
}

/// Sender 0 and receiver 1 plus two interferers at random spots within 150 m.
pub fn random_link_fleet<R: Rng>(protocol: Protocol, rng: &mut R) -> Fleet {
    let mut positions = Vec::new();
    let mut radios = Vec::new();
    for k in 0..4 {
        positions.push(Vector3::new(rng.random_range(0.0..150.0), rng.random_range(0.0..150.0), 50.0));
        let p = if k < 2 { protocol } else { Protocol::ALL[rng.random_range(0..3)] };
        let channel = WifiChannel::ALL[rng.random_range(0..3)];
        radios.push(RadioConfig::new(p, rng.random_range(1..=10)).with_channel(channel));
    }
    Fleet::unshadowed(positions, radios, LinkBudget::default()).unwrap()
}

/// Largest relative error between the start-slot-averaged link delay and a
/// simulation that also draws the start slot.
pub fn link_average_mc_error(protocol: Protocol, seed: u64, instances: usize, trials: usize) -> f64 {
    let timing = TimingConfig::default();
    let model = DelayModel::new(timing.clone(), 10, UndeliverablePolicy::Penalty(PENALTY_MS)).unwrap();
    let mut rng = substream(seed, "mc_link", protocol.index() as u64);
    let supercycle = timing.supercycle(protocol).unwrap();
    let gnss = timing.gnss_slots().unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let fleet = random_link_fleet(protocol, &mut rng);
        let summary = model.average_link_delay(&fleet, 0, 1).unwrap();
        let probs = fleet.collision_survival(0, 1, &timing).unwrap();
        let radio = fleet.radios[0];
        let cycles: Vec<Cycle> = (0..supercycle)
            .map(|t0| walked_cycle(&timing, protocol, radio.rate, radio.wifi_channel, t0))
            .collect();
        let mut total = 0.0;
        for _ in 0..trials {
            let cycle = &cycles[rng.random_range(0..supercycle) as usize];
            total += if deliverable(cycle, &probs) {
                simulate_once(cycle, &probs, gnss, &mut rng) as f64 * timing.slot_ms
            } else {
                PENALTY_MS
            };
        }
        worst = worst.max(relative_error(summary.mean_delay_ms, total / trials as f64));
    }
    worst
}

// ---- avoidance ----

pub fn random_unit<R: Rng>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Outcome of one two-UAV encounter.
pub struct Encounter {
    pub min_distance: f64,
    pub physical_sum: f64,
    pub max_step: f64,
    pub step_bound: f64,
}

/// Two UAVs on straight plans that pass within their conflict radius of a
/// common point at the same time, flown in closed loop with zero message
/// delay and a state broadcast every decision period.
pub fn converging_encounter(seed: u64) -> Encounter {
    let mut rng = substream(seed, "encounter", 0);
    let v_max = rng.random_range(2.0..8.0);
    let physical = rng.random_range(0.5..2.0);
    let conflict = physical + rng.random_range(1.0..5.0);
    let centre = Vec3::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0), rng.random_range(80.0..150.0));
    let meet = rng.random_range(15.0..40.0);
    let mut uavs = Vec::new();
    let mut trajectories = Vec::new();
    for id in 0..2 {
        let dir = random_unit(&mut rng);
        let speed = v_max * rng.random_range(0.5..1.0);
        let miss = random_unit(&mut rng) * rng.random_range(0.0..conflict);
        let aim = centre + miss * 0.5;
        let start = aim - dir * speed * meet;
        let end = aim + dir * speed * meet;
        trajectories.push(TimedTrajectory::straight(start, end, 0.0, 2.0 * meet, 10.0).unwrap());
        uavs.push(UavState {
            id,
            position: start,
            velocity: dir * speed,
            physical_radius: physical,
            conflict_radius: conflict,
            v_max,
        });
    }
    let avoidance = AvoidanceConfig::default();
    let mut scenario = Scenario::new(uavs, trajectories, DelayMode::Sampled { lo: 0.0, hi: 0.0 }, avoidance, 2.0 * meet + 20.0, seed).unwrap();
    scenario.gnss_period = avoidance.t_orca;
    let result = run_scenario(&scenario).unwrap();
    let min_distance = result.separation.distances.iter().map(|row| row[0]).fold(f64::INFINITY, f64::min);
    let max_step = result
        .positions
        .windows(2)
        .flat_map(|w| (0..2).map(move |k| (w[1][k] - w[0][k]).norm()))
        .fold(0.0, f64::max);
    Encounter {
        min_distance,
        physical_sum: 2.0 * physical,
        max_step,
        step_bound: v_max * scenario.dt,
    }
}

pub fn random_halfspaces<R: Rng>(rng: &mut R, count: usize, radius: f64) -> Vec<HalfSpace> {
    (0..count)
        .map(|_| HalfSpace {
            anchor: random_unit(rng) * rng.random_range(0.0..radius),
            normal: random_unit(rng),
        })
        .collect()
}

/// Points spaced `step` apart along `point + t * dir` inside the ball.
fn line_samples(point: &Vec3, dir: &Vec3, radius: f64, step: f64, out: &mut Vec<Vec3>) {
    let d = dir.normalize();
    // chord of the ball: |point + t d| = radius
    let b = point.dot(&d);
    let disc = b * b - point.norm_squared() + radius * radius;
    if disc < 0.0 {
        return;
    }
    let (lo, hi) = (-b - disc.sqrt(), -b + disc.sqrt());
    out.push(point + d * lo);
    out.push(point + d * hi);
    let mut t = lo;
    while t < hi {
        out.push(point + d * t);
        t += step;
    }
}

fn orthonormal_pair(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = n.cross(&helper).normalize();
    (e1, n.cross(&e1).normalize())
}

/// Candidate velocities at spacing `step` on every face the constrained
/// optimum can lie on: the ball interior, each plane, each pair of planes,
/// each triple, the sphere and each plane's circle on it.
fn face_samples(halfspaces: &[HalfSpace], radius: f64, step: f64) -> Vec<Vec3> {
    let mut out = Vec::new();
    let n = (radius / step).ceil() as i64;
    for i in -n..=n {
        for j in -n..=n {
            for k in -n..=n {
                out.push(Vec3::new(i as f64, j as f64, k as f64) * step);
            }
        }
    }
    // sphere, near-uniform spiral
    let count = (4.0 * std::f64::consts::PI * radius * radius / (step * step)).ceil() as usize;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for k in 0..count {
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * k as f64;
        out.push(Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius);
    }
    for h in halfspaces {
        let centre = h.normal * h.anchor.dot(&h.normal);
        let (e1, e2) = orthonormal_pair(&h.normal);
        for i in -n..=n {
            line_samples(&(centre + e1 * (i as f64 * step)), &e2, radius, step, &mut out);
        }
        // circle where the plane cuts the sphere
        let rho_sq = radius * radius - centre.norm_squared();
        if rho_sq > 0.0 {
            let rho = rho_sq.sqrt();
            let steps = ((std::f64::consts::TAU * rho / step).ceil() as usize).max(8);
            for k in 0..steps {
                let a = std::f64::consts::TAU * k as f64 / steps as f64;
                out.push(centre + (e1 * a.cos() + e2 * a.sin()) * rho);
            }
        }
    }
    for (x, a) in halfspaces.iter().enumerate() {
        for b in &halfspaces[x + 1..] {
            let dir = a.normal.cross(&b.normal);
            if dir.norm_squared() < 1e-12 {
                continue;
            }
            // point on both planes closest to the origin
            let (da, db) = (a.anchor.dot(&a.normal), b.anchor.dot(&b.normal));
            let point = (b.normal.cross(&dir) * da + dir.cross(&a.normal) * db) / dir.norm_squared();
            line_samples(&point, &dir, radius, step, &mut out);
            for c in halfspaces {
                let det = dir.dot(&c.normal);
                if det.abs() > 1e-9 {
                    let t = (c.anchor.dot(&c.normal) - point.dot(&c.normal)) / det;
                    out.push(point + dir * t);
                }
            }
        }
    }
    out
}

/// Feasible sample closest to `preferred`, if any sample is feasible.
pub fn grid_projection(halfspaces: &[HalfSpace], radius: f64, preferred: &Vec3, step: f64) -> Option<Vec3> {
    const TOL: f64 = 1e-9;
    face_samples(halfspaces, radius, step)
        .into_iter()
        .filter(|v| v.norm() <= radius + TOL && halfspaces.iter().all(|h| h.margin(v) >= -TOL))
        .min_by(|a, b| (a - preferred).norm().total_cmp(&(b - preferred).norm()))
}

/// Result of comparing the projection with the grid sampler on one instance.
pub enum ProjectionCheck {
    /// Feasible; objective gap and the largest constraint violation.
    Agree { gap: f64, violation: f64, speed_excess: f64 },
    /// Both report that nothing is feasible.
    BothInfeasible,
    /// The solver relaxed although the sampler found a feasible point.
    Disagree,
}

pub fn projection_instance(seed: u64, step: f64) -> ProjectionCheck {
    let mut rng = substream(seed, "projection", 0);
    let radius = 5.0;
    let count = rng.random_range(2..=4);
    let planes = random_halfspaces(&mut rng, count, radius);
    let preferred = random_unit(&mut rng) * rng.random_range(0.0..radius);
    let me = UavState {
        id: 0,
        position: Vec3::zeros(),
        velocity: Vec3::zeros(),
        physical_radius: 1.0,
        conflict_radius: 5.0,
        v_max: radius,
    };
    let sol = optimal_velocity(&me, &planes, &preferred);
    let sampled = grid_projection(&planes, radius, &preferred, step);
    match (sol.relaxed, sampled) {
        (true, None) => ProjectionCheck::BothInfeasible,
        (true, Some(_)) => ProjectionCheck::Disagree,
        (false, None) => ProjectionCheck::Agree {
            gap: 0.0,
            violation: planes.iter().map(|h| (-h.margin(&sol.velocity)).max(0.0)).fold(0.0, f64::max),
            speed_excess: (sol.velocity.norm() - radius).max(0.0),
        },
        (false, Some(v)) => ProjectionCheck::Agree {
            // the solver may beat the sampler by up to its spacing, never lose to it
            gap: (sol.velocity - preferred).norm() - (v - preferred).norm(),
            violation: planes.iter().map(|h| (-h.margin(&sol.velocity)).max(0.0)).fold(0.0, f64::max),
            speed_excess: (sol.velocity.norm() - radius).max(0.0),
        },
    }
}

// ---- networks ----

/// Plain-loop forward pass, independent of the matrix code.
pub fn forward_loops(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let last = net.weights.len() - 1;
    for (k, (w, b)) in net.weights.iter().zip(&net.biases).enumerate() {
        let mut z = vec![0.0; w.nrows()];
        for (i, zi) in z.iter_mut().enumerate() {
            let mut s = b[i];
            for (j, aj) in a.iter().enumerate() {
                s += w[(i, j)] * aj;
            }
            *zi = if k < last { s.max(0.0) } else { s };
        }
        a = z;
    }
    a
}

/// Mean squared error of the selected action values, from the loop forward pass.
pub fn batch_loss(net: &Mlp, x: &DMatrix<f64>, actions: &[usize], targets: &[f64]) -> f64 {
    let mut total = 0.0;
    for (c, (&a, &y)) in actions.iter().zip(targets).enumerate() {
        let col: Vec<f64> = x.column(c).iter().cloned().collect();
        let e = forward_loops(net, &col)[a] - y;
        total += e * e;
    }
    total / actions.len() as f64
}

/// Worst relative gap between the analytic gradient of a random small
/// network and central differences of the loop loss. Gradients below 1e-6
/// are compared on that absolute scale.
pub fn gradient_check(seed: u64) -> f64 {
    let mut rng = substream(seed, "gradcheck", 0);
    let hidden = rng.random_range(3..8);
    let net = Mlp::new(&[4, hidden, 5, 3], &mut rng);
    let n = 7;
    let x = DMatrix::from_fn(4, n, |_, _| rng.random_range(-1.0..1.0));
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let (loss, grads) = net.selected_mse_grad(&x, &actions, &targets);
    assert!((loss - batch_loss(&net, &x, &actions, &targets)).abs() < 1e-12, "loss differs from the loop forward pass");
    let analytic = grads.flat();
    let base = net.flat();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        let mut plus = net.clone();
        plus.set_flat(&p).unwrap();
        p[i] -= 2.0 * h;
        let mut minus = net.clone();
        minus.set_flat(&p).unwrap();
        let numeric = (batch_loss(&plus, &x, &actions, &targets) - batch_loss(&minus, &x, &actions, &targets)) / (2.0 * h);
        let scale = analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[i] - numeric).abs() / scale);
    }
    worst
}
