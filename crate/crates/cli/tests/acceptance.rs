//! Acceptance suite: one test per headline criterion, each printing a single
//! PASS/FAIL line with the measured values and the pinned tolerance.
//!
//! Run with `cargo test --release -p ridsim-cli --test acceptance`.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use ridsim::dmuca::{run_scenario, CannedScenario, DelayMode};
use ridsim::madqn::{self, baseline_policy, BaselineKind, Policy, TrainConfig};
use ridsim::orca::AvoidanceConfig;
use ridsim::sim_env::{Action, Env, EnvConfig};
use ridsim::sweep::{median, run_sweep, summarize, CellStats, SweepConfig};
use ridsim::timing::Protocol;
use support::{
    converging_encounter, crt_mismatches, gradient_check, link_average_mc_error, projection_instance, start_slot_mc_error,
    ProjectionCheck,
};

/// Writes past the test harness's output capture so every line shows up.
fn report(name: &str, pass: bool, detail: &str) -> bool {
    let line = format!("ACCEPTANCE {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut err = std::io::stderr().lock();
    err.write_all(line.as_bytes()).unwrap();
    err.flush().unwrap();
    pass
}

const SMALL_AREAS: [f64; 3] = [100.0, 500.0, 1000.0];
const LARGE_AREAS: [f64; 3] = [3000.0, 5000.0, 10000.0];

#[test]
fn crt_match_sets_equal_the_slot_walk() {
    let started = Instant::now();
    let cases = 150;
    let counts: Vec<(Protocol, usize)> = [(Protocol::Ble4, 101), (Protocol::Ble5, 102), (Protocol::Wifi, 103)]
        .into_iter()
        .map(|(p, seed)| (p, crt_mismatches(p, seed, cases)))
        .collect();
    let secs = started.elapsed().as_secs_f64();
    let pass = counts.iter().all(|(_, n)| *n == 0) && secs < 60.0;
    let detail = format!("{cases} cases per protocol, mismatches {counts:?} (need 0), {secs:.1} s (limit 60 s)");
    assert!(report("crt-oracle", pass, &detail), "{detail}");
}

#[test]
fn expected_delay_matches_monte_carlo() {
    let started = Instant::now();
    let (instances, trials) = (10, 1_000_000);
    let mut worst = Vec::new();
    for p in Protocol::ALL {
        let slot = start_slot_mc_error(p, 201, instances, trials);
        let link = link_average_mc_error(p, 202, instances, trials);
        worst.push((p, slot.max(link)));
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = worst.iter().all(|(_, e)| *e < 0.01) && secs < 600.0;
    let detail = format!(
        "{instances} instances x {trials} trials per protocol, worst relative error {:?} (limit 0.01), {secs:.0} s (limit 600 s)",
        worst.iter().map(|(p, e)| format!("{p} {e:.4}")).collect::<Vec<_>>()
    );
    assert!(report("delay-monte-carlo", pass, &detail), "{detail}");
}

/// Median delay per (protocol, rate, area) from the default ten-seed sweep.
/// Computed once and shared by the tests that read it.
fn default_sweep() -> &'static (Vec<CellStats>, f64) {
    static SWEEP: OnceLock<(Vec<CellStats>, f64)> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let started = Instant::now();
        let stats = summarize(&run_sweep(&SweepConfig::default()).unwrap());
        (stats, started.elapsed().as_secs_f64())
    })
}

fn curve(stats: &[CellStats], protocol: Protocol, area: f64) -> Vec<f64> {
    let mut cells: Vec<&CellStats> = stats.iter().filter(|s| s.protocol == protocol && s.area == area).collect();
    cells.sort_by_key(|s| s.rate);
    cells.iter().map(|s| s.median_delay_ms).collect()
}

/// Rates at which the delay is higher than at the next lower rate.
fn rises(values: &[f64]) -> Vec<u32> {
    (1..values.len()).filter(|&i| values[i] > values[i - 1]).map(|i| i as u32 + 1).collect()
}

#[test]
fn delay_curves_spike_at_the_target_rates() {
    let (stats, _) = default_sweep();
    let stats = stats.as_slice();
    let expected: [(Protocol, &[u32]); 3] = [(Protocol::Ble4, &[5, 10]), (Protocol::Wifi, &[4, 7, 8]), (Protocol::Ble5, &[])];
    let mut wrong = Vec::new();
    let mut checked = 0;
    for (p, want) in expected {
        for area in SMALL_AREAS.iter().chain(&LARGE_AREAS) {
            let c = curve(stats, p, *area);
            if c.iter().all(|v| *v == 0.0) {
                continue; // nobody in range at this size
            }
            checked += 1;
            let got = rises(&c);
            if got != want {
                wrong.push(format!("{p}@{area}: rises {got:?} want {want:?}"));
            }
        }
    }
    let pass = wrong.is_empty() && checked > 0;
    let detail = format!("{checked} curves checked, mismatches: {}", if wrong.is_empty() { "none".into() } else { wrong.join("; ") });
    assert!(report("delay-curve-shape", pass, &detail), "{detail}");
}

#[test]
fn best_protocol_depends_on_density() {
    let (stats, secs) = default_sweep();
    let (stats, secs) = (stats.as_slice(), *secs);
    let at = |p: Protocol, rate: u32, area: f64| curve(stats, p, area)[rate as usize - 1];
    let mut wrong = Vec::new();
    let mut rows = Vec::new();
    for area in SMALL_AREAS {
        let (w, b4, b5) = (at(Protocol::Wifi, 10, area), at(Protocol::Ble4, 9, area), at(Protocol::Ble5, 10, area));
        rows.push(format!("{area}: WIFI10 {w:.1} BLE4_9 {b4:.1} BLE5_10 {b5:.1}"));
        if !(w < b4 && b4 < b5) {
            wrong.push(area);
        }
    }
    for area in LARGE_AREAS {
        let (w, b4, b5) = (at(Protocol::Wifi, 10, area), at(Protocol::Ble4, 9, area), at(Protocol::Ble5, 10, area));
        rows.push(format!("{area}: WIFI10 {w:.1} BLE4_9 {b4:.1} BLE5_10 {b5:.1}"));
        if !(b4 < w && b4 < b5) {
            wrong.push(area);
        }
    }
    let pass = wrong.is_empty() && secs < 1200.0;
    let detail = format!("medians over 10 seeds, ms [{}], out of order at {wrong:?}, {secs:.0} s (limit 1200 s)", rows.join("; "));
    assert!(report("density-ordering", pass, &detail), "{detail}");
}

#[test]
fn packet_loss_trends_follow_density() {
    let cfg = SweepConfig {
        modes: vec![
            Action { protocol: Protocol::Ble4, rate: 9 },
            Action { protocol: Protocol::Ble5, rate: 10 },
            Action { protocol: Protocol::Wifi, rate: 10 },
        ],
        seeds: 500,
        ..SweepConfig::default()
    };
    let stats = summarize(&run_sweep(&cfg).unwrap());
    let loss = |p: Protocol| -> Vec<f64> {
        let mut cells: Vec<&CellStats> = stats.iter().filter(|s| s.protocol == p).collect();
        cells.sort_by(|a, b| a.area.total_cmp(&b.area));
        cells.iter().map(|s| s.loss_rate).collect()
    };
    let ble4 = loss(Protocol::Ble4);
    let decreasing = ble4.windows(2).all(|w| w[1] < w[0]);
    let spread = |v: &[f64]| v[..3].iter().cloned().fold(f64::MIN, f64::max) - v[..3].iter().cloned().fold(f64::MAX, f64::min);
    let (b5, wifi) = (loss(Protocol::Ble5), loss(Protocol::Wifi));
    let flat = spread(&b5) <= 0.02 && spread(&wifi) <= 0.02;
    let pct = |v: &[f64]| v.iter().map(|x| format!("{:.2}", 100.0 * x)).collect::<Vec<_>>().join(" ");
    let detail = format!(
        "500 seeds; loss % over areas 100..10000: BLE4 [{}] (strictly decreasing: {decreasing}); BLE5 [{}] spread {:.2} pp; WIFI [{}] spread {:.2} pp (limit 2 pp)",
        pct(&ble4),
        pct(&b5),
        100.0 * spread(&b5),
        pct(&wifi),
        100.0 * spread(&wifi)
    );
    assert!(report("packet-loss-trends", decreasing && flat, &detail), "{detail}");
}

#[test]
fn closed_loop_safety_degrades_with_delay() {
    let started = Instant::now();
    let canned = CannedScenario::default();
    let minima = |lo: f64, hi: f64| -> Vec<f64> {
        (0..20)
            .map(|seed| {
                let sc = canned.scenario(DelayMode::Sampled { lo, hi }, AvoidanceConfig::default(), seed).unwrap();
                run_scenario(&sc).unwrap().summary(&sc).min_distance
            })
            .collect()
    };
    let fast = minima(0.0, 1.0);
    let middle = minima(1.0, 2.0);
    let slow = minima(2.0, 3.0);
    let fast_clear = fast.iter().filter(|d| **d > 10.0).count();
    let slow_below = slow.iter().filter(|d| **d < 10.0).count();
    let lowest = fast.iter().chain(&middle).chain(&slow).cloned().fold(f64::INFINITY, f64::min);
    let secs = started.elapsed().as_secs_f64();
    let pass = fast_clear == 20 && slow_below >= 10 && lowest > 2.0 && secs < 600.0;
    let range = |v: &[f64]| format!("{:.2}..{:.2}", v.iter().cloned().fold(f64::INFINITY, f64::min), v.iter().cloned().fold(0.0, f64::max));
    let detail = format!(
        "20 seeds; U[0,1]: {fast_clear}/20 above 10 m (need 20), minima {}; U[2,3]: {slow_below}/20 below 10 m (need >= 10), minima {}; lowest of all regimes {lowest:.2} m (need > 2); {secs:.0} s (limit 600 s)",
        range(&fast),
        range(&slow)
    );
    assert!(report("dmuca-safety", pass, &detail), "{detail}");
}

#[test]
fn orca_keeps_clearance_and_solves_exactly() {
    let violations = (0..1000).filter(|&s| {
        let e = converging_encounter(s);
        e.min_distance < e.physical_sum
    });
    let violations = violations.count();
    let step = 0.1;
    let resolution = step * 3f64.sqrt();
    let (mut agree, mut disagree) = (0, 0);
    let mut worst_gap: f64 = 0.0;
    for seed in 0..200 {
        match projection_instance(seed, step) {
            ProjectionCheck::Agree { gap, violation, speed_excess } => {
                worst_gap = worst_gap.max(-gap);
                if gap <= 1e-6 && gap >= -resolution && violation <= 1e-9 && speed_excess <= 1e-12 {
                    agree += 1;
                } else {
                    disagree += 1;
                }
            }
            ProjectionCheck::BothInfeasible => agree += 1,
            ProjectionCheck::Disagree => disagree += 1,
        }
    }
    let pass = violations == 0 && disagree == 0;
    let detail = format!(
        "1000 encounters, {violations} physical violations (need 0); projection vs grid sampler {agree}/200 agree, worst gap {worst_gap:.3} m/s (resolution {resolution:.3})"
    );
    assert!(report("orca-suite", pass, &detail), "{detail}");
}

/// Median over the evaluation seeds of the mean fleet delay of `policy`.
fn median_delay(env_cfg: &EnvConfig, policy: &Policy) -> f64 {
    let delays: Vec<f64> = (1000..1005)
        .map(|seed| {
            let mut env = Env::new(env_cfg.clone(), seed).unwrap();
            madqn::evaluate(&mut env, policy, 20, 20, seed).unwrap().mean_delay_ms
        })
        .collect();
    median(&delays)
}

/// Trains on `areas` and returns the learned median and every fixed policy's median.
fn learned_vs_fixed(areas: Vec<f64>) -> (f64, BTreeMap<String, f64>, f64) {
    let started = Instant::now();
    let env_cfg = EnvConfig::desk_scale(areas);
    let cfg = TrainConfig::desk_scale();
    let mut env = Env::new(env_cfg.clone(), 1).unwrap();
    let (agents, _) = madqn::train(&mut env, &cfg, 1).unwrap();
    let learned = median_delay(&env_cfg, &Policy::Learned(agents.into_iter().map(|a| a.online).collect()));
    let fixed = (0..Action::space_size(env_cfg.psi_max))
        .map(|i| {
            let a = Action::from_index(i, env_cfg.psi_max).unwrap();
            let p = baseline_policy(BaselineKind::Fixed { protocol: a.protocol, rate: a.rate }, env_cfg.psi_max).unwrap();
            (p.label(), median_delay(&env_cfg, &p))
        })
        .collect();
    (learned, fixed, started.elapsed().as_secs_f64())
}

fn best(fixed: &BTreeMap<String, f64>) -> (&String, f64) {
    fixed.iter().map(|(k, v)| (k, *v)).min_by(|a, b| a.1.total_cmp(&b.1)).unwrap()
}

#[test]
fn learning_matches_best_fixed_policy_in_a_static_regime() {
    let (learned, fixed, secs) = learned_vs_fixed(vec![100.0]);
    let (name, best_delay) = best(&fixed);
    let ratio = learned / best_delay;
    let pass = ratio <= 1.10 && secs < 3600.0;
    let detail = format!(
        "5 UAVs, psi_max 5, 300 episodes, 100 m area: learned {learned:.1} ms vs best fixed {name} {best_delay:.1} ms, ratio {ratio:.3} (limit 1.10), {secs:.0} s"
    );
    assert!(report("learning-static", pass, &detail), "{detail}");
}

#[test]
fn learning_beats_every_fixed_policy_when_density_varies() {
    let (learned, fixed, secs) = learned_vs_fixed(vec![100.0, 500.0, 1000.0, 3000.0, 5000.0, 10000.0]);
    let (name, best_delay) = best(&fixed);
    let ratio = learned / best_delay;
    let pass = ratio <= 0.95 && secs < 3600.0;
    let detail = format!(
        "5 UAVs, psi_max 5, 300 episodes, six areas: learned {learned:.1} ms vs best fixed {name} {best_delay:.1} ms, ratio {ratio:.3} (limit 0.95), {secs:.0} s"
    );
    assert!(report("learning-dynamic", pass, &detail), "{detail}");
}

#[test]
fn network_gradients_match_finite_differences() {
    let worst: Vec<f64> = (100..110).map(gradient_check).collect();
    let max = worst.iter().cloned().fold(0.0, f64::max);
    let pass = max <= 1e-4;
    let detail = format!("10 networks, worst relative error {max:.2e} (limit 1e-4)");
    assert!(report("gradient-check", pass, &detail), "{detail}");
}

fn ridsim(args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_ridsim"))
        .args(args)
        .env_remove("RIDSIM_OUTPUT_DIR")
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

/// Every output listed in the manifest except the manifest itself, as bytes.
fn outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    manifest["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| {
            let f = f.as_str().unwrap().to_string();
            let bytes = std::fs::read(dir.join(&f)).unwrap();
            (f, bytes)
        })
        .collect()
}

#[test]
fn every_command_reruns_byte_identically() {
    let tmp = tempfile::TempDir::new().unwrap();
    let d = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();
    let toy = [
        "-s", "train.env.fleet_size=3", "-s", "train.env.psi_max=3", "-s", "train.env.areas=[200.0, 2000.0]",
        "-s", "train.agent.episodes=3", "-s", "train.agent.steps_per_episode=5", "-s", "train.agent.hidden=[8]",
        "-s", "train.agent.batch_size=4", "-s", "train.agent.buffer_capacity=100", "-s", "train.agent.warmup_transitions=4",
        "-s", "evaluate.seeds=[7, 8]", "-s", "evaluate.episodes=2", "-s", "evaluate.steps=3",
    ];
    let checkpoint = format!("{}/checkpoint.ridq", d("train"));
    let runs: Vec<(&str, Vec<&str>)> = vec![
        ("delay-sweep", vec!["-s", "delay_sweep.seeds=2", "-s", "delay_sweep.areas=[500.0, 3000.0]", "-s", "output.link_tables=true"]),
        ("packet-loss", vec!["-s", "packet_loss.seeds=3"]),
        ("dmuca", vec!["-s", "dmuca.seeds=2"]),
        ("train", toy.to_vec()),
        ("evaluate", [&["--checkpoint", checkpoint.as_str()][..], &toy[..]].concat()),
    ];
    let mut differing = Vec::new();
    let mut files = 0;
    for (command, extra) in &runs {
        let first = d(command);
        let again = d(&format!("{command}-rerun"));
        let mut args = vec![*command, "-o", first.as_str()];
        args.extend(extra);
        ridsim(&args);
        ridsim(&["rerun", &format!("{first}/manifest.json"), "-o", again.as_str()]);
        let (a, b) = (outputs(Path::new(&first)), outputs(Path::new(&again)));
        files += a.len();
        if a.is_empty() || a != b {
            differing.push(*command);
        }
    }
    let pass = differing.is_empty();
    let detail = format!("{} commands, {files} output files compared byte for byte, differing: {differing:?}", runs.len());
    assert!(report("determinism", pass, &detail), "{detail}");
}
