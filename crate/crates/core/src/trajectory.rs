//! Planned trajectories and the velocity that steers a UAV back onto its plan.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orca::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("a trajectory needs at least two samples")]
    TooShort,
    #[error("sample times must be strictly increasing (index {0})")]
    NotIncreasing(usize),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("recovery interval must be positive")]
    BadInterval,
}

/// Piecewise-linear timed path with a schedule offset that grows when the UAV
/// falls behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedTrajectory {
    samples: Vec<(f64, Vec3)>,
    /// Seconds the whole timetable has been pushed back.
    pub delay: f64,
    /// Look-ahead time used when the UAV is at or behind its schedule point.
    pub recovery_interval: f64,
}

impl TimedTrajectory {
    pub fn new(samples: Vec<(f64, Vec3)>, recovery_interval: f64) -> Result<Self, TrajectoryError> {
        if samples.len() < 2 {
            return Err(TrajectoryError::TooShort);
        }
        for (k, (t, p)) in samples.iter().enumerate() {
            if !t.is_finite() || p.iter().any(|x| !x.is_finite()) {
                return Err(TrajectoryError::NonFinite(k));
            }
            if k > 0 && *t <= samples[k - 1].0 {
                return Err(TrajectoryError::NotIncreasing(k));
            }
        }
        if !(recovery_interval > 0.0) {
            return Err(TrajectoryError::BadInterval);
        }
        Ok(TimedTrajectory {
            samples,
            delay: 0.0,
            recovery_interval,
        })
    }

    /// Straight constant-speed leg from `from` to `to` over `[t_start, t_end]`.
    pub fn straight(from: Vec3, to: Vec3, t_start: f64, t_end: f64, recovery_interval: f64) -> Result<Self, TrajectoryError> {
        TimedTrajectory::new(vec![(t_start, from), (t_end, to)], recovery_interval)
    }

    pub fn samples(&self) -> &[(f64, Vec3)] {
        &self.samples
    }

    /// Scheduled end time including the accumulated delay.
    pub fn end_time(&self) -> f64 {
        self.samples.last().expect("at least two samples").0 + self.delay
    }

    pub fn start_time(&self) -> f64 {
        self.samples[0].0 + self.delay
    }

    pub fn final_position(&self) -> Vec3 {
        self.samples.last().expect("at least two samples").1
    }

    /// Planned position at time `t`, clamped to the end points.
    pub fn position_at(&self, t: f64) -> Vec3 {
        let local = t - self.delay;
        let first = &self.samples[0];
        if local <= first.0 {
            return first.1;
        }
        for pair in self.samples.windows(2) {
            let (t0, p0) = pair[0];
            let (t1, p1) = pair[1];
            if local <= t1 {
                let s = (local - t0) / (t1 - t0);
                return p0 + (p1 - p0) * s;
            }
        }
        self.final_position()
    }

    /// Closest point of the path to `p` and its (delayed) schedule time.
    /// Ties go to the earliest time.
    pub fn nearest_point(&self, p: &Vec3) -> (Vec3, f64) {
        let mut best = (self.samples[0].1, self.samples[0].0, (self.samples[0].1 - p).norm_squared());
        for pair in self.samples.windows(2) {
            let (t0, p0) = pair[0];
            let (t1, p1) = pair[1];
            let seg = p1 - p0;
            let len_sq = seg.norm_squared();
            let s = if len_sq > 0.0 { ((p - p0).dot(&seg) / len_sq).clamp(0.0, 1.0) } else { 0.0 };
            let q = p0 + seg * s;
            let d = (q - p).norm_squared();
            if d < best.2 {
                best = (q, t0 + (t1 - t0) * s, d);
            }
        }
        (best.0, best.1 + self.delay)
    }

    /// Pushes the remaining timetable back by `seconds`.
    pub fn postpone(&mut self, seconds: f64) {
        if seconds > 0.0 {
            self.delay += seconds;
        }
    }
}

/// Output of [`recovery_velocity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Recovery {
    pub velocity: Vec3,
    /// Fraction of the requested speed lost to the `v_max` clamp. Flying one
    /// decision period `dt` at the clamped speed leaves the UAV `dt * slip`
    /// seconds behind its plan.
    pub slip: f64,
    /// The schedule has ended; the UAV heads for the final waypoint.
    pub terminal: bool,
}

/// Minimum lead of the nearest path point over the clock for the "ahead of
/// the plan" branch; below this the UAV counts as on schedule.
const AHEAD_EPS: f64 = 1e-6;

/// Velocity bringing a UAV at `position` back to `traj` at time `t`.
///
/// If the nearest path point is scheduled later than `t`, aim to be there on
/// time. Otherwise aim at the planned position one recovery interval ahead
/// (or at the end of the schedule if that comes first), which reproduces the
/// planned velocity when the UAV is on track. The result is clamped to `v_max`.
pub fn recovery_velocity(traj: &TimedTrajectory, position: &Vec3, t: f64, v_max: f64) -> Recovery {
    let horizon = traj.recovery_interval;
    if t >= traj.end_time() {
        let desired = (traj.final_position() - position) / horizon;
        return clamp(desired, v_max, true);
    }
    let (nearest, t_nearest) = traj.nearest_point(position);
    let desired = if t_nearest > t + AHEAD_EPS {
        (nearest - position) / (t_nearest - t)
    } else {
        // never look past the end of the schedule
        let h = horizon.min(traj.end_time() - t);
        (traj.position_at(t + h) - position) / h
    };
    clamp(desired, v_max, false)
}

fn clamp(desired: Vec3, v_max: f64, terminal: bool) -> Recovery {
    let speed = desired.norm();
    if speed > v_max {
        Recovery {
            velocity: desired * (v_max / speed),
            slip: 1.0 - v_max / speed,
            terminal,
        }
    } else {
        Recovery {
            velocity: desired,
            slip: 0.0,
            terminal,
        }
    }
}
