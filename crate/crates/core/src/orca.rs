//! Optimal reciprocal collision avoidance in three dimensions.
//!
//! The velocity obstacle of A induced by B is the set of relative velocities
//! that bring the two within their combined radius inside the time window
//! `tau`. When the current relative velocity lies inside it, A takes half of
//! the smallest correction `u` that leaves the obstacle and restricts its new
//! velocity to the half-space through `v_A + u/2` with the obstacle's outward
//! normal. The new velocity is the point of the intersection of those
//! half-spaces and the speed ball closest to the preferred velocity.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

const PARALLEL_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrcaError {
    #[error("non-finite input")]
    NonFinite,
    #[error("time window and radius must be positive")]
    NonPositive,
    #[error("relative velocity is outside the velocity obstacle")]
    OutsideObstacle,
    #[error("relative velocity lies on the obstacle axis; the exit direction is not unique")]
    Degenerate,
    #[error("the pair already overlaps its combined radius")]
    Colliding,
    #[error("a UAV cannot avoid itself (id {0})")]
    SameUav(usize),
}

/// Kinematic state of one UAV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub id: usize,
    pub position: Vec3,
    pub velocity: Vec3,
    pub physical_radius: f64,
    /// Radius used to build velocity obstacles.
    pub conflict_radius: f64,
    pub v_max: f64,
}

/// Linear velocity constraint `(v - anchor) · normal >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalfSpace {
    pub anchor: Vec3,
    pub normal: Vec3,
}

impl HalfSpace {
    /// Signed distance of `v` into the allowed side.
    pub fn margin(&self, v: &Vec3) -> f64 {
        (v - self.anchor).dot(&self.normal)
    }

    pub fn contains(&self, v: &Vec3, tolerance: f64) -> bool {
        self.margin(v) >= -tolerance
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvoidanceConfig {
    /// Velocity-obstacle time window, seconds.
    pub tau: f64,
    /// Decision period, seconds.
    pub t_orca: f64,
    /// Conflict-free decision cycles required before returning to the plan.
    pub n_noncollide: u32,
}

impl Default for AvoidanceConfig {
    fn default() -> Self {
        AvoidanceConfig {
            tau: 10.0,
            t_orca: 0.1,
            n_noncollide: 10,
        }
    }
}

fn finite(v: &Vec3) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Whether some `t` in `[0, tau]` has `|v t - p| <= r`.
pub fn vo_contains(rel_position: &Vec3, rel_velocity: &Vec3, combined_radius: f64, tau: f64) -> Result<bool, OrcaError> {
    if !finite(rel_position) || !finite(rel_velocity) || !combined_radius.is_finite() || !tau.is_finite() {
        return Err(OrcaError::NonFinite);
    }
    if combined_radius <= 0.0 || tau <= 0.0 {
        return Err(OrcaError::NonPositive);
    }
    let speed_sq = rel_velocity.norm_squared();
    let t = if speed_sq > 0.0 {
        (rel_velocity.dot(rel_position) / speed_sq).clamp(0.0, tau)
    } else {
        0.0
    };
    Ok((rel_velocity * t - rel_position).norm_squared() <= combined_radius * combined_radius)
}

/// Smallest change `u` of the relative velocity that puts it on the boundary
/// of the velocity obstacle, and the outward normal there.
///
/// Errors when the relative velocity is outside the obstacle, when the pair
/// already overlaps (no finite-time obstacle applies, see
/// [`orca_halfspace`]), or when the relative velocity lies on the obstacle's
/// axis so that every lateral exit is equally short.
pub fn compute_u_adjustment(rel_velocity: &Vec3, rel_position: &Vec3, combined_radius: f64, tau: f64) -> Result<(Vec3, Vec3), OrcaError> {
    if !vo_contains(rel_position, rel_velocity, combined_radius, tau)? {
        return Err(OrcaError::OutsideObstacle);
    }
    boundary_adjustment(rel_velocity, rel_position, combined_radius, tau)
}

/// Vector from the relative velocity to the nearest point of the obstacle
/// boundary, from either side, and the outward normal at that point.
fn boundary_adjustment(rel_velocity: &Vec3, rel_position: &Vec3, combined_radius: f64, tau: f64) -> Result<(Vec3, Vec3), OrcaError> {
    let dist_sq = rel_position.norm_squared();
    let r_sq = combined_radius * combined_radius;
    if dist_sq <= r_sq {
        return Err(OrcaError::Colliding);
    }
    let inv_tau = 1.0 / tau;
    let w = rel_velocity - rel_position * inv_tau;
    let w_len_sq = w.norm_squared();
    let dot = w.dot(rel_position);
    if dot < 0.0 && dot * dot > r_sq * w_len_sq {
        // nearest boundary point is on the cut-off sphere
        let w_len = w_len_sq.sqrt();
        let unit = w / w_len;
        return Ok((unit * (combined_radius * inv_tau - w_len), unit));
    }
    if w_len_sq == 0.0 {
        return Err(OrcaError::Degenerate);
    }
    // nearest boundary point is on the cone
    let a = dist_sq;
    let b = rel_position.dot(rel_velocity);
    let c = rel_velocity.norm_squared() - rel_position.cross(rel_velocity).norm_squared() / (dist_sq - r_sq);
    let t = (b + (b * b - a * c).max(0.0).sqrt()) / a;
    let w = rel_velocity - rel_position * t;
    let w_len = w.norm();
    if w_len <= 1e-12 * (1.0 + rel_velocity.norm()) {
        return Err(OrcaError::Degenerate);
    }
    let unit = w / w_len;
    Ok((unit * (combined_radius * t - w_len), unit))
}

/// Deterministic direction perpendicular to `axis` (or the y axis when `axis` is zero).
fn lateral_axis(axis: &Vec3) -> Vec3 {
    let n = axis.norm();
    if n == 0.0 {
        return Vec3::y();
    }
    let a = axis / n;
    let c = a.cross(&Vec3::z());
    if c.norm_squared() > 1e-12 {
        c.normalize()
    } else {
        a.cross(&Vec3::x()).normalize()
    }
}

/// `u` and normal for any relative velocity, with the fallbacks for the
/// overlapping and on-axis cases.
fn adjustment_with_fallbacks(rel_velocity: &Vec3, rel_position: &Vec3, combined_radius: f64, tau: f64, t_orca: f64) -> Result<(Vec3, Vec3), OrcaError> {
    match boundary_adjustment(rel_velocity, rel_position, combined_radius, tau) {
        Ok(res) => Ok(res),
        Err(OrcaError::Colliding) => {
            // escape the overlap within one decision period
            let inv = 1.0 / t_orca;
            let w = rel_velocity - rel_position * inv;
            let w_len = w.norm();
            let unit = if w_len > 1e-12 {
                w / w_len
            } else if rel_position.norm() > 0.0 {
                -rel_position.normalize()
            } else {
                lateral_axis(rel_position)
            };
            Ok((unit * (combined_radius * inv - w_len), unit))
        }
        Err(OrcaError::Degenerate) => {
            let w = rel_velocity - rel_position / tau;
            if w.norm_squared() == 0.0 {
                // centre of the cut-off sphere: back out along the line of sight
                let unit = -rel_position.normalize();
                Ok((unit * (combined_radius / tau), unit))
            } else {
                // on the cone axis: sideways, by the distance to the cone surface
                let unit = lateral_axis(rel_position);
                let d = rel_position.norm();
                let dist = rel_velocity.norm() * combined_radius / d;
                Ok((unit * dist, unit))
            }
        }
        Err(e) => Err(e),
    }
}

/// ORCA constraint for `a` against `b`, with `seed` as the velocity the
/// reciprocal correction is applied to. `None` when the relative velocity
/// `seed - b.velocity` is outside the obstacle.
pub fn orca_halfspace_seeded(a: &UavState, b: &UavState, seed: &Vec3, cfg: &AvoidanceConfig) -> Result<Option<HalfSpace>, OrcaError> {
    if a.id == b.id {
        return Err(OrcaError::SameUav(a.id));
    }
    let rel_position = b.position - a.position;
    let rel_velocity = seed - b.velocity;
    let r = a.conflict_radius + b.conflict_radius;
    if !vo_contains(&rel_position, &rel_velocity, r, cfg.tau)? {
        return Ok(None);
    }
    let (u, normal) = adjustment_with_fallbacks(&rel_velocity, &rel_position, r, cfg.tau, cfg.t_orca)?;
    Ok(Some(HalfSpace {
        anchor: seed + u * 0.5,
        normal,
    }))
}

/// ORCA constraint for `a` against `b` whether or not the pair is currently
/// in conflict. Outside the obstacle `u` points inwards, so the plane lets `a`
/// use up half of the remaining margin.
pub fn orca_constraint(a: &UavState, b: &UavState, seed: &Vec3, cfg: &AvoidanceConfig) -> Result<HalfSpace, OrcaError> {
    if a.id == b.id {
        return Err(OrcaError::SameUav(a.id));
    }
    let rel_position = b.position - a.position;
    let rel_velocity = seed - b.velocity;
    if !finite(&rel_position) || !finite(&rel_velocity) {
        return Err(OrcaError::NonFinite);
    }
    let r = a.conflict_radius + b.conflict_radius;
    if !(r > 0.0 && cfg.tau > 0.0 && cfg.t_orca > 0.0) {
        return Err(OrcaError::NonPositive);
    }
    let (u, normal) = adjustment_with_fallbacks(&rel_velocity, &rel_position, r, cfg.tau, cfg.t_orca)?;
    Ok(HalfSpace {
        anchor: seed + u * 0.5,
        normal,
    })
}

/// Whether `b` can enter `a`'s velocity obstacle at all within the time
/// window, given both speed limits.
pub fn within_reach(a: &UavState, b: &UavState, cfg: &AvoidanceConfig) -> bool {
    let gap = (b.position - a.position).norm() - (a.conflict_radius + b.conflict_radius);
    gap <= cfg.tau * (a.v_max + b.v_max)
}

/// ORCA constraint for `a` against `b` seeded with `a`'s current velocity.
pub fn orca_halfspace(a: &UavState, b: &UavState, cfg: &AvoidanceConfig) -> Result<Option<HalfSpace>, OrcaError> {
    orca_halfspace_seeded(a, b, &a.velocity, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VelocitySolution {
    pub velocity: Vec3,
    /// The constraints had no common point inside the speed ball; the
    /// returned velocity minimizes the largest violation instead.
    pub relaxed: bool,
}

/// Feasible velocity closest to `preferred`, or the least-violating one.
pub fn optimal_velocity(a: &UavState, halfspaces: &[HalfSpace], preferred: &Vec3) -> VelocitySolution {
    let radius = a.v_max;
    let mut pref = *preferred;
    if pref.norm() > radius {
        pref = pref.normalize() * radius;
    }
    let mut result = pref;
    let failed = lp3(halfspaces, radius, &pref, false, &mut result);
    let relaxed = failed < halfspaces.len();
    if relaxed {
        lp4(halfspaces, failed, radius, &mut result);
    }
    let n = result.norm();
    if n > radius {
        result *= radius / n;
    }
    VelocitySolution { velocity: result, relaxed }
}

struct Line {
    point: Vec3,
    direction: Vec3,
}

/// Optimum on `line` subject to the first `count` planes and the ball.
fn lp1(planes: &[HalfSpace], count: usize, line: &Line, radius: f64, opt: &Vec3, direction_opt: bool, result: &mut Vec3) -> bool {
    let dot = line.point.dot(&line.direction);
    let disc = dot * dot + radius * radius - line.point.norm_squared();
    if disc < 0.0 {
        return false;
    }
    let sq = disc.sqrt();
    let mut t_left = -dot - sq;
    let mut t_right = -dot + sq;
    for plane in &planes[..count] {
        let numerator = (plane.anchor - line.point).dot(&plane.normal);
        let denominator = line.direction.dot(&plane.normal);
        if denominator * denominator <= PARALLEL_EPS {
            if numerator > 0.0 {
                return false;
            }
            continue;
        }
        let t = numerator / denominator;
        if denominator >= 0.0 {
            t_left = t_left.max(t);
        } else {
            t_right = t_right.min(t);
        }
        if t_left > t_right {
            return false;
        }
    }
    let t = if direction_opt {
        if opt.dot(&line.direction) > 0.0 {
            t_right
        } else {
            t_left
        }
    } else {
        line.direction.dot(&(opt - line.point)).clamp(t_left, t_right)
    };
    *result = line.point + line.direction * t;
    true
}

/// Optimum on plane `index` subject to the planes before it and the ball.
fn lp2(planes: &[HalfSpace], index: usize, radius: f64, opt: &Vec3, direction_opt: bool, result: &mut Vec3) -> bool {
    let plane = &planes[index];
    let plane_dist = plane.anchor.dot(&plane.normal);
    let r_sq = radius * radius;
    if plane_dist * plane_dist > r_sq {
        return false;
    }
    let plane_r_sq = r_sq - plane_dist * plane_dist;
    let center = plane.normal * plane_dist;
    if direction_opt {
        let in_plane = opt - plane.normal * opt.dot(&plane.normal);
        let len_sq = in_plane.norm_squared();
        *result = if len_sq <= PARALLEL_EPS {
            center
        } else {
            center + in_plane * (plane_r_sq / len_sq).sqrt()
        };
    } else {
        *result = opt + plane.normal * (plane.anchor - opt).dot(&plane.normal);
        if result.norm_squared() > r_sq {
            let offset = *result - center;
            let len_sq = offset.norm_squared();
            *result = if len_sq > 0.0 {
                center + offset * (plane_r_sq / len_sq).sqrt()
            } else {
                center
            };
        }
    }
    for i in 0..index {
        if planes[i].normal.dot(&(planes[i].anchor - *result)) > 0.0 {
            let cross = planes[i].normal.cross(&plane.normal);
            if cross.norm_squared() <= PARALLEL_EPS {
                return false;
            }
            let direction = cross.normalize();
            let line_normal = direction.cross(&plane.normal);
            let point = plane.anchor
                + line_normal * ((planes[i].anchor - plane.anchor).dot(&planes[i].normal) / line_normal.dot(&planes[i].normal));
            if !lp1(planes, i, &Line { point, direction }, radius, opt, direction_opt, result) {
                return false;
            }
        }
    }
    true
}

/// Incremental solve; returns the index of the first plane that could not be
/// satisfied, or `planes.len()` on success.
fn lp3(planes: &[HalfSpace], radius: f64, opt: &Vec3, direction_opt: bool, result: &mut Vec3) -> usize {
    *result = if direction_opt {
        opt * radius
    } else if opt.norm_squared() > radius * radius {
        opt.normalize() * radius
    } else {
        *opt
    };
    for i in 0..planes.len() {
        if planes[i].normal.dot(&(planes[i].anchor - *result)) > 0.0 {
            let previous = *result;
            if !lp2(planes, i, radius, opt, direction_opt, result) {
                *result = previous;
                return i;
            }
        }
    }
    planes.len()
}

/// Minimizes the largest violation over planes `begin..`, keeping the
/// earlier ones' relative ordering.
fn lp4(planes: &[HalfSpace], begin: usize, radius: f64, result: &mut Vec3) {
    let mut distance = 0.0;
    for i in begin..planes.len() {
        if planes[i].normal.dot(&(planes[i].anchor - *result)) > distance {
            let mut projected = Vec::with_capacity(i);
            for j in 0..i {
                let cross = planes[j].normal.cross(&planes[i].normal);
                let anchor = if cross.norm_squared() <= PARALLEL_EPS {
                    if planes[i].normal.dot(&planes[j].normal) > 0.0 {
                        continue;
                    }
                    (planes[i].anchor + planes[j].anchor) * 0.5
                } else {
                    let line_normal = cross.cross(&planes[i].normal);
                    planes[i].anchor
                        + line_normal * ((planes[j].anchor - planes[i].anchor).dot(&planes[j].normal) / line_normal.dot(&planes[j].normal))
                };
                let normal = planes[j].normal - planes[i].normal;
                let n = normal.norm();
                if n == 0.0 {
                    continue;
                }
                projected.push(HalfSpace {
                    anchor,
                    normal: normal / n,
                });
            }
            let previous = *result;
            if lp3(&projected, radius, &planes[i].normal, true, result) < projected.len() {
                *result = previous;
            }
            distance = planes[i].normal.dot(&(planes[i].anchor - *result));
        }
    }
}
