//! Kinematic bicycle and a pure-pursuit follower.

use crate::error::{Error, Result};
use crate::geometry::{wrap, Point2, Pose2};

use super::track::Track;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TruthState {
    pub t: f64,
    pub pose: Pose2,
    pub vx: f64,
    pub vy: f64,
    pub r: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub max_steer: f64,
    /// First-order speed tracking time constant, s.
    pub speed_tau: f64,
    /// Shortest pure-pursuit lookahead, m.
    pub min_lookahead: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams { wheelbase: 1.53, max_steer: 0.5, speed_tau: 0.5, min_lookahead: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Command {
    pub speed: f64,
    pub steer: f64,
}

/// Advances the bicycle by `dt`. Speed relaxes exponentially to the command;
/// the pose follows the exact constant-curvature arc for the step's mean speed.
pub fn step_vehicle(s: &TruthState, cmd: &Command, dt: f64, params: &VehicleParams) -> Result<TruthState> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", format!("{dt} must be positive")));
    }
    let decay = (-dt / params.speed_tau).exp();
    let v0 = s.vx;
    let v1 = cmd.speed + (v0 - cmd.speed) * decay;
    let v_mean = cmd.speed + (v0 - cmd.speed) * params.speed_tau * (1.0 - decay) / dt;
    let dist = v_mean * dt;
    let kappa = cmd.steer.clamp(-params.max_steer, params.max_steer).tan() / params.wheelbase;
    let dpsi = dist * kappa;
    let psi = s.pose.psi;
    let (dx, dy) = if dpsi.abs() < 1e-9 {
        (dist * psi.cos(), dist * psi.sin())
    } else {
        let radius = 1.0 / kappa;
        (
            radius * ((psi + dpsi).sin() - psi.sin()),
            radius * (psi.cos() - (psi + dpsi).cos()),
        )
    };
    Ok(TruthState {
        t: s.t + dt,
        pose: Pose2::new(s.pose.x + dx, s.pose.y + dy, psi + dpsi),
        vx: v1,
        vy: 0.0,
        r: v1 * kappa,
    })
}

/// Steers toward the centerline point `max(v·lookahead_time, min_lookahead)`
/// ahead of the vehicle's projection onto the track.
pub fn pure_pursuit(
    s: &TruthState,
    track: &Track,
    lookahead_time: f64,
    target_speed: f64,
    params: &VehicleParams,
) -> Command {
    let (s0, _) = track.project(&s.pose.position());
    let ld = (s.vx.abs() * lookahead_time).max(params.min_lookahead);
    let target = track.point_at(s0 + ld);
    Command { speed: target_speed, steer: steer_towards(&s.pose, &target, params) }
}

pub fn steer_towards(pose: &Pose2, target: &Point2, params: &VehicleParams) -> f64 {
    let local = pose.inverse_transform_point(target);
    let dist = local.norm();
    if dist < 1e-9 {
        return 0.0;
    }
    let alpha = wrap(local.y.atan2(local.x));
    let steer = (2.0 * params.wheelbase * alpha.sin() / dist).atan();
    steer.clamp(-params.max_steer, params.max_steer)
}
