//! Closed-form braking quantities: peak deceleration and slip, the
//! slip-limited stopping gap, and the deceleration a target gap requires.
//!
//! Positions and speeds are error coordinates, the same ones the control law
//! uses. Step differences are converted to seconds before use.

use crate::braking::{slip_from_accel, AbsParams};
use crate::dynamics::{GainSet, VehicleParams};
use crate::error::{Error, Result};

/// One braking episode of a follower.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrakingEpisode {
    /// Step the danger was detected.
    pub detection_step: u64,
    /// Steps until the warning reached this vehicle.
    pub delivery_offset: u64,
    /// Brake pressure build-up (s).
    pub build_up: f64,
    /// Step the vehicle came to rest.
    pub standstill_step: u64,
    /// Sampling time (s).
    pub ts: f64,
    /// Position error once the build-up is over (m).
    pub position: f64,
    /// Speed error at delivery, unchanged through the build-up (m/s).
    pub speed: f64,
    /// Desired gap at standstill, negative for a safe setup (m).
    pub target_gap: f64,
    /// Slip ceiling for the episode.
    pub kappa_max: f64,
}

impl BrakingEpisode {
    /// Full-braking time `(k̄ - k - r) T_s - τ_p` (s).
    pub fn braking_time(&self) -> f64 {
        let steps = self.standstill_step as f64 - self.detection_step as f64 - self.delivery_offset as f64;
        steps * self.ts - self.build_up
    }
}

/// Relative and own errors of vehicle `i` against its neighbor `j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeState {
    /// `p^i - p^j`
    pub dp: f64,
    /// `v^i - v^j`
    pub dv: f64,
    pub p: f64,
    pub v: f64,
}

/// Magnitude of the consensus command with the add-on gains engaged.
pub fn max_deceleration(rel: &RelativeState, gains: &GainSet) -> f64 {
    let cp = gains.relative_position + gains.addon_position;
    let cv = gains.relative_velocity + gains.addon_velocity;
    (-cp * rel.dp - cv * rel.dv - gains.self_position * rel.p - gains.self_velocity * rel.v).abs()
}

/// `κ_max = (M / C) |u_max|`
pub fn max_slip(u_max: f64, vehicle: &VehicleParams) -> f64 {
    slip_from_accel(u_max.abs(), vehicle)
}

/// Whether the peak slip stays within `kappa_limit`, and by how much.
pub fn slip_constraint_satisfied(u_max: f64, vehicle: &VehicleParams, kappa_limit: f64) -> (bool, f64) {
    let margin = kappa_limit - max_slip(u_max, vehicle);
    (margin >= 0.0, margin)
}

/// `p + v Δt + u Δt² / 2`
pub fn final_position(position: f64, speed: f64, u: f64, dt: f64) -> Result<f64> {
    if dt < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "braking interval must be >= 0 (got {dt})"
        )));
    }
    Ok(position + speed * dt + 0.5 * u * dt * dt)
}

fn position_gain(gains: &GainSet) -> Result<f64> {
    let c = gains.relative_position + gains.addon_position;
    if c <= 0.0 {
        return Err(Error::InvalidParameter(
            "effective relative position gain is zero".into(),
        ));
    }
    Ok(c)
}

/// Gap at standstill implied by a braking level `a` (m/s²):
/// `a / c · (1 + Δt²/2) - c0_p (p + v Δt) / c` with `c = c_p + Δc_p`.
///
/// The slip-limited bound is this with `a = C κ̄ / M`; the formula is kept
/// exactly as derived, including the dimensionless `1`.
pub fn gap_for_deceleration(episode: &BrakingEpisode, gains: &GainSet, a: f64) -> Result<f64> {
    let c = position_gain(gains)?;
    let dt = episode.braking_time();
    Ok(a / c * (1.0 + 0.5 * dt * dt) - gains.self_position * (episode.position + episode.speed * dt) / c)
}

/// Upper bound on `p^i - p^j` at standstill under the slip ceiling.
pub fn relative_distance_bound(episode: &BrakingEpisode, gains: &GainSet, vehicle: &VehicleParams) -> Result<f64> {
    let a = episode.kappa_max * vehicle.tire_stiffness / vehicle.mass;
    gap_for_deceleration(episode, gains, a)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequiredDeceleration {
    /// Signed bound on `u_k̄` (m/s²).
    pub u_required: f64,
    /// Braking magnitude this asks for, zero if none is needed.
    pub magnitude: f64,
    /// What the tire and road can deliver.
    pub attainable: f64,
    pub feasible: bool,
}

/// `u_k̄ ≥ (-|p_f| c + c0_p (p + v Δt)) / (1 + Δt²/2)`.
pub fn required_deceleration(
    episode: &BrakingEpisode,
    gains: &GainSet,
    vehicle: &VehicleParams,
    abs: &AbsParams,
) -> Result<RequiredDeceleration> {
    let dt = episode.braking_time();
    if dt <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "braking interval must be > 0 (got {dt})"
        )));
    }
    let c = position_gain(gains)?;
    let u_required = (-episode.target_gap.abs() * c
        + gains.self_position * (episode.position + episode.speed * dt))
        / (1.0 + 0.5 * dt * dt);
    let magnitude = (-u_required).max(0.0);
    let attainable = abs.attainable(vehicle);
    Ok(RequiredDeceleration {
        u_required,
        magnitude,
        attainable,
        feasible: magnitude <= attainable,
    })
}

/// Distance covered from `activation` until the first step at or below
/// `threshold` speed.
pub fn stopping_distance(positions: &[f64], speeds: &[f64], activation: usize, threshold: f64) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if positions.len() != speeds.len() || activation >= positions.len() {
        return Err(Error::Dimension(format!(
            "{} positions, {} speeds, activation at {}",
            positions.len(),
            speeds.len(),
            activation
        )));
    }
    let stop = speeds[activation..]
        .iter()
        .position(|v| v.abs() <= threshold)
        .map(|i| i + activation)
        .ok_or(Error::NoStandstill(activation))?;
    Ok(positions[stop] - positions[activation])
}
