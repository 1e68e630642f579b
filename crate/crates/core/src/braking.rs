//! Linear tire slip, brake pressure build-up and the ABS clamp.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbsParams {
    /// Slip at the peak of the force curve.
    pub kappa_sat: f64,
    /// Deceleration the road can supply (m/s²).
    pub capacity: f64,
    /// Time for the brake pressure to build up to full capacity (s).
    pub build_up: f64,
    /// Amplitude of the reported slip oscillation while ABS cycles.
    pub modulation_amplitude: f64,
    /// Period of that oscillation (s).
    pub modulation_period: f64,
    /// Share of the rear normal load shifted forward under braking.
    pub load_transfer: f64,
}

impl Default for AbsParams {
    fn default() -> Self {
        Self {
            kappa_sat: 0.22,
            capacity: 10.0,
            build_up: 0.1,
            modulation_amplitude: 0.015,
            modulation_period: 0.08,
            load_transfer: 0.06,
        }
    }
}

impl AbsParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.kappa_sat > 0.0 && self.kappa_sat < 1.0) {
            errs.push(format!("abs.kappa_sat must lie in (0, 1) (got {})", self.kappa_sat));
        }
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            errs.push(format!("abs.capacity must be > 0 (got {})", self.capacity));
        }
        if !(self.build_up >= 0.0 && self.build_up.is_finite()) {
            errs.push(format!("abs.build_up must be >= 0 (got {})", self.build_up));
        }
        if !(self.modulation_amplitude >= 0.0 && self.kappa_sat + self.modulation_amplitude < 1.0) {
            errs.push(format!(
                "abs.modulation_amplitude must be >= 0 and keep slip below 1 (got {})",
                self.modulation_amplitude
            ));
        }
        if !(self.modulation_period > 0.0) {
            errs.push(format!(
                "abs.modulation_period must be > 0 (got {})",
                self.modulation_period
            ));
        }
        if !(0.0..1.0).contains(&self.load_transfer) {
            errs.push(format!(
                "abs.load_transfer must lie in [0, 1) (got {})",
                self.load_transfer
            ));
        }
        errs
    }

    /// Largest deceleration magnitude the tire and road can deliver together.
    pub fn attainable(&self, vehicle: &VehicleParams) -> f64 {
        self.capacity.min(accel_from_slip(self.kappa_sat, vehicle))
    }

    /// Steepest allowed change of the realized acceleration (m/s³).
    pub fn ramp_slope(&self) -> f64 {
        if self.build_up > 0.0 {
            self.capacity / self.build_up
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BrakeState {
    /// Commanded acceleration (m/s²), negative when braking.
    pub u_cmd: f64,
    /// Acceleration actually delivered (m/s²).
    pub u_real: f64,
    /// Longitudinal tire force (N).
    pub force: f64,
    /// Signed vehicle slip.
    pub kappa: f64,
    pub abs_active: bool,
    /// Time since braking began (s).
    pub braking_time: f64,
}

/// `κ = (M / C) u`
pub fn slip_from_accel(u: f64, vehicle: &VehicleParams) -> f64 {
    u * vehicle.mass / vehicle.tire_stiffness
}

/// `u = (C / M) κ`
pub fn accel_from_slip(kappa: f64, vehicle: &VehicleParams) -> f64 {
    kappa * vehicle.tire_stiffness / vehicle.mass
}

/// One actuator step.
///
/// The command is clamped to what the tire can carry, and the realized
/// acceleration moves towards it no faster than `capacity / build_up`. When
/// the clamp is holding, the wheel sits at the peak of the force curve and the
/// reported slip oscillates around `κ_sat`.
pub fn abs_modulate(
    u_cmd: f64,
    state: &BrakeState,
    abs: &AbsParams,
    vehicle: &VehicleParams,
    dt: f64,
) -> BrakeState {
    let limit = abs.attainable(vehicle);
    let target = u_cmd.clamp(-limit, limit);
    let clamped = target != u_cmd;
    let step = abs.ramp_slope() * dt;
    let u_real = state.u_real + (target - state.u_real).clamp(-step, step);

    let braking = u_real < 0.0 || target < 0.0;
    let braking_time = if braking { state.braking_time + dt } else { 0.0 };
    let abs_active = clamped && u_real.abs() >= limit * (1.0 - 1e-12);
    let kappa = if abs_active {
        let band = abs.kappa_sat + abs.modulation_amplitude * (TAU * braking_time / abs.modulation_period).sin();
        band.copysign(u_real)
    } else {
        slip_from_accel(u_real, vehicle)
    };
    BrakeState {
        u_cmd,
        u_real,
        force: vehicle.mass * u_real,
        kappa,
        abs_active,
        braking_time,
    }
}

/// `κ_l = (R_e ω_l - v) / max(R_e ω_l, v)`, zero when both vanish.
pub fn axle_slip(omega: f64, speed: f64, effective_radius: f64) -> f64 {
    let wheel = effective_radius * omega;
    let denom = wheel.max(speed);
    if denom <= 0.0 {
        0.0
    } else {
        (wheel - speed) / denom
    }
}

/// Front and rear axle slips for a vehicle slip `kappa`.
///
/// Braking shifts part of the rear normal load to the front axle, so the rear
/// tires need more slip for the same force. Wheel speeds are reconstructed
/// from the axle slips and fed through [`axle_slip`].
pub fn axle_slips(state: &BrakeState, speed: f64, abs: &AbsParams, vehicle: &VehicleParams) -> (f64, f64) {
    let f = vehicle.front_load_fraction;
    let phi = if state.kappa < 0.0 { abs.load_transfer } else { 0.0 };
    let rear_load = (1.0 - f) * (1.0 - phi);
    let front_load = 1.0 - rear_load;
    let front_scale = f / front_load;
    let rear_scale = (1.0 - f) / rear_load;

    let (front, rear) = if state.abs_active {
        (state.kappa * front_scale / rear_scale, state.kappa)
    } else {
        let cap = abs.kappa_sat + abs.modulation_amplitude;
        (state.kappa * front_scale, (state.kappa * rear_scale).clamp(-cap, cap))
    };
    let re = vehicle.effective_radius;
    let to_slip = |k: f64| {
        let omega = speed.max(0.0) * (1.0 + k) / re;
        axle_slip(omega, speed.max(0.0), re)
    };
    (to_slip(front), to_slip(rear))
}
