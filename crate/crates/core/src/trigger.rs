//! Danger log and the per-vehicle add-on latch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::GainSet;
use crate::error::{Error, Result};

/// Default speed below which a vehicle counts as stopped (m/s).
pub const STANDSTILL_SPEED: f64 = 0.05;

/// A danger detected by `vehicle` at step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Danger {
    pub step: u64,
    pub vehicle: usize,
}

/// Danger times in strictly increasing order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DangerLog {
    entries: Vec<Danger>,
}

impl DangerLog {
    pub fn new(entries: Vec<Danger>) -> Result<Self> {
        for w in entries.windows(2) {
            if w[1].step <= w[0].step {
                return Err(Error::InvalidParameter(format!(
                    "danger steps must be strictly increasing ({} then {})",
                    w[0].step, w[1].step
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Memoryless danger source: every step independently carries a danger
    /// with probability `1 - exp(-rate * ts)`.
    pub fn poisson<R: Rng + ?Sized>(
        rate: f64,
        ts: f64,
        steps: u64,
        vehicle: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(rate >= 0.0 && rate.is_finite() && ts > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "danger rate {rate} / step {ts} must be finite, rate >= 0, step > 0"
            )));
        }
        let p = -(-rate * ts).exp_m1();
        let entries = (0..steps)
            .filter(|_| rng.random::<f64>() < p)
            .map(|step| Danger { step, vehicle })
            .collect();
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Danger] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dangers detected exactly at step `k`.
    pub fn at(&self, k: u64) -> impl Iterator<Item = &Danger> {
        let start = self.entries.partition_point(|d| d.step < k);
        self.entries[start..].iter().take_while(move |d| d.step == k)
    }
}

/// Add-on flags and the step each one was last switched on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerState {
    pub theta: Vec<bool>,
    pub activated_at: Vec<Option<u64>>,
}

impl TriggerState {
    pub fn new(n: usize) -> Self {
        Self {
            theta: vec![false; n],
            activated_at: vec![None; n],
        }
    }
}

/// Applies detections at step `k` and the warnings delivered at `k`, then
/// releases every vehicle whose absolute speed is at or below `threshold`.
pub fn evaluate_trigger(
    state: &TriggerState,
    log: &DangerLog,
    k: u64,
    delivered: &[usize],
    speeds: &[f64],
    threshold: f64,
) -> Result<TriggerState> {
    let n = state.theta.len();
    if speeds.len() != n {
        return Err(Error::Dimension(format!(
            "{} speeds for {} vehicles",
            speeds.len(),
            n
        )));
    }
    let mut next = state.clone();
    let arrivals = log.at(k).map(|d| d.vehicle).chain(delivered.iter().copied());
    for i in arrivals {
        if i >= n {
            return Err(Error::UnknownVehicle {
                vehicle: i,
                count: n,
            });
        }
        if !next.theta[i] {
            next.theta[i] = true;
            next.activated_at[i] = Some(k);
        }
    }
    for (theta, &v) in next.theta.iter_mut().zip(speeds) {
        if v.abs() <= threshold {
            *theta = false;
        }
    }
    Ok(next)
}

/// Relative gains `(c_p + θ Δc_p, c_v + θ Δc_v)`.
pub fn effective_gains(gains: &GainSet, theta: bool) -> (f64, f64) {
    if theta {
        (
            gains.relative_position + gains.addon_position,
            gains.relative_velocity + gains.addon_velocity,
        )
    } else {
        (gains.relative_position, gains.relative_velocity)
    }
}
