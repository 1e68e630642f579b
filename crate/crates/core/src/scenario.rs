//! Scenario files.
//!
//! A scenario is JSON with the sections `platoon`, `vehicles`, `gains`,
//! `channel`, `dangers`, `abs` and `sim`. Speeds are given in km/h and
//! converted on load. Unknown keys anywhere are an error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::braking::AbsParams;
use crate::channels::{ChannelKind, LatencyParams};
use crate::dynamics::{GainSet, PlatoonTopology, VehicleParams};
use crate::error::{Error, Result};
use crate::trigger::{Danger, DangerLog, STANDSTILL_SPEED};

pub fn kph_to_mps(kph: f64) -> f64 {
    kph / 3.6
}

fn default_vehicle_length() -> f64 {
    4.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatoonSection {
    /// Cruise speed of the platoon reference (km/h).
    pub desired_speed_kph: f64,
    /// Formation offsets `s_i` (m), front vehicle first.
    pub spacing_m: Vec<f64>,
    /// Neighbor lists; defaults to each vehicle following its predecessor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighbors: Option<Vec<Vec<usize>>>,
    /// Distance between centers of gravity that counts as a collision (m).
    #[serde(default = "default_vehicle_length")]
    pub vehicle_length_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSection {
    #[serde(default)]
    pub params: VehicleParams,
    pub initial_speed_kph: Vec<f64>,
    pub initial_position_m: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    #[serde(default)]
    pub latency: LatencyParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DangerEvent {
    pub t_s: f64,
    pub vehicle: usize,
}

fn default_lead_decel() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DangerSection {
    #[serde(default)]
    pub events: Vec<DangerEvent>,
    /// Optional memoryless danger source detected by the front vehicle (1/s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_per_s: Option<f64>,
    /// Deceleration the front vehicle settles at once it reacts (m/s²).
    #[serde(default = "default_lead_decel")]
    pub lead_decel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Sampling time (s).
    pub ts: f64,
    pub horizon_s: f64,
    /// Master seed; every run derives its streams from this and a run index.
    pub seed: u64,
    /// Variance of the acceleration disturbance ((m/s²)²).
    pub noise_variance: f64,
    pub standstill_speed: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            ts: 0.01,
            horizon_s: 20.0,
            seed: 0,
            noise_variance: 0.2,
            standstill_speed: STANDSTILL_SPEED,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    /// Label used in output files, taken from the file stem.
    #[serde(skip)]
    pub name: String,
    pub platoon: PlatoonSection,
    pub vehicles: VehicleSection,
    #[serde(default)]
    pub gains: GainSet,
    pub channel: ChannelSection,
    #[serde(default = "no_dangers")]
    pub dangers: DangerSection,
    #[serde(default)]
    pub abs: AbsParams,
    #[serde(default)]
    pub sim: SimSection,
}

fn no_dangers() -> DangerSection {
    DangerSection {
        events: Vec::new(),
        rate_per_s: None,
        lead_decel: default_lead_decel(),
    }
}

impl Scenario {
    /// Parse and validate scenario text.
    pub fn from_json(text: &str, name: &str) -> Result<Self> {
        let mut s: Scenario = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        s.name = name.to_string();
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "scenario".into());
        Self::from_json(&text, &name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn len(&self) -> usize {
        self.platoon.spacing_m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.platoon.spacing_m.is_empty()
    }

    pub fn topology(&self) -> PlatoonTopology {
        let desired = kph_to_mps(self.platoon.desired_speed_kph);
        let spacings = self.platoon.spacing_m.clone();
        match &self.platoon.neighbors {
            Some(n) => PlatoonTopology {
                neighbors: n.clone(),
                desired_speed: desired,
                spacings,
            },
            None => PlatoonTopology::predecessor_chain(desired, spacings),
        }
    }

    pub fn initial_speeds(&self) -> Vec<f64> {
        self.vehicles.initial_speed_kph.iter().map(|&v| kph_to_mps(v)).collect()
    }

    pub fn steps(&self) -> u64 {
        (self.sim.horizon_s / self.sim.ts).round() as u64
    }

    /// Scripted dangers as steps, merged with draws from the random source.
    pub fn danger_log<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Result<DangerLog> {
        let ts = self.sim.ts;
        let mut entries: Vec<Danger> = self
            .dangers
            .events
            .iter()
            .map(|e| Danger {
                step: (e.t_s / ts).round() as u64,
                vehicle: e.vehicle,
            })
            .collect();
        if let Some(rate) = self.dangers.rate_per_s {
            entries.extend(DangerLog::poisson(rate, ts, self.steps(), 0, rng)?.entries());
        }
        entries.sort_by_key(|d| d.step);
        entries.dedup_by_key(|d| d.step);
        DangerLog::new(entries)
    }

    /// Every invariant violation, not just the first.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let n = self.len();
        errs.extend(self.topology().validate());
        errs.extend(self.vehicles.params.validate());
        errs.extend(self.gains.validate());
        errs.extend(self.channel.latency.validate());
        errs.extend(self.abs.validate());

        let speeds = &self.vehicles.initial_speed_kph;
        let pos = &self.vehicles.initial_position_m;
        if speeds.len() != n {
            errs.push(format!(
                "vehicles.initial_speed_kph has {} entries for {n} vehicles",
                speeds.len()
            ));
        }
        if pos.len() != n {
            errs.push(format!(
                "vehicles.initial_position_m has {} entries for {n} vehicles",
                pos.len()
            ));
        }
        if speeds.iter().any(|v| !v.is_finite() || *v < 0.0) {
            errs.push("vehicles.initial_speed_kph must be finite and >= 0".into());
        }
        for w in pos.windows(2) {
            if !(w[1] < w[0]) {
                errs.push(format!(
                    "vehicles.initial_position_m must be strictly decreasing ({} then {})",
                    w[0], w[1]
                ));
            }
        }
        if !(self.platoon.vehicle_length_m > 0.0) {
            errs.push(format!(
                "platoon.vehicle_length_m must be > 0 (got {})",
                self.platoon.vehicle_length_m
            ));
        }
        for e in &self.gains.edge_overrides {
            let listed = self
                .topology()
                .neighbors
                .get(e.vehicle)
                .is_some_and(|l| l.contains(&e.neighbor));
            if !listed {
                errs.push(format!(
                    "gains.edge_overrides names edge {} <- {} which is not in the topology",
                    e.vehicle, e.neighbor
                ));
            }
        }

        let sim = &self.sim;
        if !(sim.ts > 0.0 && sim.ts.is_finite()) {
            errs.push(format!("sim.ts must be > 0 (got {})", sim.ts));
        }
        if !(sim.horizon_s > 0.0 && sim.horizon_s.is_finite()) {
            errs.push(format!("sim.horizon_s must be > 0 (got {})", sim.horizon_s));
        }
        if !(sim.noise_variance >= 0.0 && sim.noise_variance.is_finite()) {
            errs.push(format!(
                "sim.noise_variance must be >= 0 (got {})",
                sim.noise_variance
            ));
        }
        if !(sim.standstill_speed >= 0.0) {
            errs.push(format!(
                "sim.standstill_speed must be >= 0 (got {})",
                sim.standstill_speed
            ));
        }

        let d = &self.dangers;
        if !(d.lead_decel > 0.0 && d.lead_decel.is_finite()) {
            errs.push(format!("dangers.lead_decel must be > 0 (got {})", d.lead_decel));
        }
        if let Some(rate) = d.rate_per_s {
            if !(rate >= 0.0 && rate.is_finite()) {
                errs.push(format!("dangers.rate_per_s must be >= 0 (got {rate})"));
            }
        }
        for e in &d.events {
            if e.vehicle >= n {
                errs.push(format!(
                    "dangers.events: vehicle {} outside a platoon of {n}",
                    e.vehicle
                ));
            }
            if !(e.t_s >= 0.0 && e.t_s <= sim.horizon_s) {
                errs.push(format!(
                    "dangers.events: time {} outside [0, horizon_s]",
                    e.t_s
                ));
            }
        }
        if sim.ts > 0.0 {
            for w in d.events.windows(2) {
                if (w[1].t_s / sim.ts).round() <= (w[0].t_s / sim.ts).round() {
                    errs.push(format!(
                        "dangers.events must be strictly increasing in time ({} then {})",
                        w[0].t_s, w[1].t_s
                    ));
                }
            }
        }

        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "platoon": { "desired_speed_kph": 80, "spacing_m": [0, -31] },
        "vehicles": { "initial_speed_kph": [80, 95], "initial_position_m": [0, -25] },
        "channel": { "kind": "sv2i" },
        "dangers": { "events": [{ "t_s": 0.0, "vehicle": 0 }] }
    }"#;

    #[test]
    fn minimal_file_fills_defaults() {
        let s = Scenario::from_json(MINIMAL, "mini").unwrap();
        assert_eq!(s.channel.kind, ChannelKind::Sv2i);
        assert_eq!(s.gains, GainSet::default());
        assert_eq!(s.abs, AbsParams::default());
        assert_eq!(s.vehicles.params, VehicleParams::default());
        assert!((s.initial_speeds()[1] - 26.388_888).abs() < 1e-5);
        assert_eq!(s.steps(), 2000);
        assert_eq!(s.topology().neighbors, vec![vec![], vec![0]]);
    }

    #[test]
    fn kph_conversions() {
        for (kph, mps) in [(80.0, 22.22), (95.0, 26.39), (85.0, 23.61), (110.0, 30.56)] {
            assert!((kph_to_mps(kph) - mps).abs() < 0.005);
        }
    }

    #[test]
    fn missing_channel_kind_is_named() {
        let text = MINIMAL.replace(r#""kind": "sv2i""#, r#""latency": {}"#);
        let err = Scenario::from_json(&text, "x").unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
        assert!(err.to_string().contains("kind"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace(r#""channel""#, r#""weather": 1, "channel""#);
        let err = Scenario::from_json(&text, "x").unwrap_err();
        assert!(err.to_string().contains("weather"), "{err}");
        let text = MINIMAL.replace(r#""kind": "sv2i""#, r#""kind": "sv2i", "latency": {"jitter": 1}"#);
        assert!(Scenario::from_json(&text, "x").is_err());
    }

    #[test]
    fn violations_are_listed_together() {
        let text = MINIMAL
            .replace(r#""initial_speed_kph""#, r#""params": {"mass": -1, "tire_stiffness": 80000, "effective_radius": 0.3, "wheelbase": 2.34, "front_load_fraction": 0.58}, "initial_speed_kph""#)
            .replace("[0, -25]", "[0, 5]");
        match Scenario::from_json(&text, "x").unwrap_err() {
            Error::Validation(errs) => {
                assert_eq!(errs.len(), 2, "{errs:?}");
                assert!(errs.iter().any(|e| e.contains("mass")));
                assert!(errs.iter().any(|e| e.contains("initial_position_m")));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn parse_errors_carry_position() {
        match Scenario::from_json("{\n  \"platoon\": [", "x").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn round_trips_through_json() {
        let s = Scenario::from_json(MINIMAL, "mini").unwrap();
        let again = Scenario::from_json(&s.to_json(), "mini").unwrap();
        assert_eq!(s, again);
    }
}
