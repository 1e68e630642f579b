//! The simulation loop.
//!
//! Each step: detect dangers and broadcast warnings, hand out deliveries,
//! update the add-on latch, rebuild the discrete model if any flag changed,
//! evaluate the consensus commands, pass them through the brake actuator, and
//! advance the error state.
//!
//! The platoon reference is the front vehicle's nominal trajectory: it cruises
//! at the desired speed and, once a danger is detected, ramps to the scripted
//! lead deceleration over the brake build-up time and holds it until it stops.
//! A follower that has not yet heard of the danger keeps its speed.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analysis::{stopping_distance, BrakingEpisode};
use crate::braking::{abs_modulate, axle_slips, BrakeState};
use crate::channels::{Channel, ChannelKind, Delivery};
use crate::dynamics::{control_input, step_dynamics, ClosedLoopModel, Reference, StateVector};
use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::trigger::evaluate_trigger;
use crate::trigger::TriggerState;

const NOISE_STREAM: u64 = 0;
const CHANNEL_STREAM: u64 = 1;
const QUEUE_STREAM: u64 = 2;
const DANGER_STREAM: u64 = 3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of run `index` under master seed `master`. Independent of the
/// channel, so channels compared at one index see the same noise.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One row of the trace: one vehicle at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub t: f64,
    pub vehicle: usize,
    pub p_abs: f64,
    pub v_abs: f64,
    pub p_err: f64,
    pub v_err: f64,
    pub u_cmd: f64,
    pub u_real: f64,
    pub kappa_front: f64,
    pub kappa_rear: f64,
    pub theta: u8,
    pub queue_len: usize,
    pub event: String,
}

impl TraceRecord {
    pub fn has_event(&self, name: &str) -> bool {
        self.event.split('|').any(|e| e == name)
    }
}

/// Per-run outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub channel: ChannelKind,
    pub seed: u64,
    /// Steps between detection and the first follower's warning.
    pub r_steps: Option<u64>,
    pub delay_s: Option<f64>,
    /// Largest axle slip magnitude over all followers.
    pub max_slip: f64,
    /// First follower, from warning to standstill.
    pub stop_dist_m: Option<f64>,
    /// Smallest center-of-gravity gap between neighbors at the end.
    pub final_gap_m: f64,
    pub collided: bool,
    pub collision_t: Option<f64>,
}

/// Quantities recoverable from the records alone.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceMetrics {
    pub r_steps: Option<u64>,
    pub max_slip: f64,
    pub stop_dist_m: Option<f64>,
    pub final_gap_m: f64,
    pub collision: Option<(u64, f64)>,
}

#[derive(Debug, Clone)]
pub struct SimTrace {
    pub vehicles: usize,
    pub ts: f64,
    /// Step-major: all vehicles of step 0, then step 1, ...
    pub records: Vec<TraceRecord>,
    pub deliveries: Vec<Delivery>,
    pub summary: RunSummary,
}

impl SimTrace {
    pub fn steps(&self) -> usize {
        self.records.len() / self.vehicles.max(1)
    }

    pub fn at(&self, step: usize, vehicle: usize) -> &TraceRecord {
        &self.records[step * self.vehicles + vehicle]
    }

    /// Column of one vehicle.
    pub fn vehicle(&self, i: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().skip(i).step_by(self.vehicles)
    }
}

/// First step at which two neighbors in lane order are within `length`.
pub fn detect_collision(records: &[TraceRecord], vehicles: usize, length: f64) -> Option<(u64, f64)> {
    if vehicles < 2 {
        return None;
    }
    records.chunks(vehicles).find_map(|row| {
        row.windows(2)
            .any(|w| w[0].p_abs - w[1].p_abs <= length)
            .then(|| (row[0].step, row[0].t))
    })
}

/// Recompute the summary metrics from trace records.
pub fn trace_metrics(records: &[TraceRecord], vehicles: usize, length: f64, standstill: f64) -> Result<TraceMetrics> {
    if records.is_empty() || vehicles == 0 {
        return Err(Error::EmptyTrace);
    }
    if !records.len().is_multiple_of(vehicles) {
        return Err(Error::Dimension(format!(
            "{} records is not a whole number of steps for {vehicles} vehicles",
            records.len()
        )));
    }
    let max_slip = records
        .iter()
        .filter(|r| r.vehicle > 0)
        .map(|r| r.kappa_front.abs().max(r.kappa_rear.abs()))
        .fold(0.0, f64::max);
    let last = &records[records.len() - vehicles..];
    let final_gap_m = last
        .windows(2)
        .map(|w| w[0].p_abs - w[1].p_abs)
        .fold(f64::INFINITY, f64::min);
    let detected = records.iter().find(|r| r.has_event("danger")).map(|r| r.step);
    let (mut r_steps, mut stop_dist_m) = (None, None);
    if vehicles > 1 {
        let follower: Vec<&TraceRecord> = records.iter().skip(1).step_by(vehicles).collect();
        let warned = follower.iter().position(|r| r.has_event("warning"));
        if let (Some(k), Some(a)) = (detected, warned) {
            r_steps = Some(follower[a].step - k);
            let p: Vec<f64> = follower.iter().map(|r| r.p_abs).collect();
            let v: Vec<f64> = follower.iter().map(|r| r.v_abs).collect();
            stop_dist_m = stopping_distance(&p, &v, a, standstill).ok();
        }
    }
    Ok(TraceMetrics {
        r_steps,
        max_slip,
        stop_dist_m,
        final_gap_m: if final_gap_m.is_finite() { final_gap_m } else { 0.0 },
        collision: detect_collision(records, vehicles, length),
    })
}

/// Nominal acceleration of the reference given its speed and how long ago
/// the lead reacted.
fn reference_accel(speed: f64, since: Option<u64>, ts: f64, decel: f64, build_up: f64) -> f64 {
    let Some(n) = since else { return 0.0 };
    if speed <= 0.0 {
        return 0.0;
    }
    let ramp = if build_up > 0.0 {
        ((n + 1) as f64 * ts / build_up).min(1.0)
    } else {
        1.0
    };
    (-decel * ramp).max(-speed / ts)
}

/// Simulate `scenario` over `channel` as run number `seed`.
pub fn run(scenario: &Scenario, channel: ChannelKind, seed: u64) -> Result<SimTrace> {
    scenario.validate()?;
    let n = scenario.len();
    let topo = scenario.topology();
    let ts = scenario.sim.ts;
    let threshold = scenario.sim.standstill_speed;
    let vehicle = scenario.vehicles.params;
    let abs = scenario.abs;
    let latency = scenario.channel.latency.clone();
    let gains = if channel == ChannelKind::Nc && !latency.nc_addon {
        scenario.gains.without_addon()
    } else {
        scenario.gains.clone()
    };

    let run_seed = derive_seed(scenario.sim.seed, seed);
    let mut noise_rng = stream(run_seed, NOISE_STREAM);
    let mut ch = Channel::new(
        channel,
        latency,
        ts,
        stream(run_seed, CHANNEL_STREAM),
        stream(run_seed, QUEUE_STREAM),
    )?;
    let log = scenario.danger_log(&mut stream(run_seed, DANGER_STREAM))?;
    let noise = if scenario.sim.noise_variance > 0.0 {
        Some(Normal::new(0.0, scenario.sim.noise_variance.sqrt()).map_err(|e| Error::InvalidParameter(e.to_string()))?)
    } else {
        None
    };

    let mut reference = Reference {
        position: 0.0,
        speed: topo.desired_speed,
    };
    let mut state = StateVector::from_absolute(
        scenario.vehicles.initial_position_m.clone(),
        scenario.initial_speeds(),
        &topo.spacings,
        reference,
    );
    let mut trig = TriggerState::new(n);
    let mut models: HashMap<Vec<bool>, ClosedLoopModel> = HashMap::new();
    let mut brakes = vec![BrakeState::default(); n];
    let mut aware = vec![false; n];
    let mut parked: Vec<Option<f64>> = vec![None; n];
    let mut danger_at: Option<u64> = None;
    let mut deliveries = Vec::new();
    let mut records = Vec::new();
    let mut finishing = false;
    let steps = scenario.steps();

    for k in 0..steps {
        let t = k as f64 * ts;
        let mut events: Vec<Vec<&str>> = vec![Vec::new(); n];

        for d in log.at(k) {
            events[d.vehicle].push("danger");
            aware[d.vehicle] = true;
            danger_at.get_or_insert(k);
            let behind: Vec<usize> = (d.vehicle + 1..n).collect();
            ch.warn(k, &behind);
        }
        let due = ch.take_due(k);
        let delivered: Vec<usize> = due.iter().map(|d| d.vehicle).collect();
        for d in &due {
            if d.vehicle >= n {
                return Err(Error::UnknownVehicle {
                    vehicle: d.vehicle,
                    count: n,
                });
            }
            events[d.vehicle].push("warning");
            aware[d.vehicle] = true;
        }
        deliveries.extend(due);

        let next = evaluate_trigger(&trig, &log, k, &delivered, &state.vel, threshold)?;
        for (ev, (was, now)) in events.iter_mut().zip(trig.theta.iter().zip(&next.theta)) {
            match (was, now) {
                (false, true) => ev.push("theta_on"),
                (true, false) => ev.push("theta_off"),
                _ => {}
            }
        }
        trig = next;
        if !models.contains_key(&trig.theta) {
            let m = ClosedLoopModel::build(&topo, &gains, &trig.theta, ts)?;
            models.insert(trig.theta.clone(), m);
        }
        let model = &models[&trig.theta];

        let u = control_input(&state, &topo, &gains, &trig.theta)?;
        let since = danger_at.map(|d| k - d);
        let ar = reference_accel(reference.speed, since, ts, scenario.dangers.lead_decel, abs.build_up);

        let mut cmd = vec![0.0; n];
        let mut real = vec![0.0; n];
        let mut stopping = vec![false; n];
        for i in 0..n {
            if parked[i].is_some() {
                brakes[i] = BrakeState::default();
                continue;
            }
            let mut c = if danger_at.is_some() && !aware[i] {
                0.0
            } else if topo.neighbors[i].is_empty() {
                ar + u[i]
            } else {
                u[i]
            };
            if trig.theta[i] {
                c = c.min(0.0);
            }
            brakes[i] = abs_modulate(c, &brakes[i], &abs, &vehicle, ts);
            let mut a = brakes[i].u_real;
            let v = state.vel[i];
            if aware[i] && danger_at.is_some() && a < 0.0 && v + a * ts <= threshold {
                a = a.max(-v / ts);
                stopping[i] = true;
            }
            if brakes[i].abs_active {
                events[i].push("abs");
            }
            cmd[i] = c;
            real[i] = a;
        }

        let queue_len = ch.queue_len();
        for i in 0..n {
            let (kf, kr) = axle_slips(&brakes[i], state.vel[i], &abs, &vehicle);
            records.push(TraceRecord {
                step: k,
                t,
                vehicle: i,
                p_abs: state.pos[i],
                v_abs: state.vel[i],
                p_err: state.pos_err[i],
                v_err: state.vel_err[i],
                u_cmd: cmd[i],
                u_real: real[i],
                kappa_front: kf,
                kappa_rear: kr,
                theta: trig.theta[i] as u8,
                queue_len,
                event: events[i].join("|"),
            });
        }
        if finishing || k + 1 == steps {
            break;
        }

        let w: Vec<f64> = (0..n)
            .map(|i| {
                // braking is applied deterministically; noise only perturbs cruising vehicles
                let jitter = match (&noise, parked[i].is_some() || stopping[i] || trig.theta[i]) {
                    (Some(d), false) => d.sample(&mut noise_rng),
                    _ => 0.0,
                };
                real[i] - ar - u[i] + jitter
            })
            .collect();
        reference = reference.advance(ts, ar);
        state = step_dynamics(&state, model, &w, &topo.spacings, reference)?;
        for i in 0..n {
            if stopping[i] && parked[i].is_none() {
                parked[i] = Some(state.pos[i]);
            }
            if let Some(p) = parked[i] {
                state.pos[i] = p;
                state.vel[i] = 0.0;
                state.pos_err[i] = p - reference.position - topo.spacings[i];
                state.vel_err[i] = -reference.speed;
            }
        }
        ch.advance(k);
        if danger_at.is_some() && parked.iter().all(Option::is_some) {
            finishing = true;
        }
    }

    let length = scenario.platoon.vehicle_length_m;
    let metrics = trace_metrics(&records, n, length, threshold)?;
    mark_collision(&mut records, n, length, metrics.collision);
    let first = deliveries.iter().find(|d| d.vehicle == 1);
    let summary = RunSummary {
        scenario: scenario.name.clone(),
        channel,
        seed,
        r_steps: metrics.r_steps,
        delay_s: first.map(|d| d.delay),
        max_slip: metrics.max_slip,
        stop_dist_m: metrics.stop_dist_m,
        final_gap_m: metrics.final_gap_m,
        collided: metrics.collision.is_some(),
        collision_t: metrics.collision.map(|c| c.1),
    };
    Ok(SimTrace {
        vehicles: n,
        ts,
        records,
        deliveries,
        summary,
    })
}

/// Tag the rear vehicle of every colliding pair at the first collision step.
fn mark_collision(records: &mut [TraceRecord], n: usize, length: f64, collision: Option<(u64, f64)>) {
    let Some((step, _)) = collision else { return };
    let row = &mut records[step as usize * n..(step as usize + 1) * n];
    for i in 1..n {
        if row[i - 1].p_abs - row[i].p_abs <= length {
            let r = &mut row[i];
            if !r.event.is_empty() {
                r.event.push('|');
            }
            r.event.push_str("collision");
        }
    }
}

/// A follower's braking episode read back from a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReport {
    pub vehicle: usize,
    pub neighbor: usize,
    pub episode: BrakingEpisode,
    /// `p^i - p^j` in error coordinates at the follower's standstill (m).
    pub gap_err: f64,
    /// Center-of-gravity distance at that step (m).
    pub gap_abs: f64,
    /// The neighbor stopped no later than the follower.
    pub neighbor_stopped: bool,
    pub max_u_cmd: f64,
    pub max_u_real: f64,
    /// Largest absolute speed seen by the follower (m/s).
    pub v_max: f64,
}

/// Episodes of every vehicle that was warned and stopped, each measured
/// against its predecessor. `kappa_max` goes into the episode as the slip
/// ceiling.
pub fn episodes(
    records: &[TraceRecord],
    vehicles: usize,
    ts: f64,
    build_up: f64,
    standstill: f64,
    kappa_max: f64,
) -> Vec<EpisodeReport> {
    let Some(detected) = records.iter().find(|r| r.has_event("danger")).map(|r| r.step) else {
        return Vec::new();
    };
    let steps = records.len() / vehicles.max(1);
    let at = |k: usize, i: usize| &records[k * vehicles + i];
    let ramp = (build_up / ts).round() as usize;
    (1..vehicles)
        .filter_map(|i| {
            let act = (0..steps).find(|&k| at(k, i).theta == 1)?;
            let stop = (act..steps).find(|&k| at(k, i).v_abs.abs() <= standstill)?;
            let built = (act + ramp).min(stop);
            let j = i - 1;
            let (mut max_u_cmd, mut max_u_real, mut v_max) = (0.0f64, 0.0f64, 0.0f64);
            for k in 0..steps {
                let r = at(k, i);
                max_u_cmd = max_u_cmd.max(r.u_cmd.abs());
                max_u_real = max_u_real.max(r.u_real.abs());
                v_max = v_max.max(r.v_abs.abs());
            }
            Some(EpisodeReport {
                vehicle: i,
                neighbor: j,
                episode: BrakingEpisode {
                    detection_step: detected,
                    delivery_offset: act as u64 - detected,
                    build_up,
                    standstill_step: stop as u64,
                    ts,
                    position: at(built, i).p_err,
                    speed: at(act, i).v_err,
                    target_gap: at(stop, i).p_err - at(stop, j).p_err,
                    kappa_max,
                },
                gap_err: at(stop, i).p_err - at(stop, j).p_err,
                gap_abs: at(stop, j).p_abs - at(stop, i).p_abs,
                neighbor_stopped: at(stop, j).v_abs.abs() <= standstill,
                max_u_cmd,
                max_u_real,
                v_max,
            })
        })
        .collect()
}
