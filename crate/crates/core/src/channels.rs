//! Warning delivery: driver reaction (NC), queued LTE uplink (V2I) and a
//! dedicated 5G slice (SV2I).

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    /// No infrastructure: followers notice the brake lights of the car ahead.
    Nc,
    /// Non-scheduled LTE with a shared FIFO uplink queue.
    V2i,
    /// 5G with a low-latency slice reserved for warnings.
    Sv2i,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 3] = [ChannelKind::Nc, ChannelKind::V2i, ChannelKind::Sv2i];

    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Nc => "nc",
            ChannelKind::V2i => "v2i",
            ChannelKind::Sv2i => "sv2i",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nc" => Ok(ChannelKind::Nc),
            "v2i" => Ok(ChannelKind::V2i),
            "sv2i" => Ok(ChannelKind::Sv2i),
            other => Err(Error::InvalidParameter(format!(
                "unknown channel '{other}' (expected nc, v2i or sv2i)"
            ))),
        }
    }
}

/// How a continuous delay maps onto whole sampling steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rounding {
    #[default]
    Ceil,
    Floor,
}

/// Source of the LTE queueing delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueueMode {
    /// Draw the delay from an exponential with mean `queue_mean`.
    #[default]
    Sampled,
    /// Push the warning through a simulated M/M/1 FIFO with background traffic.
    Mechanistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyParams {
    /// Uplink delay (s).
    pub uplink: f64,
    /// Downlink delay (s).
    pub downlink: f64,
    /// Driver reaction time (s).
    pub reaction_time: f64,
    /// Mean queueing delay in sampled mode (s).
    pub queue_mean: f64,
    /// Fast-slice latency range (s).
    pub fast_min: f64,
    pub fast_max: f64,
    pub queue_mode: QueueMode,
    /// Background packet arrival rate (1/s).
    pub arrival_rate: f64,
    /// Service rate of the uplink server (1/s).
    pub service_rate: f64,
    /// Length of one queue slot (s).
    pub queue_slot: f64,
    /// Background traffic simulated before t = 0 (s).
    pub warmup: f64,
    pub rounding: Rounding,
    /// Use the add-on gains even without infrastructure.
    pub nc_addon: bool,
}

impl Default for LatencyParams {
    fn default() -> Self {
        Self {
            uplink: 0.0075,
            downlink: 0.0075,
            reaction_time: 0.7,
            queue_mean: 0.05,
            fast_min: 0.005,
            fast_max: 0.015,
            queue_mode: QueueMode::Sampled,
            arrival_rate: 10.0,
            service_rate: 30.0,
            queue_slot: 0.001,
            warmup: 2.0,
            rounding: Rounding::Ceil,
            nc_addon: false,
        }
    }
}

impl LatencyParams {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut need = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        need(
            self.uplink >= 0.0 && self.uplink.is_finite(),
            format!("channel.uplink must be >= 0 (got {})", self.uplink),
        );
        need(
            self.downlink >= 0.0 && self.downlink.is_finite(),
            format!("channel.downlink must be >= 0 (got {})", self.downlink),
        );
        need(
            self.reaction_time > 0.0 && self.reaction_time.is_finite(),
            format!("channel.reaction_time must be > 0 (got {})", self.reaction_time),
        );
        need(
            self.queue_mean > 0.0 && self.queue_mean.is_finite(),
            format!("channel.queue_mean must be > 0 (got {})", self.queue_mean),
        );
        need(
            0.0 <= self.fast_min && self.fast_min <= self.fast_max && self.fast_max < 1.0,
            format!(
                "channel fast-slice range must satisfy 0 <= fast_min <= fast_max < 1 (got [{}, {}])",
                self.fast_min, self.fast_max
            ),
        );
        need(
            self.arrival_rate >= 0.0 && self.arrival_rate.is_finite(),
            format!("channel.arrival_rate must be >= 0 (got {})", self.arrival_rate),
        );
        need(
            self.service_rate > 0.0 && self.service_rate.is_finite(),
            format!("channel.service_rate must be > 0 (got {})", self.service_rate),
        );
        need(
            self.queue_slot > 0.0 && self.queue_slot.is_finite(),
            format!("channel.queue_slot must be > 0 (got {})", self.queue_slot),
        );
        need(
            self.warmup >= 0.0 && self.warmup.is_finite(),
            format!("channel.warmup must be >= 0 (got {})", self.warmup),
        );
        errs
    }
}

/// Delay until a follower learns of the danger without infrastructure.
pub fn delivery_delay_nc(params: &LatencyParams) -> f64 {
    params.reaction_time
}

/// Total LTE delay for a realized queueing delay.
pub fn delivery_delay_lte(params: &LatencyParams, queue_delay: f64) -> f64 {
    params.uplink + queue_delay + params.downlink
}

/// Exponential queueing delay used in sampled mode.
pub fn sample_queue_delay<R: Rng + ?Sized>(params: &LatencyParams, rng: &mut R) -> f64 {
    let exp = Exp::new(1.0 / params.queue_mean).expect("queue_mean validated > 0");
    exp.sample(rng)
}

/// Sliced 5G delay; the fast slice never queues.
pub fn delivery_delay_5g<R: Rng + ?Sized>(params: &LatencyParams, rng: &mut R) -> f64 {
    let fast = if params.fast_max > params.fast_min {
        rng.random_range(params.fast_min..=params.fast_max)
    } else {
        params.fast_min
    };
    params.uplink + fast + params.downlink
}

/// Whole steps until delivery. The small guard keeps `0.7 / 0.01` at 70.
pub fn delay_to_steps(delay: f64, ts: f64, rounding: Rounding) -> u64 {
    let x = delay / ts;
    let r = match rounding {
        Rounding::Ceil => (x - 1e-9).ceil(),
        Rounding::Floor => (x + 1e-9).floor(),
    };
    r.max(0.0) as u64
}

/// Per-slot packet arrivals.
#[derive(Debug, Clone, PartialEq)]
pub enum Arrivals {
    /// Poisson with the given rate (1/s), arrival instants uniform in the slot.
    Poisson { rate: f64 },
    /// Fixed counts per slot, then silence; packets arrive mid-slot.
    Scripted(Vec<u32>),
}

/// Per-slot service capacity.
#[derive(Debug, Clone, PartialEq)]
pub enum Service {
    /// Exponential service: completions form a Poisson stream of this rate.
    Exponential { rate: f64 },
    /// Exactly this many completions, evenly spaced through the slot.
    Fixed(u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Packet {
    arrival: f64,
    eligible: f64,
    tag: Option<u64>,
}

/// A packet leaving the queue.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Departure {
    pub arrival: f64,
    /// Instant service began.
    pub start: f64,
    pub departure: f64,
    pub tag: Option<u64>,
}

impl Departure {
    pub fn waiting(&self) -> f64 {
        self.start - self.arrival
    }

    pub fn sojourn(&self) -> f64 {
        self.departure - self.arrival
    }
}

/// What happened in one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    /// `a_k`
    pub arrivals: u32,
    /// `d_k`
    pub capacity: u32,
    pub departed: Vec<Departure>,
}

/// Slotted FIFO with `ℓ_{k+1} = a_k + max(ℓ_k - d_k, 0)`.
///
/// Packets arriving during slot `k` only become eligible for service at the
/// start of slot `k+1`.
#[derive(Debug, Clone)]
pub struct QueueState {
    slot_len: f64,
    origin: f64,
    slot: u64,
    fifo: VecDeque<Packet>,
    pending: VecDeque<Packet>,
    last_departure: f64,
    arrivals: Arrivals,
    service: Service,
}

impl QueueState {
    pub fn new(slot_len: f64, origin: f64, arrivals: Arrivals, service: Service) -> Result<Self> {
        if !(slot_len > 0.0 && slot_len.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "queue slot must be > 0 (got {slot_len})"
            )));
        }
        Ok(Self {
            slot_len,
            origin,
            slot: 0,
            fifo: VecDeque::new(),
            pending: VecDeque::new(),
            last_departure: f64::NEG_INFINITY,
            arrivals,
            service,
        })
    }

    /// Start time of the next slot to be simulated.
    pub fn time(&self) -> f64 {
        self.origin + self.slot as f64 * self.slot_len
    }

    pub fn slot_len(&self) -> f64 {
        self.slot_len
    }

    /// `ℓ_k`
    pub fn len(&self) -> usize {
        self.fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fifo.is_empty()
    }

    /// Packets already waiting at the current slot boundary.
    pub fn preload(&mut self, count: usize) {
        let t = self.time();
        for _ in 0..count {
            self.fifo.push_back(Packet {
                arrival: t,
                eligible: t,
                tag: None,
            });
        }
    }

    /// Queue a tagged packet that reaches the server at `time`. Packets
    /// scheduled before the current slot join at the current slot.
    pub fn schedule(&mut self, time: f64, tag: u64) {
        let p = Packet {
            arrival: time,
            eligible: f64::NAN,
            tag: Some(tag),
        };
        let at = self.pending.partition_point(|q| q.arrival <= time);
        self.pending.insert(at, p);
    }

    pub fn advance_slot<R: Rng + ?Sized>(&mut self, rng: &mut R) -> SlotOutcome {
        let t0 = self.time();
        let t1 = self.origin + (self.slot + 1) as f64 * self.slot_len;
        let dt = t1 - t0;

        let capacity = match &self.service {
            Service::Exponential { rate } => poisson_count(rate * dt, rng),
            Service::Fixed(d) => *d,
        };
        let ticks: Vec<f64> = match &self.service {
            Service::Exponential { .. } => {
                let mut t: Vec<f64> = (0..capacity).map(|_| t0 + rng.random::<f64>() * dt).collect();
                t.sort_by(f64::total_cmp);
                t
            }
            Service::Fixed(d) => (1..=*d).map(|i| t0 + dt * i as f64 / *d as f64).collect(),
        };

        let served = self.fifo.len().min(capacity as usize);
        let mut departed = Vec::with_capacity(served);
        for &tick in ticks.iter().take(served) {
            let p = self.fifo.pop_front().expect("served <= len");
            let start = p.eligible.max(self.last_departure);
            self.last_departure = tick;
            departed.push(Departure {
                arrival: p.arrival,
                start,
                departure: tick,
                tag: p.tag,
            });
        }

        let mut incoming: Vec<Packet> = match &self.arrivals {
            Arrivals::Poisson { rate } => {
                let a = poisson_count(rate * dt, rng);
                (0..a)
                    .map(|_| Packet {
                        arrival: t0 + rng.random::<f64>() * dt,
                        eligible: t1,
                        tag: None,
                    })
                    .collect()
            }
            Arrivals::Scripted(counts) => {
                let a = counts.get(self.slot as usize).copied().unwrap_or(0);
                (0..a)
                    .map(|_| Packet {
                        arrival: t0 + 0.5 * dt,
                        eligible: t1,
                        tag: None,
                    })
                    .collect()
            }
        };
        while self.pending.front().is_some_and(|p| p.arrival < t1) {
            let mut p = self.pending.pop_front().expect("checked");
            p.arrival = p.arrival.max(t0);
            p.eligible = t1;
            incoming.push(p);
        }
        incoming.sort_by(|a, b| a.arrival.total_cmp(&b.arrival));
        let arrivals = incoming.len() as u32;
        self.fifo.extend(incoming);
        self.slot += 1;

        SlotOutcome {
            arrivals,
            capacity,
            departed,
        }
    }
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as u32
}

/// Result of the time-average test on `a_k - d_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateStability {
    pub stable: bool,
    /// Mean of `a_k - d_k` per slot.
    pub average: f64,
}

pub fn rate_stability_check(arrivals: &[f64], departures: &[f64], tolerance: f64) -> Result<RateStability> {
    if arrivals.is_empty() || departures.is_empty() {
        return Err(Error::EmptyTrace);
    }
    if arrivals.len() != departures.len() {
        return Err(Error::Dimension(format!(
            "{} arrival slots vs {} departure slots",
            arrivals.len(),
            departures.len()
        )));
    }
    let sum: f64 = arrivals.iter().zip(departures).map(|(a, d)| a - d).sum();
    let average = sum / arrivals.len() as f64;
    Ok(RateStability {
        stable: average <= tolerance,
        average,
    })
}

/// A warning reaching `vehicle` at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    pub vehicle: usize,
    pub detected: u64,
    pub step: u64,
    pub delay: f64,
}

struct InFlight {
    tag: u64,
    detected: u64,
    recipients: Vec<usize>,
}

/// One warning channel with its own random streams.
pub struct Channel {
    kind: ChannelKind,
    params: LatencyParams,
    ts: f64,
    rng: ChaCha8Rng,
    queue: Option<(QueueState, ChaCha8Rng)>,
    in_flight: Vec<InFlight>,
    scheduled: Vec<Delivery>,
    next_tag: u64,
}

impl Channel {
    /// `rng` drives delay sampling, `queue_rng` the background traffic.
    pub fn new(
        kind: ChannelKind,
        params: LatencyParams,
        ts: f64,
        rng: ChaCha8Rng,
        mut queue_rng: ChaCha8Rng,
    ) -> Result<Self> {
        let errs = params.validate();
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let queue = if kind == ChannelKind::V2i && params.queue_mode == QueueMode::Mechanistic {
            let mut q = QueueState::new(
                params.queue_slot,
                -params.warmup,
                Arrivals::Poisson {
                    rate: params.arrival_rate,
                },
                Service::Exponential {
                    rate: params.service_rate,
                },
            )?;
            while q.time() < -1e-12 {
                q.advance_slot(&mut queue_rng);
            }
            Some((q, queue_rng))
        } else {
            None
        };
        Ok(Self {
            kind,
            params,
            ts,
            rng,
            queue,
            in_flight: Vec::new(),
            scheduled: Vec::new(),
            next_tag: 0,
        })
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    /// Whether the background load exceeds the server in mechanistic mode.
    pub fn overloaded(&self) -> bool {
        self.queue.is_some() && self.params.arrival_rate >= self.params.service_rate
    }

    pub fn queue_len(&self) -> usize {
        self.queue.as_ref().map_or(0, |(q, _)| q.len())
    }

    fn steps(&self, delay: f64) -> u64 {
        delay_to_steps(delay, self.ts, self.params.rounding)
    }

    /// Broadcast a danger detected at step `k` to `recipients`, ordered from
    /// the front of the platoon backwards.
    pub fn warn(&mut self, k: u64, recipients: &[usize]) {
        match self.kind {
            ChannelKind::Nc => {
                // each driver reacts to the brake lights of the car ahead
                let rt = delivery_delay_nc(&self.params);
                let r = self.steps(rt);
                for (m, &vehicle) in recipients.iter().enumerate() {
                    let hops = (m + 1) as u64;
                    self.scheduled.push(Delivery {
                        vehicle,
                        detected: k,
                        step: k + hops * r,
                        delay: hops as f64 * rt,
                    });
                }
            }
            ChannelKind::Sv2i => {
                for &vehicle in recipients {
                    let delay = delivery_delay_5g(&self.params, &mut self.rng);
                    let step = k + self.steps(delay);
                    self.scheduled.push(Delivery {
                        vehicle,
                        detected: k,
                        step,
                        delay,
                    });
                }
            }
            ChannelKind::V2i => match &mut self.queue {
                None => {
                    for &vehicle in recipients {
                        let q = sample_queue_delay(&self.params, &mut self.rng);
                        let delay = delivery_delay_lte(&self.params, q);
                        let step = k + self.steps(delay);
                        self.scheduled.push(Delivery {
                            vehicle,
                            detected: k,
                            step,
                            delay,
                        });
                    }
                }
                Some((queue, _)) => {
                    let tag = self.next_tag;
                    self.next_tag += 1;
                    queue.schedule(k as f64 * self.ts + self.params.uplink, tag);
                    self.in_flight.push(InFlight {
                        tag,
                        detected: k,
                        recipients: recipients.to_vec(),
                    });
                }
            },
        }
    }

    /// Advance background traffic through step `k`, i.e. up to time `(k+1) T_s`.
    pub fn advance(&mut self, k: u64) {
        let Some((queue, qrng)) = &mut self.queue else {
            return;
        };
        let until = (k + 1) as f64 * self.ts;
        let mut departed = Vec::new();
        while queue.time() + 0.5 * queue.slot_len() < until {
            departed.extend(queue.advance_slot(qrng).departed);
        }
        for d in departed {
            let Some(tag) = d.tag else { continue };
            let Some(pos) = self.in_flight.iter().position(|w| w.tag == tag) else {
                continue;
            };
            let w = self.in_flight.swap_remove(pos);
            let t_detect = w.detected as f64 * self.ts;
            let delay = d.departure - t_detect + self.params.downlink;
            let step = (w.detected + delay_to_steps(delay, self.ts, self.params.rounding)).max(k + 1);
            for vehicle in w.recipients {
                self.scheduled.push(Delivery {
                    vehicle,
                    detected: w.detected,
                    step,
                    delay,
                });
            }
        }
    }

    /// Remove and return every delivery due at or before step `k`.
    pub fn take_due(&mut self, k: u64) -> Vec<Delivery> {
        let (due, rest): (Vec<_>, Vec<_>) = self.scheduled.drain(..).partition(|d| d.step <= k);
        self.scheduled = rest;
        due
    }
}
