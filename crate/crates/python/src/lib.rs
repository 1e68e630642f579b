//! Python bindings: load scenarios, run and sweep them, and call the
//! closed-form channel and braking helpers.

use nalgebra::DMatrix;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use platoon_safety::analysis::{self, BrakingEpisode};
use platoon_safety::braking::AbsParams;
use platoon_safety::channels::{self, LatencyParams, Rounding};
use platoon_safety::dynamics::{discretize_zoh, GainSet, VehicleParams};
use platoon_safety::engine::{trace_metrics, TraceRecord};
use platoon_safety::{export, ChannelKind, Error, RunSummary, SimTrace};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Csv { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn channel(name: &str) -> PyResult<ChannelKind> {
    name.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

fn rounding(name: &str) -> PyResult<Rounding> {
    match name {
        "ceil" => Ok(Rounding::Ceil),
        "floor" => Ok(Rounding::Floor),
        _ => Err(PyValueError::new_err(format!("rounding must be 'ceil' or 'floor' (got {name:?})"))),
    }
}

fn summary_dict<'py>(py: Python<'py>, s: &RunSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("scenario", &s.scenario)?;
    d.set_item("channel", s.channel.as_str())?;
    d.set_item("seed", s.seed)?;
    d.set_item("r_steps", s.r_steps)?;
    d.set_item("delay_s", s.delay_s)?;
    d.set_item("max_slip", s.max_slip)?;
    d.set_item("stop_dist_m", s.stop_dist_m)?;
    d.set_item("final_gap_m", s.final_gap_m)?;
    d.set_item("collided", s.collided)?;
    d.set_item("collision_t", s.collision_t)?;
    Ok(d)
}

/// A validated scenario.
#[pyclass(name = "Scenario", module = "platoon_safety", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: platoon_safety::Scenario,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        let inner = platoon_safety::Scenario::load(path).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (text, name = "scenario"))]
    fn from_json(text: &str, name: &str) -> PyResult<Self> {
        let inner = platoon_safety::Scenario::from_json(text, name).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn vehicles(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn channel(&self) -> &'static str {
        self.inner.channel.kind.as_str()
    }

    #[getter]
    fn ts(&self) -> f64 {
        self.inner.sim.ts
    }

    #[setter]
    fn set_ts(&mut self, ts: f64) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.sim.ts = ts;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    fn __repr__(&self) -> String {
        format!(
            "Scenario(name={:?}, vehicles={}, channel={:?}, ts={})",
            self.inner.name,
            self.inner.len(),
            self.inner.channel.kind.as_str(),
            self.inner.sim.ts
        )
    }
}

/// Result of one run.
#[pyclass(name = "Trace", module = "platoon_safety")]
struct PyTrace {
    inner: SimTrace,
}

fn column(records: &[TraceRecord], name: &str) -> PyResult<Vec<f64>> {
    let pick: fn(&TraceRecord) -> f64 = match name {
        "step" => |r| r.step as f64,
        "t" => |r| r.t,
        "vehicle" => |r| r.vehicle as f64,
        "p_abs" => |r| r.p_abs,
        "v_abs" => |r| r.v_abs,
        "p_err" => |r| r.p_err,
        "v_err" => |r| r.v_err,
        "u_cmd" => |r| r.u_cmd,
        "u_real" => |r| r.u_real,
        "kappa_front" => |r| r.kappa_front,
        "kappa_rear" => |r| r.kappa_rear,
        "theta" => |r| f64::from(r.theta),
        "queue_len" => |r| r.queue_len as f64,
        _ => return Err(PyValueError::new_err(format!("unknown numeric column {name:?}"))),
    };
    Ok(records.iter().map(pick).collect())
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn vehicles(&self) -> usize {
        self.inner.vehicles
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    #[getter]
    fn ts(&self) -> f64 {
        self.inner.ts
    }

    #[getter]
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        summary_dict(py, &self.inner.summary)
    }

    /// Values of a numeric column for one vehicle, or for all rows.
    #[pyo3(signature = (name, vehicle = None))]
    fn column(&self, name: &str, vehicle: Option<usize>) -> PyResult<Vec<f64>> {
        match vehicle {
            None => column(&self.inner.records, name),
            Some(i) if i < self.inner.vehicles => {
                let rows: Vec<TraceRecord> = self.inner.vehicle(i).cloned().collect();
                column(&rows, name)
            }
            Some(i) => Err(PyValueError::new_err(format!(
                "vehicle {i} out of range for {} vehicles",
                self.inner.vehicles
            ))),
        }
    }

    /// Event labels, one per row.
    fn events(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.event.clone()).collect()
    }

    /// Write `trace.csv` and `summary.csv` into `out`.
    fn write_csv(&self, out: std::path::PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&out).map_err(|e| PyIOError::new_err(format!("{}: {e}", out.display())))?;
        export::write_trace(out.join("trace.csv"), &self.inner).map_err(py_err)?;
        export::write_summary(out.join("summary.csv"), std::slice::from_ref(&self.inner.summary)).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(channel={:?}, seed={}, vehicles={}, steps={})",
            self.inner.summary.channel.as_str(),
            self.inner.summary.seed,
            self.inner.vehicles,
            self.inner.steps()
        )
    }
}

/// Simulate one run; `channel` defaults to the scenario's.
#[pyfunction]
#[pyo3(signature = (scenario, channel = None, seed = 0))]
fn run(py: Python<'_>, scenario: &PyScenario, channel: Option<&str>, seed: u64) -> PyResult<PyTrace> {
    let kind = match channel {
        Some(c) => self::channel(c)?,
        None => scenario.inner.channel.kind,
    };
    let s = scenario.inner.clone();
    let inner = py.detach(move || platoon_safety::run(&s, kind, seed)).map_err(py_err)?;
    Ok(PyTrace { inner })
}

/// Run seeds `0..seeds` on every listed channel; returns summary dicts in
/// channel-major order.
#[pyfunction]
#[pyo3(signature = (scenario, channels = None, seeds = 100, parallel = true))]
fn sweep<'py>(
    py: Python<'py>,
    scenario: &PyScenario,
    channels: Option<Vec<String>>,
    seeds: u64,
    parallel: bool,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let kinds = match channels {
        Some(c) => c.iter().map(|n| channel(n)).collect::<PyResult<Vec<_>>>()?,
        None => ChannelKind::ALL.to_vec(),
    };
    let s = scenario.inner.clone();
    let ids: Vec<u64> = (0..seeds).collect();
    let result = py.detach(move || platoon_safety::sweep(&s, &kinds, &ids, parallel));
    if let Some(f) = result.failures.first() {
        return Err(PyValueError::new_err(format!("{} seed {} failed: {}", f.channel, f.seed, f.error)));
    }
    result.runs.iter().map(|r| summary_dict(py, r)).collect()
}

/// Summary metrics recomputed from a trace CSV.
#[pyfunction]
#[pyo3(signature = (path, vehicle_length = 4.5, standstill = 0.05))]
fn analyze_trace<'py>(
    py: Python<'py>,
    path: std::path::PathBuf,
    vehicle_length: f64,
    standstill: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let records = export::read_trace(&path).map_err(py_err)?;
    let n = records.iter().map(|r| r.vehicle).max().map_or(0, |m| m + 1);
    let m = trace_metrics(&records, n, vehicle_length, standstill).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("vehicles", n)?;
    d.set_item("r_steps", m.r_steps)?;
    d.set_item("max_slip", m.max_slip)?;
    d.set_item("stop_dist_m", m.stop_dist_m)?;
    d.set_item("final_gap_m", m.final_gap_m)?;
    d.set_item("collision_t", m.collision.map(|c| c.1))?;
    Ok(d)
}

/// Warning delay without infrastructure (s).
#[pyfunction]
#[pyo3(signature = (reaction_time = 0.7))]
fn delay_nc(reaction_time: f64) -> f64 {
    let p = LatencyParams {
        reaction_time,
        ..LatencyParams::default()
    };
    channels::delivery_delay_nc(&p)
}

/// LTE delay for a given queueing delay (s).
#[pyfunction]
fn delay_lte(queue_delay: f64) -> f64 {
    channels::delivery_delay_lte(&LatencyParams::default(), queue_delay)
}

/// `n` sampled delays with the default latency parameters.
#[pyfunction]
#[pyo3(signature = (channel, n, seed = 0))]
fn sample_delays(channel: &str, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let kind = self::channel(channel)?;
    let p = LatencyParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| match kind {
            ChannelKind::Nc => channels::delivery_delay_nc(&p),
            ChannelKind::V2i => channels::delivery_delay_lte(&p, channels::sample_queue_delay(&p, &mut rng)),
            ChannelKind::Sv2i => channels::delivery_delay_5g(&p, &mut rng),
        })
        .collect())
}

#[pyfunction]
#[pyo3(signature = (delay, ts, rounding = "ceil"))]
fn delay_to_steps(delay: f64, ts: f64, rounding: &str) -> PyResult<u64> {
    Ok(channels::delay_to_steps(delay, ts, self::rounding(rounding)?))
}

fn matrix(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err(format!("{what} rows differ in length")));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

type Rows = Vec<Vec<f64>>;

fn nested(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Zero-order-hold discretization `(A_d, B_d)` of `dx/dt = A x + B u`.
#[pyfunction]
fn zoh(a: Rows, b: Rows, ts: f64) -> PyResult<(Rows, Rows)> {
    let (ad, bd) = discretize_zoh(&matrix(&a, "A")?, &matrix(&b, "B")?, ts).map_err(py_err)?;
    Ok((nested(&ad), nested(&bd)))
}

/// Peak slip for a deceleration magnitude with the default vehicle.
#[pyfunction]
fn max_slip(u_max: f64) -> f64 {
    analysis::max_slip(u_max, &VehicleParams::default())
}

#[allow(clippy::too_many_arguments)]
fn episode(
    delivery_steps: u64,
    standstill_step: u64,
    ts: f64,
    position: f64,
    speed: f64,
    target_gap: f64,
    kappa_max: f64,
    build_up: f64,
) -> BrakingEpisode {
    BrakingEpisode {
        detection_step: 0,
        delivery_offset: delivery_steps,
        build_up,
        standstill_step,
        ts,
        position,
        speed,
        target_gap,
        kappa_max,
    }
}

/// Slip-limited bound on the standstill gap error, default gains and vehicle.
/// Steps are counted from detection.
#[pyfunction]
#[pyo3(signature = (delivery_steps, standstill_step, position, speed, ts = 0.01, kappa_max = 0.22, build_up = 0.1))]
#[allow(clippy::too_many_arguments)]
fn relative_distance_bound(
    delivery_steps: u64,
    standstill_step: u64,
    position: f64,
    speed: f64,
    ts: f64,
    kappa_max: f64,
    build_up: f64,
) -> PyResult<f64> {
    let ep = episode(delivery_steps, standstill_step, ts, position, speed, 0.0, kappa_max, build_up);
    analysis::relative_distance_bound(&ep, &GainSet::default(), &VehicleParams::default()).map_err(py_err)
}

/// Deceleration needed to stop at `target_gap`, and whether the tire allows it.
#[pyfunction]
#[pyo3(signature = (delivery_steps, standstill_step, position, speed, target_gap, ts = 0.01, build_up = 0.1))]
#[allow(clippy::too_many_arguments)]
fn required_deceleration<'py>(
    py: Python<'py>,
    delivery_steps: u64,
    standstill_step: u64,
    position: f64,
    speed: f64,
    target_gap: f64,
    ts: f64,
    build_up: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let abs = AbsParams {
        build_up,
        ..AbsParams::default()
    };
    let ep = episode(delivery_steps, standstill_step, ts, position, speed, target_gap, abs.kappa_sat, build_up);
    let r = analysis::required_deceleration(&ep, &GainSet::default(), &VehicleParams::default(), &abs)
        .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("u_required", r.u_required)?;
    d.set_item("magnitude", r.magnitude)?;
    d.set_item("attainable", r.attainable)?;
    d.set_item("feasible", r.feasible)?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "platoon_safety")]
fn python_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyTrace>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_trace, m)?)?;
    m.add_function(wrap_pyfunction!(delay_nc, m)?)?;
    m.add_function(wrap_pyfunction!(delay_lte, m)?)?;
    m.add_function(wrap_pyfunction!(sample_delays, m)?)?;
    m.add_function(wrap_pyfunction!(delay_to_steps, m)?)?;
    m.add_function(wrap_pyfunction!(zoh, m)?)?;
    m.add_function(wrap_pyfunction!(max_slip, m)?)?;
    m.add_function(wrap_pyfunction!(relative_distance_bound, m)?)?;
    m.add_function(wrap_pyfunction!(required_deceleration, m)?)?;
    m.add("CHANNELS", ChannelKind::ALL.map(ChannelKind::as_str).to_vec())?;
    Ok(())
}
