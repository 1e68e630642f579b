use std::path::PathBuf;
use std::process::Command;

use nalgebra::DMatrix;
use platoon_safety::channels::{delay_to_steps, Rounding};
use platoon_safety::dynamics::{ClosedLoopModel, GainSet, PlatoonTopology};
use platoon_safety::engine::trace_metrics;
use platoon_safety::{export, run, sweep, ChannelKind, Scenario};

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.json"));
    Scenario::load(path).unwrap()
}

fn csv_bytes(s: &Scenario, c: ChannelKind, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let t = run(s, c, seed).unwrap();
    let mut trace = Vec::new();
    let mut summary = Vec::new();
    export::write_trace_to(&mut trace, &t.records).unwrap();
    export::write_summary_to(&mut summary, std::slice::from_ref(&t.summary)).unwrap();
    (trace, summary)
}

#[test]
fn formation_holds_without_dangers() {
    let mut s = scenario("case1");
    s.dangers.events.clear();
    s.sim.noise_variance = 0.0;
    s.vehicles.initial_speed_kph = vec![80.0, 80.0];
    s.vehicles.initial_position_m = vec![0.0, -31.0];
    s.sim.horizon_s = 5.0;
    let t = run(&s, ChannelKind::Sv2i, 0).unwrap();
    assert_eq!(t.steps(), 500);
    for r in &t.records {
        assert!(r.p_err.abs() < 1e-9 && r.v_err.abs() < 1e-9, "{r:?}");
        assert_eq!(r.theta, 0);
        assert!(r.event.is_empty());
    }
}

#[test]
fn runs_are_reproducible() {
    let s = scenario("case2");
    for c in ChannelKind::ALL {
        assert_eq!(csv_bytes(&s, c, 3), csv_bytes(&s, c, 3));
    }
    assert_ne!(csv_bytes(&s, ChannelKind::V2i, 3).0, csv_bytes(&s, ChannelKind::V2i, 4).0);
}

#[test]
fn parallel_sweep_matches_serial() {
    let s = scenario("case1");
    let seeds: Vec<u64> = (0..12).collect();
    let a = sweep(&s, &ChannelKind::ALL, &seeds, true);
    let b = sweep(&s, &ChannelKind::ALL, &seeds, false);
    assert!(a.failures.is_empty());
    assert_eq!(a, b);
    assert_eq!(a.runs.len(), 36);
    for (idx, r) in a.runs.iter().enumerate() {
        assert_eq!(r.channel, ChannelKind::ALL[idx / 12]);
        assert_eq!(r.seed, (idx % 12) as u64);
        assert_eq!(*r, run(&s, r.channel, r.seed).unwrap().summary);
    }
}

#[test]
fn switching_models_splice_like_the_continuous_flow() {
    // s steps under one flag set, then the rest under another, equal the
    // exact flow of each continuous model over its interval.
    let topo = PlatoonTopology::predecessor_chain(22.0, vec![0.0, -30.0, -60.0]);
    let g = GainSet::default();
    let ts = 0.01;
    let off = ClosedLoopModel::build(&topo, &g, &[false; 3], ts).unwrap();
    let on = ClosedLoopModel::build(&topo, &g, &[false, true, true], ts).unwrap();
    let x0 = DMatrix::from_column_slice(6, 1, &[0.5, -1.0, 2.0, 0.3, 1.5, -0.7]);
    let (s, rest) = (37, 81);
    let mut x = x0.clone();
    for _ in 0..s {
        x = &off.a * &x;
    }
    for _ in 0..rest {
        x = &on.a * &x;
    }
    let exact = (&on.a_bar * (rest as f64 * ts)).exp() * (&off.a_bar * (s as f64 * ts)).exp() * x0;
    assert!((&x - &exact).amax() < 1e-10, "{}", (&x - &exact).amax());
}

#[test]
fn deliveries_land_on_rounded_steps() {
    let s = scenario("case1");
    for c in [ChannelKind::Nc, ChannelKind::Sv2i, ChannelKind::V2i] {
        let t = run(&s, c, 5).unwrap();
        assert!(!t.deliveries.is_empty());
        for d in &t.deliveries {
            let expect = d.detected + delay_to_steps(d.delay, t.ts, Rounding::Ceil);
            assert_eq!(d.step, expect, "{c}");
            assert!(t.at(d.step as usize, d.vehicle).has_event("warning"));
            assert_eq!(t.at(d.step as usize, d.vehicle).theta, 1);
        }
        let r = t.summary.r_steps.unwrap();
        assert_eq!(r, t.deliveries[0].step - t.deliveries[0].detected);
        if c == ChannelKind::Nc {
            assert_eq!(r, 70);
        }
    }
}

#[test]
fn trace_shape_and_summary_agree() {
    let s = scenario("case2");
    let t = run(&s, ChannelKind::Nc, 1).unwrap();
    assert_eq!(t.records.len(), t.steps() * t.vehicles);
    for (k, row) in t.records.chunks(t.vehicles).enumerate() {
        for (i, r) in row.iter().enumerate() {
            assert_eq!((r.step, r.vehicle), (k as u64, i));
        }
    }
    let m = trace_metrics(&t.records, t.vehicles, s.platoon.vehicle_length_m, s.sim.standstill_speed).unwrap();
    assert_eq!(m.r_steps, t.summary.r_steps);
    assert_eq!(m.max_slip, t.summary.max_slip);
    assert_eq!(m.stop_dist_m, t.summary.stop_dist_m);
    assert_eq!(m.final_gap_m, t.summary.final_gap_m);
    assert!(t.summary.collided);
    let (step, time) = m.collision.unwrap();
    assert_eq!(Some(time), t.summary.collision_t);
    assert!(t.at(step as usize, 1).has_event("collision"));
}

#[test]
fn theta_is_one_block_per_vehicle() {
    let s = scenario("case1");
    for c in ChannelKind::ALL {
        let t = run(&s, c, 2).unwrap();
        for i in 0..t.vehicles {
            let flags: Vec<u8> = t.vehicle(i).map(|r| r.theta).collect();
            let ons = flags.windows(2).filter(|w| w == &[0, 1]).count() + (flags[0] == 1) as usize;
            assert!(ons <= 1, "vehicle {i} on {c}");
        }
    }
}

#[test]
fn cli_run_sweep_and_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let case = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/case1.json");
    let bin = env!("CARGO_BIN_EXE_platoon-sim");
    let out = dir.path().join("run");
    let status = Command::new(bin)
        .args(["run", "--scenario"])
        .arg(&case)
        .args(["--channel", "v2i", "--seed", "7", "--out"])
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("step,t,vehicle,p_abs,v_abs,p_err,v_err,u_cmd,u_real,kappa_front,kappa_rear,theta,queue_len,event\n"));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("scenario,channel,seed,r_steps,delay_s,max_slip,stop_dist_m,final_gap_m,collided,collision_t\n"));
    assert!(summary.lines().nth(1).unwrap().starts_with("case1,v2i,7,"));

    let analyze = Command::new(bin)
        .args(["analyze", "--trace"])
        .arg(out.join("trace.csv"))
        .output()
        .unwrap();
    assert!(analyze.status.success());
    assert!(String::from_utf8_lossy(&analyze.stdout).contains("vehicle 1"));

    let sw = dir.path().join("sweep");
    let status = Command::new(bin)
        .args(["--ts", "0.02", "sweep", "--scenario"])
        .arg(&case)
        .args(["--channels", "nc,sv2i", "--seeds", "3", "--out"])
        .arg(&sw)
        .output()
        .unwrap()
        .status;
    assert!(status.success());
    let rows = std::fs::read_to_string(sw.join("summary.csv")).unwrap();
    assert_eq!(rows.lines().count(), 7);
    assert!(sw.join("aggregate.csv").exists());

    let bad = Command::new(bin)
        .args(["run", "--scenario", "missing.json", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("missing.json"));
}

#[test]
fn speed_never_rises_while_braking() {
    for name in ["case1", "case2"] {
        let s = scenario(name);
        let ramp = (s.abs.build_up / s.sim.ts).round() as usize;
        for c in ChannelKind::ALL {
            for seed in 0..6 {
                let t = run(&s, c, seed).unwrap();
                for i in 0..t.vehicles {
                    let rows: Vec<_> = t.vehicle(i).collect();
                    let Some(on) = rows.iter().position(|r| r.theta == 1) else { continue };
                    let stop = rows[on..]
                        .iter()
                        .position(|r| r.v_abs.abs() <= s.sim.standstill_speed)
                        .map_or(rows.len(), |d| on + d);
                    for k in (on + ramp).min(stop)..stop.saturating_sub(1) {
                        assert!(
                            rows[k + 1].v_abs <= rows[k].v_abs + 1e-12,
                            "{name} {c} seed {seed} vehicle {i} step {k}"
                        );
                    }
                }
            }
        }
    }
}
