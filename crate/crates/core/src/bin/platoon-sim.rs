use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use platoon_safety::analysis::{max_slip, relative_distance_bound};
use platoon_safety::engine::{episodes, trace_metrics};
use platoon_safety::{aggregate, export, run, sweep, ChannelKind, Error, Scenario};

#[derive(Parser)]
#[command(name = "platoon-sim", version, about = "Platoon braking simulator with NC / V2I / SV2I warning channels")]
struct Cli {
    /// Override the sampling time (s).
    #[arg(long, global = true)]
    ts: Option<f64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run and write trace.csv and summary.csv.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Defaults to the channel named in the scenario.
        #[arg(long)]
        channel: Option<ChannelKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every channel for seeds 0..n and write summary.csv and aggregate.csv.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = ChannelKind::ALL)]
        channels: Vec<ChannelKind>,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run on one thread.
        #[arg(long)]
        serial: bool,
    },
    /// Recompute braking metrics and bounds from a trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Scenario providing vehicle, gain and ABS parameters; defaults otherwise.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

fn load(path: &Path, ts: Option<f64>) -> Result<Scenario, Error> {
    let mut s = Scenario::load(path)?;
    if let Some(ts) = ts {
        s.sim.ts = ts;
        s.validate()?;
    }
    Ok(s)
}

fn out_dir(dir: &Path) -> Result<(), Error> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

fn execute(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run {
            scenario,
            channel,
            seed,
            out,
        } => {
            let s = load(&scenario, cli.ts)?;
            let channel = channel.unwrap_or(s.channel.kind);
            let trace = run(&s, channel, seed)?;
            out_dir(&out)?;
            export::write_trace(out.join("trace.csv"), &trace)?;
            export::write_summary(out.join("summary.csv"), std::slice::from_ref(&trace.summary))?;
            let r = &trace.summary;
            println!(
                "{} {} seed {}: r = {} steps, max slip {:.4}, stop {} m, final gap {:.2} m, collision {}",
                r.scenario,
                r.channel,
                r.seed,
                r.r_steps.map_or("-".into(), |x| x.to_string()),
                r.max_slip,
                fmt_opt(r.stop_dist_m),
                r.final_gap_m,
                fmt_opt(r.collision_t)
            );
        }
        Command::Sweep {
            scenario,
            channels,
            seeds,
            out,
            serial,
        } => {
            let s = load(&scenario, cli.ts)?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let result = sweep(&s, &channels, &seeds, !serial);
            out_dir(&out)?;
            export::write_summary(out.join("summary.csv"), &result.runs)?;
            let agg = aggregate(&result);
            export::write_aggregate(out.join("aggregate.csv"), &agg)?;
            for f in &result.failures {
                eprintln!("run {} seed {} failed: {}", f.channel, f.seed, f.error);
            }
            for a in &agg {
                println!(
                    "{:>5}: runs {:>4}  r mean {}  slip mean {} p95 {}  collision rate {:.2}",
                    a.channel,
                    a.runs,
                    fmt_opt(a.r_mean),
                    fmt_opt(a.max_slip_mean),
                    fmt_opt(a.max_slip_p95),
                    a.collision_rate
                );
            }
        }
        Command::Analyze { trace, scenario } => {
            let records = export::read_trace(&trace)?;
            let vehicles = records.iter().map(|r| r.vehicle).max().map_or(0, |m| m + 1);
            let s = match scenario {
                Some(p) => Some(load(&p, cli.ts)?),
                None => None,
            };
            let params = s.as_ref().map(|s| s.vehicles.params).unwrap_or_default();
            let abs = s.as_ref().map(|s| s.abs).unwrap_or_default();
            let gains = s.as_ref().map(|s| s.gains.clone()).unwrap_or_default();
            let length = s.as_ref().map_or(4.5, |s| s.platoon.vehicle_length_m);
            let standstill = s.as_ref().map_or(0.05, |s| s.sim.standstill_speed);
            let ts = match records.iter().find(|r| r.step == 1) {
                Some(r) => r.t,
                None => cli.ts.unwrap_or(0.01),
            };
            let m = trace_metrics(&records, vehicles, length, standstill)?;
            println!("vehicles {vehicles}, steps {}", records.len() / vehicles.max(1));
            println!(
                "r = {} steps, max slip {:.4}, stop {} m, final gap {:.2} m, collision {}",
                m.r_steps.map_or("-".into(), |x| x.to_string()),
                m.max_slip,
                fmt_opt(m.stop_dist_m),
                m.final_gap_m,
                fmt_opt(m.collision.map(|c| c.1))
            );
            for e in episodes(&records, vehicles, ts, abs.build_up, standstill, abs.kappa_sat) {
                let bound = relative_distance_bound(&e.episode, &gains, &params)?;
                println!(
                    "vehicle {}: r {} steps, standstill step {}, |u_cmd| max {:.3}, slip from it {:.4}, gap {:.3} m vs bound {:.3} m",
                    e.vehicle,
                    e.episode.delivery_offset,
                    e.episode.standstill_step,
                    e.max_u_cmd,
                    max_slip(e.max_u_real, &params),
                    e.gap_err,
                    bound
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
