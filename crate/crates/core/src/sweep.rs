//! Cross product of channels and seeds, run in parallel.

use rayon::prelude::*;
use serde::Serialize;

use crate::channels::ChannelKind;
use crate::engine::{run, RunSummary};
use crate::scenario::Scenario;

/// A failed run, kept so the sweep can carry on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunFailure {
    pub channel: ChannelKind,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepResult {
    /// Channel-major, then seed order.
    pub runs: Vec<RunSummary>,
    pub failures: Vec<RunFailure>,
}

/// Mean and 95th percentile per channel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub channel: ChannelKind,
    pub runs: usize,
    pub failures: usize,
    pub r_mean: Option<f64>,
    pub r_p95: Option<f64>,
    pub max_slip_mean: Option<f64>,
    pub max_slip_p95: Option<f64>,
    pub stop_dist_mean: Option<f64>,
    pub stop_dist_p95: Option<f64>,
    pub final_gap_mean: Option<f64>,
    pub final_gap_p95: Option<f64>,
    pub collision_rate: f64,
}

pub fn sweep(scenario: &Scenario, channels: &[ChannelKind], seeds: &[u64], parallel: bool) -> SweepResult {
    let jobs: Vec<(ChannelKind, u64)> = channels
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let one = |&(c, s): &(ChannelKind, u64)| {
        run(scenario, c, s)
            .map(|t| t.summary)
            .map_err(|e| RunFailure {
                channel: c,
                seed: s,
                error: e.to_string(),
            })
    };
    let outcomes: Vec<_> = if parallel {
        jobs.par_iter().map(one).collect()
    } else {
        jobs.iter().map(one).collect()
    };
    let mut result = SweepResult::default();
    for o in outcomes {
        match o {
            Ok(s) => result.runs.push(s),
            Err(f) => result.failures.push(f),
        }
    }
    result
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Nearest-rank percentile.
pub fn percentile(v: &[f64], q: f64) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    Some(s[rank.min(s.len()) - 1])
}

pub fn aggregate(result: &SweepResult) -> Vec<Aggregate> {
    let mut channels: Vec<ChannelKind> = result
        .runs
        .iter()
        .map(|r| r.channel)
        .chain(result.failures.iter().map(|f| f.channel))
        .collect();
    channels.sort();
    channels.dedup();
    channels
        .into_iter()
        .map(|c| {
            let rows: Vec<&RunSummary> = result.runs.iter().filter(|r| r.channel == c).collect();
            let pick = |f: &dyn Fn(&RunSummary) -> Option<f64>| -> Vec<f64> { rows.iter().filter_map(|r| f(r)).collect() };
            let r = pick(&|s| s.r_steps.map(|x| x as f64));
            let slip = pick(&|s| Some(s.max_slip));
            let stop = pick(&|s| s.stop_dist_m);
            let gap = pick(&|s| Some(s.final_gap_m));
            let collided = rows.iter().filter(|s| s.collided).count();
            Aggregate {
                channel: c,
                runs: rows.len(),
                failures: result.failures.iter().filter(|f| f.channel == c).count(),
                r_mean: mean(&r),
                r_p95: percentile(&r, 95.0),
                max_slip_mean: mean(&slip),
                max_slip_p95: percentile(&slip, 95.0),
                stop_dist_mean: mean(&stop),
                stop_dist_p95: percentile(&stop, 95.0),
                final_gap_mean: mean(&gap),
                final_gap_p95: percentile(&gap, 95.0),
                collision_rate: if rows.is_empty() {
                    0.0
                } else {
                    collided as f64 / rows.len() as f64
                },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 95.0), Some(95.0));
        assert_eq!(percentile(&v, 100.0), Some(100.0));
        assert_eq!(percentile(&[3.0], 95.0), Some(3.0));
        assert_eq!(percentile(&[], 95.0), None);
    }
}
