//! Metrics as a pure function of a trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::credits::Credits;
use crate::duel::Verdict;
use crate::ids::NodeId;
use crate::node::RequestKind;
use crate::sim::trace::{Trace, TraceEvent};

const MICROS: f64 = 1e6;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    /// Latency at every percentile 0, 1, …, 100.
    pub cdf: Vec<f64>,
}

/// Nearest-rank percentile of a sorted slice.
fn percentile(sorted: &[f64], pct: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((pct / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyStats {
    pub fn from_samples(mut xs: Vec<f64>) -> Self {
        if xs.is_empty() {
            return LatencyStats::default();
        }
        xs.sort_by(f64::total_cmp);
        LatencyStats {
            count: xs.len(),
            mean: xs.iter().sum::<f64>() / xs.len() as f64,
            p50: percentile(&xs, 50.0),
            p90: percentile(&xs, 90.0),
            p99: percentile(&xs, 99.0),
            cdf: (0..=100).map(|p| percentile(&xs, f64::from(p))).collect(),
        }
    }
}

/// Completed requests bucketed by submit time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowPoint {
    pub start: f64,
    pub completed: u64,
    pub slo_met: u64,
    pub slo_attainment: f64,
    pub mean_latency: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CreditPoint {
    pub t: f64,
    pub free: Credits,
    pub staked: Credits,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    /// Finished executions by kind.
    pub served_user: u64,
    pub served_delegated: u64,
    pub served_challenge: u64,
    pub served_judge: u64,
    pub probes_received: u64,
    pub probes_accepted: u64,
    pub duels: u64,
    pub duel_wins: u64,
    pub duel_win_rate: f64,
    pub credits: Vec<CreditPoint>,
}

impl NodeMetrics {
    pub fn terminal_credit(&self) -> Credits {
        self.credits
            .last()
            .map(|c| c.free.saturating_add(c.staked))
            .unwrap_or(Credits::ZERO)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub user_requests: u64,
    pub completed: u64,
    pub open_at_horizon: u64,
    pub slo_met: u64,
    /// Over completed user requests; 0 when nothing completed.
    pub slo_attainment: f64,
    pub latency: LatencyStats,
    pub windows: Vec<WindowPoint>,
    pub per_node: BTreeMap<NodeId, NodeMetrics>,
    /// User requests handed to another node by the protocol.
    pub delegations: u64,
    /// Delegations over user requests.
    pub alpha: f64,
    pub duels_opened: u64,
    pub duels_skipped: u64,
    pub duels_settled: u64,
    pub draws: u64,
    /// Challenger and judge requests dispatched.
    pub extra_duel_requests: u64,
    pub payments: u64,
}

/// Computes the report. A user request meets the SLO iff its completion
/// latency is at most `slo_threshold` seconds; open requests count in
/// neither numerator nor denominator.
pub fn metrics(trace: &Trace, slo_threshold: f64, window: f64) -> MetricsReport {
    let mut r = MetricsReport::default();
    let mut latencies = Vec::new();
    let mut buckets: BTreeMap<u64, (u64, u64, f64)> = BTreeMap::new();
    let slo_us = (slo_threshold * MICROS).round() as u64;
    let window_us = ((window * MICROS).round() as u64).max(1);
    for rec in &trace.records {
        match &rec.event {
            TraceEvent::Arrival { .. } => r.user_requests += 1,
            TraceEvent::Complete { submit, .. } => {
                let lat_us = rec.t.saturating_sub(*submit);
                let met = lat_us <= slo_us;
                let lat = lat_us as f64 / MICROS;
                r.completed += 1;
                r.slo_met += u64::from(met);
                latencies.push(lat);
                let b = buckets.entry(submit / window_us).or_default();
                b.0 += 1;
                b.1 += u64::from(met);
                b.2 += lat;
            }
            TraceEvent::Open { .. } => r.open_at_horizon += 1,
            TraceEvent::Dispatch { kind, .. } => match kind {
                RequestKind::Delegated => r.delegations += 1,
                RequestKind::DuelChallenge | RequestKind::JudgeEval => r.extra_duel_requests += 1,
                RequestKind::User => {}
            },
            TraceEvent::Finish { node, kind, .. } => {
                let m = r.per_node.entry(node.clone()).or_default();
                match kind {
                    RequestKind::User => m.served_user += 1,
                    RequestKind::Delegated => m.served_delegated += 1,
                    RequestKind::DuelChallenge => m.served_challenge += 1,
                    RequestKind::JudgeEval => m.served_judge += 1,
                }
            }
            TraceEvent::Probe { to, reply, .. } => {
                let m = r.per_node.entry(to.clone()).or_default();
                m.probes_received += 1;
                m.probes_accepted += u64::from(*reply == crate::scheduler::ProbeReply::Accept);
            }
            TraceEvent::Payment { .. } => r.payments += 1,
            TraceEvent::DuelOpen { .. } => r.duels_opened += 1,
            TraceEvent::DuelSkipped { .. } => r.duels_skipped += 1,
            TraceEvent::Duel {
                incumbent,
                challenger,
                declared,
                ..
            } => {
                r.duels_settled += 1;
                if *declared == Verdict::Draw {
                    r.draws += 1;
                }
                for node in [incumbent, challenger] {
                    let m = r.per_node.entry(node.clone()).or_default();
                    m.duels += 1;
                    m.duel_wins += u64::from(*declared == Verdict::Winner(node.clone()));
                }
            }
            TraceEvent::Sample {
                node, free, staked, ..
            } => {
                r.per_node.entry(node.clone()).or_default().credits.push(CreditPoint {
                    t: rec.t as f64 / MICROS,
                    free: *free,
                    staked: *staked,
                });
            }
            _ => {}
        }
    }
    for m in r.per_node.values_mut() {
        if m.duels > 0 {
            m.duel_win_rate = m.duel_wins as f64 / m.duels as f64;
        }
    }
    if r.completed > 0 {
        r.slo_attainment = r.slo_met as f64 / r.completed as f64;
    }
    if r.user_requests > 0 {
        r.alpha = r.delegations as f64 / r.user_requests as f64;
    }
    r.windows = buckets
        .into_iter()
        .map(|(k, (n, met, lat))| WindowPoint {
            start: (k * window_us) as f64 / MICROS,
            completed: n,
            slo_met: met,
            slo_attainment: met as f64 / n as f64,
            mean_latency: lat / n as f64,
        })
        .collect();
    r.latency = LatencyStats::from_samples(latencies);
    r
}

/// Windowed series as CSV.
pub fn windows_csv(report: &MetricsReport) -> String {
    let mut out = String::from("window_start,completed,slo_met,slo_attainment,mean_latency\n");
    for w in &report.windows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            w.start, w.completed, w.slo_met, w.slo_attainment, w.mean_latency
        ));
    }
    out
}

/// Per-node credit trajectories as CSV.
pub fn credits_csv(report: &MetricsReport) -> String {
    let mut out = String::from("t,node,free,staked,total\n");
    let mut rows: Vec<(u64, &NodeId, &CreditPoint)> = report
        .per_node
        .iter()
        .flat_map(|(n, m)| m.credits.iter().map(move |c| ((c.t * MICROS) as u64, n, c)))
        .collect();
    rows.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    for (_, n, c) in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            c.t,
            n,
            c.free,
            c.staked,
            c.free.saturating_add(c.staked)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete(t_s: f64, submit_s: f64, req: u64) -> (u64, TraceEvent) {
        (
            (t_s * MICROS) as u64,
            TraceEvent::Complete {
                req,
                origin: "a".into(),
                executor: "a".into(),
                submit: (submit_s * MICROS) as u64,
                delegated: false,
            },
        )
    }

    fn arrival(req: u64) -> (u64, TraceEvent) {
        (
            0,
            TraceEvent::Arrival {
                req,
                node: "a".into(),
                prompt_tokens: 1,
                output_tokens: 1,
            },
        )
    }

    fn trace(events: Vec<(u64, TraceEvent)>) -> Trace {
        let mut t = Trace::default();
        for (at, ev) in events {
            t.push(at, ev);
        }
        t
    }

    #[test]
    fn hand_built_three_of_five() {
        let mut evs: Vec<_> = (0..5).map(arrival).collect();
        evs.extend([
            complete(1.0, 0.0, 0),
            complete(2.0, 0.0, 1),
            complete(10.0, 0.0, 2),
            complete(20.0, 0.0, 3),
            complete(30.0, 0.0, 4),
        ]);
        let r = metrics(&trace(evs), 10.0, 30.0);
        assert_eq!(r.completed, 5);
        assert!((r.slo_attainment - 0.6).abs() < 1e-12);
        assert!((r.latency.mean - 12.6).abs() < 1e-9);
        assert_eq!(r.latency.p50, 10.0);
        // All five were submitted at t = 0, so they share the first window
        // even though two finish after it.
        assert_eq!(r.windows.len(), 1);
        assert_eq!((r.windows[0].completed, r.windows[0].slo_met), (5, 3));
    }

    #[test]
    fn instant_requests_attain_one() {
        let r = metrics(&trace(vec![arrival(0), complete(0.0, 0.0, 0)]), 1.0, 30.0);
        assert_eq!(r.slo_attainment, 1.0);
    }

    #[test]
    fn no_completions_is_zero_with_open_count() {
        let r = metrics(
            &trace(vec![
                arrival(0),
                (
                    5,
                    TraceEvent::Open {
                        req: 0,
                        node: "a".into(),
                    },
                ),
            ]),
            1.0,
            30.0,
        );
        assert_eq!(r.slo_attainment, 0.0);
        assert_eq!(r.open_at_horizon, 1);
        assert_eq!(r.completed, 0);
    }

    #[test]
    fn percentile_nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 99.0), 99.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 100.0), 100.0);
    }
}
