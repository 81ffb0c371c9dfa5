use std::collections::BTreeMap;

use meshserve::config::bundled_scenario;
use meshserve::sim::{metrics, run_with, LedgerMode, Mode, RunOptions, Trace, TraceEvent};

const MODES: [Mode; 3] = [Mode::Single, Mode::Centralized, Mode::Decentralized];

#[test]
fn same_seed_same_trace() {
    let s = bundled_scenario("setting1").unwrap();
    for mode in MODES {
        let a = run_with(&s, RunOptions::new(mode).seed(3)).unwrap();
        let b = run_with(&s, RunOptions::new(mode).seed(3)).unwrap();
        assert_eq!(a.trace.to_jsonl(), b.trace.to_jsonl(), "{mode:?}");
        let c = run_with(&s, RunOptions::new(mode).seed(4)).unwrap();
        assert_ne!(a.trace.to_jsonl(), c.trace.to_jsonl(), "{mode:?}");
    }
}

#[test]
fn every_arrival_ends_exactly_once() {
    for name in ["setting1", "churn_join", "churn_leave", "quality"] {
        let s = bundled_scenario(name).unwrap();
        for mode in MODES {
            let out = run_with(&s, RunOptions::new(mode)).unwrap();
            let mut ends: BTreeMap<_, usize> = BTreeMap::new();
            let mut arrivals = 0;
            for r in &out.trace.records {
                match &r.event {
                    TraceEvent::Arrival { req, .. } => {
                        arrivals += 1;
                        ends.entry(*req).or_default();
                    }
                    TraceEvent::Complete { req, .. } | TraceEvent::Open { req, .. } => {
                        *ends.entry(*req).or_default() += 1;
                    }
                    _ => {}
                }
            }
            assert!(arrivals > 0);
            assert_eq!(ends.len(), arrivals, "{name} {mode:?}");
            assert!(ends.values().all(|n| *n == 1), "{name} {mode:?}");
        }
    }
}

#[test]
fn ledger_stays_consistent() {
    for name in ["setting1", "duel_overhead", "quality", "churn_leave"] {
        let s = bundled_scenario(name).unwrap();
        for ledger in [LedgerMode::Shared, LedgerMode::Chain] {
            let out = run_with(&s, RunOptions::new(Mode::Decentralized).ledger(ledger)).unwrap();
            assert!(out.ledger.supply_identity_holds(), "{name} {ledger}");
            assert_eq!(out.ledger.height, out.blocks.len() as u64, "{name} {ledger}");
            for w in out.blocks.windows(2) {
                assert_eq!(w[1].parent_id, w[0].block_id, "{name} {ledger}");
            }
        }
    }
}

#[test]
fn one_payment_per_delegated_completion() {
    let s = bundled_scenario("setting1").unwrap();
    let out = run_with(&s, RunOptions::new(Mode::Decentralized)).unwrap();
    let delegated = out
        .trace
        .records
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::Complete { delegated: true, .. }))
        .count();
    let payments = out
        .trace
        .records
        .iter()
        .filter(|r| matches!(r.event, TraceEvent::Payment { .. }))
        .count();
    assert!(delegated > 0);
    assert_eq!(payments, delegated);
}

#[test]
fn trace_jsonl_round_trips() {
    let s = bundled_scenario("duel_overhead").unwrap();
    let out = run_with(&s, RunOptions::new(Mode::Decentralized)).unwrap();
    let text = out.trace.to_jsonl();
    let back = Trace::from_jsonl(&text).unwrap();
    assert_eq!(back, out.trace);
    assert_eq!(back.to_jsonl(), text);
}

#[test]
fn ledger_mode_does_not_change_metrics() {
    let s = bundled_scenario("setting2").unwrap();
    let shared = run_with(&s, RunOptions::new(Mode::Decentralized)).unwrap();
    let chain = run_with(&s, RunOptions::new(Mode::Decentralized).ledger(LedgerMode::Chain)).unwrap();
    assert_eq!(
        metrics(&shared.trace, s.slo_threshold, s.window),
        metrics(&chain.trace, s.slo_threshold, s.window)
    );
    assert_eq!(shared.ledger.balances, chain.ledger.balances);
}

#[test]
fn single_mode_never_delegates() {
    let s = bundled_scenario("setting3").unwrap();
    let out = run_with(&s, RunOptions::new(Mode::Single)).unwrap();
    let report = metrics(&out.trace, s.slo_threshold, s.window);
    assert_eq!(report.delegations, 0);
    assert_eq!(report.payments, 0);
    assert!(out.trace.records.iter().all(|r| !matches!(r.event, TraceEvent::Dispatch { .. })));
}
