//! Headless acceptance checks, one verdict per criterion.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{bundled_scenario, parse_theory_str, THEORY_BUNDLED};
use crate::credits::Credits;
use crate::gossip::{gossip_round, local_tick, merge, register_join, views_identical, GossipConfig, PeerRecord, PeerStatus, PeerView};
use crate::ids::{NodeId, SimTime};
use crate::ledger::{
    finalize, majority_threshold, propose_block, validate_block, Chain, CreditBlock, CreditOperation, Finality,
    KeyedHashKeys, OpKind, Reject, Vote,
};
use crate::node::RequestKind;
use crate::sim::{metrics, run_with, LedgerMode, MetricsReport, Mode, RunOptions, Scenario, TraceEvent};
use crate::theory::{
    cross_validate, detect_equilibrium, group_share_derivative, integrate,
    share_derivative, TheoryParams,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u32,
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ValidateOptions {
    /// Corrupts one block of the chain the ledger check expects to verify.
    pub inject_tamper: bool,
}

pub const CRITERIA: [(u32, &str); 11] = [
    (1, "scheduling efficiency"),
    (2, "stake-proportional routing"),
    (3, "acceptance and offload ablations"),
    (4, "duel overhead"),
    (5, "quality incentivization"),
    (6, "theory self-consistency"),
    (7, "theory-simulation bridge"),
    (8, "ledger properties"),
    (9, "gossip properties"),
    (10, "churn"),
    (11, "determinism"),
];

struct Check {
    passed: bool,
    detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Check {
            passed,
            detail: detail.into(),
        }
    }
}

pub fn run_criterion(id: u32, opts: ValidateOptions) -> Option<CriterionResult> {
    let name = CRITERIA.iter().find(|(i, _)| *i == id)?.1;
    let t0 = Instant::now();
    let check = match id {
        1 => scheduling_efficiency(),
        2 => stake_routing(),
        3 => ablations(),
        4 => duel_overhead(),
        5 => quality_incentive(),
        6 => theory_consistency(),
        7 => theory_bridge(),
        8 => ledger_properties(opts.inject_tamper),
        9 => gossip_properties(),
        10 => churn(),
        11 => determinism(),
        _ => return None,
    };
    Some(CriterionResult {
        id,
        name: name.to_string(),
        passed: check.passed,
        detail: check.detail,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

pub fn run_all(opts: ValidateOptions) -> Vec<CriterionResult> {
    CRITERIA
        .iter()
        .filter_map(|(id, _)| run_criterion(*id, opts))
        .collect()
}

/// Machine-readable report: `{"passed": bool, "criteria": [...]}`.
pub fn report_json(results: &[CriterionResult]) -> serde_json::Value {
    serde_json::json!({
        "version": crate::VERSION,
        "passed": results.iter().all(|r| r.passed),
        "criteria": results,
    })
}

fn scenario(name: &str) -> Scenario {
    bundled_scenario(name).unwrap_or_else(|e| panic!("bundled scenario {name}: {e}"))
}

fn reports(s: &Scenario, mode: Mode, seeds: &[u64]) -> Vec<MetricsReport> {
    seeds
        .par_iter()
        .map(|&seed| {
            let out = run_with(s, RunOptions::new(mode).seed(seed)).expect("bundled scenario is valid");
            metrics(&out.trace, s.slo_threshold, s.window)
        })
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn scheduling_efficiency() -> Check {
    let s = scenario("setting1");
    let t0 = Instant::now();
    let seeds = seeds(10);
    let by_mode: BTreeMap<Mode, (f64, f64)> = Mode::ALL
        .into_iter()
        .map(|m| {
            let r = reports(&s, m, &seeds);
            (
                m,
                (
                    mean(r.iter().map(|r| r.slo_attainment)),
                    mean(r.iter().map(|r| r.latency.mean)),
                ),
            )
        })
        .collect();
    let elapsed = t0.elapsed().as_secs_f64();
    let (single, central, dec) = (
        by_mode[&Mode::Single],
        by_mode[&Mode::Centralized],
        by_mode[&Mode::Decentralized],
    );
    let passed = dec.0 >= single.0 + 0.05 && central.0 - dec.0 <= 0.10 && dec.1 < single.1 && elapsed <= 60.0;
    Check::new(
        passed,
        format!(
            "SLO single {:.3} centralized {:.3} decentralized {:.3}; mean latency single {:.1}s decentralized {:.1}s; {elapsed:.1}s",
            single.0, central.0, dec.0, single.1, dec.1
        ),
    )
}

fn executors(s: &Scenario) -> Vec<NodeId> {
    s.nodes
        .iter()
        .filter(|n| !n.model.is_requester_only())
        .map(|n| n.id.clone())
        .collect()
}

fn stake_routing() -> Check {
    let s = scenario("stake_routing");
    let r = &reports(&s, Mode::Decentralized, &[s.seed])[0];
    let ids = executors(&s);
    let stakes: Vec<f64> = s
        .nodes
        .iter()
        .filter(|n| ids.contains(&n.id))
        .map(|n| n.server.stake_amount.to_f64())
        .collect();
    let stake_total: f64 = stakes.iter().sum();
    let served: Vec<u64> = ids
        .iter()
        .map(|id| r.per_node.get(id).map_or(0, |m| m.served_delegated))
        .collect();
    let total: u64 = served.iter().sum();
    let mut passed = total >= 2000;
    let mut parts = Vec::new();
    for ((id, n), stake) in ids.iter().zip(&served).zip(&stakes) {
        let share = *n as f64 / total.max(1) as f64;
        let target = stake / stake_total;
        passed &= ((share - target) / target).abs() <= 0.10;
        parts.push(format!("{id} {share:.3}/{target:.1}"));
    }
    Check::new(passed, format!("{total} delegated; {}", parts.join(", ")))
}

fn ablations() -> Check {
    let seeds = seeds(10);
    let accept = scenario("accept_ablation");
    let ids = executors(&accept);
    let runs = reports(&accept, Mode::Decentralized, &seeds);
    let counts: Vec<u64> = ids
        .iter()
        .map(|id| {
            runs.iter()
                .map(|r| r.per_node.get(id).map_or(0, |m| m.served_delegated))
                .sum()
        })
        .collect();
    let accept_ok = counts.windows(2).all(|w| w[0] < w[1]);

    let base = scenario("offload_ablation");
    let levels = [0.25, 0.5, 0.75, 1.0];
    let slo: Vec<f64> = levels
        .iter()
        .map(|&f| {
            let mut s = base.clone();
            for n in &mut s.nodes {
                n.server.offload_frequency = f;
            }
            mean(reports(&s, Mode::Decentralized, &seeds).iter().map(|r| r.slo_attainment))
        })
        .collect();
    let monotone = slo.windows(2).all(|w| w[1] >= w[0]);
    let early_gain = slo[1] - slo[0];
    let late_gain = slo[3] - slo[1];
    let offload_ok = monotone && late_gain < early_gain;
    Check::new(
        accept_ok && offload_ok,
        format!(
            "accepted {counts:?}; SLO by offload {:?}; gain 0.25->0.5 {early_gain:.4}, 0.5->1.0 {late_gain:.4}",
            slo.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>()
        ),
    )
}

fn duel_overhead() -> Check {
    let s = scenario("duel_overhead");
    let r = &reports(&s, Mode::Decentralized, &[s.seed])[0];
    let n = r.user_requests as f64;
    let predicted = n * r.alpha * s.duel.p_d * (1 + s.duel.judges) as f64;
    let ratio = r.extra_duel_requests as f64 / predicted;
    let overhead_ok = r.delegations >= 2000 && (0.95..=1.05).contains(&ratio);

    let seeds = seeds(10);
    let curves: Vec<(f64, f64)> = ["duel_pd_005", "duel_pd_010", "duel_pd_025"]
        .iter()
        .map(|name| {
            let s = scenario(name);
            let slo = mean(reports(&s, Mode::Decentralized, &seeds).iter().map(|r| r.slo_attainment));
            (s.duel.p_d, slo)
        })
        .collect();
    let lo = curves.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    let hi = curves.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let spread_ok = hi - lo <= 0.05;
    Check::new(
        overhead_ok && spread_ok,
        format!(
            "{} delegations, measured {} vs predicted {predicted:.0} (ratio {ratio:.4}); SLO by p_d {}; spread {:.4}",
            r.delegations,
            r.extra_duel_requests,
            curves
                .iter()
                .map(|(p, s)| format!("{p}:{s:.4}"))
                .collect::<Vec<_>>()
                .join(" "),
            hi - lo
        ),
    )
}

fn quality_incentive() -> Check {
    let s = scenario("quality");
    let mut classes: BTreeMap<u64, Vec<NodeId>> = BTreeMap::new();
    for n in s.nodes.iter().filter(|n| !n.model.is_requester_only()) {
        classes.entry((n.quality * 1000.0).round() as u64).or_default().push(n.id.clone());
    }
    let runs: Vec<_> = seeds(5)
        .par_iter()
        .map(|&seed| run_with(&s, RunOptions::new(Mode::Decentralized).seed(seed)).expect("valid"))
        .collect();
    // Highest quality first.
    let mut rows = Vec::new();
    for (q, ids) in classes.iter().rev() {
        let (mut wins, mut duels, mut credit) = (0u64, 0u64, 0.0);
        for out in &runs {
            let r = metrics(&out.trace, s.slo_threshold, s.window);
            for id in ids {
                if let Some(m) = r.per_node.get(id) {
                    wins += m.duel_wins;
                    duels += m.duels;
                }
                credit += out.ledger.balance_of(id).total().to_f64();
            }
        }
        let rate = wins as f64 / duels.max(1) as f64;
        rows.push((*q as f64 / 1000.0, rate, credit / (ids.len() * runs.len()) as f64));
    }
    let rates_ok = rows.windows(2).all(|w| w[0].1 - w[1].1 >= 0.05);
    let credit_ok = rows.windows(2).all(|w| w[0].2 > w[1].2);
    Check::new(
        rates_ok && credit_ok,
        rows.iter()
            .map(|(q, r, c)| format!("q {q}: win rate {r:.3}, credit {c:.1}"))
            .collect::<Vec<_>>()
            .join("; "),
    )
}

/// Random valid theory parameters and a random interior share vector.
fn random_state(rng: &mut ChaCha8Rng) -> (TheoryParams, Vec<f64>, f64) {
    let n = rng.random_range(2..=8);
    let params = TheoryParams {
        q: (0..n).map(|_| rng.random_range(0.0..=1.0)).collect(),
        c: (0..n).map(|_| rng.random_range(0.01..1.0)).collect(),
        lambda: rng.random_range(0.5..50.0),
        r: rng.random_range(0.0..3.0),
        p_d: rng.random_range(0.0..=1.0),
        r_add: rng.random_range(0.0..5.0),
        penalty: rng.random_range(0.0..5.0),
        eta: rng.random_range(0.1..3.0),
        s0: vec![1.0; n],
    };
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let p = raw.iter().map(|x| x / total).collect();
    (params, p, rng.random_range(1.0..1000.0))
}

fn random_group(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    loop {
        let g: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.5)).collect();
        if !g.is_empty() && g.len() < n {
            return g;
        }
    }
}

fn theory_consistency() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_sum = 0.0_f64;
    for _ in 0..10_000 {
        let (params, p, total) = random_state(&mut rng);
        let d: f64 = share_derivative(&p, total, &params).iter().sum();
        worst_sum = worst_sum.max(d.abs());
    }
    let mut worst_group = 0.0_f64;
    for _ in 0..1000 {
        let (params, p, total) = random_state(&mut rng);
        let h = random_group(p.len(), &mut rng);
        let per_node = share_derivative(&p, total, &params);
        let summed: f64 = h.iter().map(|&i| per_node[i]).sum();
        worst_group = worst_group.max((group_share_derivative(&h, &p, total, &params) - summed).abs());
    }

    let two = parse_theory_str(THEORY_BUNDLED.iter().find(|(n, _)| *n == "two_node").expect("bundled").1)
        .expect("bundled theory file parses");
    let traj = integrate(&two.params, two.horizon, two.dt).expect("integrates");
    let increasing = traj.windows(2).all(|w| w[1].p[0] > w[0].p[0]);
    let order = rk4_order(&two.params);

    let (mut qualifying, mut detected) = (0, 0);
    for _ in 0..60 {
        let (mut params, _, _) = random_state(&mut rng);
        params.s0 = (0..params.n()).map(|_| rng.random_range(1.0..100.0)).collect();
        let h = random_group(params.n(), &mut rng);
        let Ok(traj) = integrate(&params, 10.0, 0.05) else { continue };
        let min_gap = traj
            .iter()
            .map(|pt| group_gap(&h, &pt.p, &pt.delta))
            .fold(f64::INFINITY, f64::min);
        if min_gap > 0.0 {
            qualifying += 1;
            detected += u64::from(detect_equilibrium(&traj, &h).monotone_after == Some(0.0));
        }
    }
    let passed = worst_sum <= 1e-12
        && worst_group <= 1e-10
        && increasing
        && order >= 3.5
        && qualifying > 0
        && detected == qualifying;
    Check::new(
        passed,
        format!(
            "max |sum p'| {worst_sum:.2e}; max group residual {worst_group:.2e}; p_1 increasing {increasing}; RK4 order {order:.2}; detector {detected}/{qualifying}"
        ),
    )
}

/// `Δ̄_H − Δ̄_¬H` at one state.
fn group_gap(h: &[usize], p: &[f64], delta: &[f64]) -> f64 {
    let (mut ph, mut wh, mut po, mut wo) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if h.contains(&i) {
            ph += p[i];
            wh += p[i] * delta[i];
        } else {
            po += p[i];
            wo += p[i] * delta[i];
        }
    }
    if ph <= 0.0 || po <= 0.0 {
        return 0.0;
    }
    wh / ph - wo / po
}

/// Observed convergence order from terminal shares at three step sizes.
pub fn rk4_order(params: &TheoryParams) -> f64 {
    let terminal = |dt: f64| integrate(params, 10.0, dt).expect("integrates").last().expect("non-empty").p[0];
    let (a, b, c) = (terminal(0.5), terminal(0.25), terminal(0.125));
    ((a - b).abs() / (b - c).abs()).log2()
}

fn theory_bridge() -> Check {
    let cfg = parse_theory_str(THEORY_BUNDLED.iter().find(|(n, _)| *n == "bridge").expect("bundled").1)
        .expect("bundled theory file parses");
    match cross_validate(&cfg.params, &cfg.bridge, cfg.horizon, cfg.dt, cfg.seeds) {
        Ok(x) => Check::new(
            x.gap <= 0.05 && x.ordering_agrees,
            format!(
                "gap {:.4} at t = {} over {} seeds; terminal theory {:?} simulation {:?}",
                x.gap,
                x.gap_at,
                x.seeds,
                round3(&x.theory_terminal),
                round3(&x.sim_terminal)
            ),
        ),
        Err(e) => Check::new(false, e.to_string()),
    }
}

fn round3(xs: &[f64]) -> Vec<f64> {
    xs.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}

/// Builds a chain of random valid blocks over `nodes`, checking the supply
/// identity after every block. Returns the chain and whether the identity
/// held throughout.
pub fn random_chain(
    rng: &mut ChaCha8Rng,
    nodes: &[NodeId],
    keys: &KeyedHashKeys,
    blocks: usize,
) -> (Chain, bool) {
    let mut chain = Chain::new();
    let grants = nodes
        .iter()
        .map(|n| CreditOperation::genesis_grant(n.clone(), Credits::from_whole(rng.random_range(10..1000))))
        .collect();
    let genesis = propose_block(grants, &nodes[0], keys, chain.head(), 0).expect("genesis");
    chain.append(genesis, keys).expect("genesis is valid");
    let mut identity = chain.state().supply_identity_holds();
    let mut serial = 0u64;
    while chain.blocks().len() < blocks {
        let count = rng.random_range(1..=5);
        let ops: Vec<CreditOperation> = (0..count)
            .map(|_| {
                serial += 1;
                let a = nodes.choose(rng).expect("nodes").clone();
                let b = nodes.iter().filter(|n| **n != a).collect::<Vec<_>>().choose(rng).map(|n| (*n).clone()).unwrap_or_else(|| a.clone());
                let amount = Credits::from_micros(rng.random_range(1..50_000_000));
                match rng.random_range(0..6) {
                    0 => CreditOperation::stake_lock(a, amount),
                    1 => CreditOperation::stake_release(a, amount),
                    2 => CreditOperation::offload_payment(a, b, amount, serial),
                    3 => CreditOperation::duel_win_reward(a, amount, serial),
                    4 => CreditOperation::duel_penalty(a, amount, serial),
                    _ => CreditOperation::judge_reward(a, amount, serial),
                }
            })
            .collect();
        let proposer = nodes.choose(rng).expect("nodes");
        let ts = chain.blocks().len() as u64 * 10;
        let block = propose_block(ops, proposer, keys, chain.head(), ts).expect("well-formed");
        if chain.append(block, keys).is_ok() {
            identity &= chain.state().supply_identity_holds();
        }
    }
    (chain, identity)
}

/// Changes exactly one field of `block` and names it.
pub fn tamper_block(block: &mut CreditBlock, rng: &mut ChaCha8Rng, nodes: &[NodeId]) -> &'static str {
    let other = |current: &NodeId, rng: &mut ChaCha8Rng| -> NodeId {
        let pool: Vec<&NodeId> = nodes.iter().filter(|n| *n != current).collect();
        pool.choose(rng).map(|n| (*n).clone()).unwrap_or_else(|| NodeId::new("mallory"))
    };
    let op_index = rng.random_range(0..block.operations.len());
    match rng.random_range(0..9) {
        0 => {
            block.block_id.0[rng.random_range(0..32)] ^= 1 << rng.random_range(0..8);
            "block_id"
        }
        1 => {
            block.parent_id.0[rng.random_range(0..32)] ^= 1 << rng.random_range(0..8);
            "parent_id"
        }
        2 => {
            block.timestamp ^= 1 << rng.random_range(0..63);
            "timestamp"
        }
        3 => {
            block.proposer = other(&block.proposer.clone(), rng);
            "proposer"
        }
        4 => {
            let i = rng.random_range(0..block.signature.len());
            block.signature[i] ^= 1 << rng.random_range(0..8);
            "signature"
        }
        5 => {
            let op = &mut block.operations[op_index];
            let kinds: Vec<OpKind> = OpKind::ALL.into_iter().filter(|k| *k != op.kind).collect();
            op.kind = *kinds.choose(rng).expect("seven kinds");
            "operation kind"
        }
        6 => {
            let op = &mut block.operations[op_index];
            op.amount = Credits::from_micros(op.amount.micros() ^ (1 << rng.random_range(0..40)));
            "operation amount"
        }
        7 => {
            let op = &mut block.operations[op_index];
            match (&op.from, &op.to) {
                (Some(f), _) => op.from = Some(other(f, rng)),
                (None, Some(t)) => op.to = Some(other(t, rng)),
                (None, None) => op.from = Some(nodes[0].clone()),
            }
            "operation party"
        }
        _ => {
            let op = &mut block.operations[op_index];
            if let Some(r) = op.request_id.as_mut() {
                *r ^= 1 << rng.random_range(0..32);
            } else if let Some(d) = op.duel_id.as_mut() {
                *d ^= 1 << rng.random_range(0..32);
            } else {
                op.duel_id = Some(rng.random());
            }
            "operation reference"
        }
    }
}

fn ledger_properties(inject_tamper: bool) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let nodes: Vec<NodeId> = ["a", "b", "c", "d", "e"].into_iter().map(NodeId::from).collect();
    let keys = KeyedHashKeys::derive(8, &nodes);

    let mut identity = true;
    let mut chains = Vec::new();
    for _ in 0..10 {
        let (chain, ok) = random_chain(&mut rng, &nodes, &keys, 25);
        identity &= ok;
        chains.push(chain);
    }
    let mut clean: Vec<CreditBlock> = chains[0].blocks().to_vec();
    if inject_tamper {
        let k = clean.len() / 2;
        tamper_block(&mut clean[k], &mut rng, &nodes);
    }
    let clean_ok = Chain::replay(&clean, &keys).is_ok();

    let trials = 1000;
    let mut detected = 0;
    let mut fields: BTreeMap<&str, u32> = BTreeMap::new();
    for t in 0..trials {
        let mut blocks = chains[t % chains.len()].blocks().to_vec();
        let k = rng.random_range(0..blocks.len());
        let field = tamper_block(&mut blocks[k], &mut rng, &nodes);
        *fields.entry(field).or_default() += 1;
        detected += u32::from(Chain::replay(&blocks, &keys).is_err());
    }

    let mut spends_rejected = 0;
    let spend_trials = 500;
    for _ in 0..spend_trials {
        let state = chains[rng.random_range(0..chains.len())].state();
        let from = nodes.choose(&mut rng).expect("nodes").clone();
        let to = nodes.iter().find(|n| **n != from).expect("two nodes").clone();
        let free = state.balance_of(&from).free.micros();
        let ops = if rng.random_bool(0.5) {
            vec![CreditOperation::offload_payment(from.clone(), to, Credits::from_micros(free + 1), 1)]
        } else {
            let first = free / 2 + 1;
            vec![
                CreditOperation::offload_payment(from.clone(), to.clone(), Credits::from_micros(first), 1),
                CreditOperation::offload_payment(from.clone(), to, Credits::from_micros(free - first + 1 + free / 3), 2),
            ]
        };
        let block = propose_block(ops, &from, &keys, state.head, 1).expect("well-formed");
        if matches!(validate_block(&block, state, &keys), Err(Reject::Overdraft { .. })) {
            spends_rejected += 1;
        }
    }

    let mut threshold_ok = true;
    let mut patterns = 0;
    for n in 1..=9usize {
        let peers: BTreeSet<NodeId> = (0..n).map(|i| NodeId::new(format!("p{i}"))).collect();
        let ids: Vec<&NodeId> = peers.iter().collect();
        for code in 0..3usize.pow(n as u32) {
            let mut votes = BTreeMap::new();
            let mut accepts = 0;
            let mut c = code;
            for id in &ids {
                match c % 3 {
                    0 => {
                        votes.insert((*id).clone(), Vote::Accept);
                        accepts += 1;
                    }
                    1 => {
                        votes.insert((*id).clone(), Vote::Reject);
                    }
                    _ => {}
                }
                c /= 3;
            }
            let expected = if 2 * accepts > n {
                Finality::Finalized
            } else {
                Finality::Dropped
            };
            threshold_ok &= finalize(&votes, &peers) == expected && majority_threshold(n) * 2 > n && (majority_threshold(n) - 1) * 2 <= n;
            patterns += 1;
        }
    }

    let passed = clean_ok && detected == trials as u32 && spends_rejected == spend_trials && identity && threshold_ok;
    Check::new(
        passed,
        format!(
            "clean chain verifies {clean_ok}; tampers detected {detected}/{trials} over {} fields; overdrafts rejected {spends_rejected}/{spend_trials}; supply identity {identity}; finalization {patterns} patterns {}",
            fields.len(),
            if threshold_ok { "exact" } else { "wrong" }
        ),
    )
}

fn random_view(owner: &NodeId, universe: &[NodeId], rng: &mut ChaCha8Rng) -> PeerView {
    let mut records = BTreeMap::new();
    for id in universe {
        if id == owner || rng.random_bool(0.7) {
            records.insert(id.clone(), versioned_record(id, rng.random_range(0..5), rng.random_range(0..3)));
        }
    }
    PeerView {
        owner: owner.clone(),
        records,
    }
}

/// Record content as a function of its version, as produced by its owner.
fn versioned_record(id: &NodeId, heartbeat: u64, t: u64) -> PeerRecord {
    PeerRecord {
        node_id: id.clone(),
        status: if (heartbeat + t) % 3 == 0 {
            PeerStatus::Offline
        } else {
            PeerStatus::Online
        },
        endpoint: format!("{id}:{heartbeat}.{t}"),
        heartbeat,
        last_updated: SimTime::from_micros(t * 1_000_000),
    }
}

fn full_views(n: usize) -> BTreeMap<NodeId, PeerView> {
    let ids: Vec<NodeId> = (0..n).map(|i| NodeId::new(format!("g{i:02}"))).collect();
    let mut views = BTreeMap::new();
    for id in &ids {
        let mut v = PeerView::new(id.clone(), format!("{id}:0"), SimTime::ZERO);
        for other in &ids {
            v.records.insert(other.clone(), versioned_record(other, 0, 1));
        }
        views.insert(id.clone(), v);
    }
    for v in views.values_mut() {
        let own = versioned_record(&v.owner, 0, 1);
        v.records.insert(v.owner.clone(), own);
    }
    views
}

/// Rounds until every view carries `node`'s record at `version`, if within `limit`.
fn rounds_to_spread(
    views: &mut BTreeMap<NodeId, PeerView>,
    node: &NodeId,
    version: (u64, SimTime),
    fanout: usize,
    limit: usize,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    for round in 1..=limit {
        gossip_round(views, fanout, rng);
        if views
            .values()
            .all(|v| v.get(node).is_some_and(|r| r.version() >= version))
        {
            return Some(round);
        }
    }
    None
}

fn gossip_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let universe: Vec<NodeId> = (0..6).map(|i| NodeId::new(format!("u{i}"))).collect();
    let mut laws_ok = true;
    for _ in 0..10_000 {
        let pick = |rng: &mut ChaCha8Rng| random_view(universe.choose(rng).expect("universe"), &universe, rng);
        let (a, b, c) = (pick(&mut rng), pick(&mut rng), pick(&mut rng));
        laws_ok &= merge(&a, &b).records == merge(&b, &a).records;
        laws_ok &= merge(&merge(&a, &b), &c).records == merge(&a, &merge(&b, &c)).records;
        laws_ok &= merge(&a, &a) == a;
    }

    let cfg = GossipConfig::default();
    let mut views = full_views(16);
    let now = SimTime::from_micros(2_000_000);
    for v in views.values_mut() {
        *v = local_tick(std::mem::replace(v, PeerView::new(NodeId::new(""), String::new(), now)), now, &cfg);
    }
    let mut converged = None;
    for round in 1..=30 {
        gossip_round(&mut views, cfg.fanout, &mut rng);
        if views_identical(&views) {
            converged = Some(round);
            break;
        }
    }

    let mut within = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut views = full_views(64);
        let src = NodeId::new("g00");
        let t = SimTime::from_micros(3_000_000);
        let v = views.get_mut(&src).expect("member");
        v.update_endpoint("g00:moved".into(), t);
        let version = v.own_record().version();
        within += usize::from(rounds_to_spread(&mut views, &src, version, 1, 12, &mut rng).is_some());
    }

    let cases = reconciliation_cases();
    let passed = laws_ok && converged.is_some() && within >= 99 && cases.iter().all(|c| c.1);
    Check::new(
        passed,
        format!(
            "merge laws {}; 16-node convergence in {} rounds; 64-node spread within 12 rounds {within}/100; {}",
            if laws_ok { "hold" } else { "violated" },
            converged.map_or("no".to_string(), |r| r.to_string()),
            cases
                .iter()
                .map(|(n, ok)| format!("{n} {}", if *ok { "ok" } else { "failed" }))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

/// Offline detection, endpoint change and new join, each checked on a
/// small cluster driven by ticks and rounds.
fn reconciliation_cases() -> Vec<(&'static str, bool)> {
    let cfg = GossipConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let step = |views: &mut BTreeMap<NodeId, PeerView>, now: SimTime, rng: &mut ChaCha8Rng| {
        for v in views.values_mut() {
            let owned = std::mem::replace(v, PeerView::new(NodeId::new(""), String::new(), now));
            *v = local_tick(owned, now, &cfg);
        }
        gossip_round(views, cfg.fanout, rng);
    };
    let secs = |s: u64| SimTime::from_micros(s * 1_000_000);

    let mut views = full_views(5);
    let gone = NodeId::new("g04");
    views.remove(&gone);
    for t in 1..=10 {
        step(&mut views, secs(t), &mut rng);
    }
    let offline = views
        .values()
        .all(|v| v.get(&gone).is_some_and(|r| r.status == PeerStatus::Offline));

    let mut views = full_views(5);
    let mover = NodeId::new("g02");
    views.get_mut(&mover).expect("member").update_endpoint("g02:new".into(), secs(1));
    for t in 1..=6 {
        step(&mut views, secs(t), &mut rng);
    }
    let moved = views
        .values()
        .all(|v| v.get(&mover).is_some_and(|r| r.endpoint == "g02:new"));

    let mut views = full_views(5);
    let newcomer = NodeId::new("g09");
    let joined = register_join(&mut views, newcomer.clone(), "g09:0".into(), &NodeId::new("g00"), secs(1)).is_ok();
    for t in 2..=8 {
        step(&mut views, secs(t), &mut rng);
    }
    let visible = joined
        && views
            .values()
            .all(|v| v.get(&newcomer).is_some_and(|r| r.status == PeerStatus::Online));
    vec![("offline", offline), ("endpoint change", moved), ("new join", visible)]
}

fn churn() -> Check {
    let seeds = seeds(10);
    let mut parts = Vec::new();
    let mut passed = true;
    for (name, expect_drop) in [("churn_join", true), ("churn_leave", false)] {
        let s = scenario(name);
        let t = s.churn.first().map_or(0.0, |c| c.time);
        let window = 50.0;
        let runs: Vec<_> = seeds
            .par_iter()
            .map(|&seed| run_with(&s, RunOptions::new(Mode::Decentralized).seed(seed)).expect("valid"))
            .collect();
        let (mut pre, mut post) = ((0.0, 0u64), (0.0, 0u64));
        let mut lost = 0;
        for out in &runs {
            let r = metrics(&out.trace, s.slo_threshold, window);
            for w in &r.windows {
                let acc = if (w.start - (t - window)).abs() < 1e-9 {
                    &mut pre
                } else if (w.start - (t + window)).abs() < 1e-9 {
                    &mut post
                } else {
                    continue;
                };
                acc.0 += w.mean_latency * w.completed as f64;
                acc.1 += w.completed;
            }
            lost += r.open_at_horizon + unfinished_admissions(&out.trace.records);
        }
        let (pre, post) = (pre.0 / pre.1.max(1) as f64, post.0 / post.1.max(1) as f64);
        let direction = if expect_drop { post < pre } else { post > pre };
        passed &= direction && lost == 0;
        parts.push(format!("{name}: latency before {pre:.1}s after {post:.1}s, lost {lost}"));
    }
    Check::new(passed, parts.join("; "))
}

/// Admitted executions that never finish.
fn unfinished_admissions(records: &[crate::sim::TraceRecord]) -> u64 {
    let mut open: BTreeSet<(u64, NodeId, RequestKind)> = BTreeSet::new();
    for rec in records {
        match &rec.event {
            TraceEvent::Admit { req, node, kind, .. } => {
                open.insert((*req, node.clone(), *kind));
            }
            TraceEvent::Finish { req, node, kind, .. } => {
                open.remove(&(*req, node.clone(), *kind));
            }
            _ => {}
        }
    }
    open.len() as u64
}

fn determinism() -> Check {
    let s = scenario("setting1");
    let mut parts = Vec::new();
    let mut passed = true;
    for (mode, ledger) in [
        (Mode::Single, LedgerMode::Shared),
        (Mode::Centralized, LedgerMode::Shared),
        (Mode::Decentralized, LedgerMode::Shared),
        (Mode::Decentralized, LedgerMode::Chain),
    ] {
        let opts = RunOptions::new(mode).seed(42).ledger(ledger);
        let a = run_with(&s, opts).expect("valid").trace.to_jsonl();
        let b = run_with(&s, opts).expect("valid").trace.to_jsonl();
        let same = a == b;
        passed &= same;
        parts.push(format!("{mode}/{ledger} {} bytes {}", a.len(), if same { "identical" } else { "differ" }));
    }
    Check::new(passed, parts.join("; "))
}
