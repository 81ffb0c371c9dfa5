//! Replicator dynamics of stake shares.
//!
//! Stakes follow `ṡ_i = η π_i` with `π_i = λ p_i Δ_i`, where `Δ_i` is the
//! expected payoff of serving one delegated request. Shares are always
//! derived from the integrated stakes, never integrated on their own.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credits::Credits;
use crate::ids::NodeId;
use crate::node::{BackendModel, PolicyConfig, RestakeRule};
use crate::sim::scenario::{DuelConfig, Economics, NetworkConfig, TokenModel};
use crate::sim::{run_with, Mode, NodeSpec, Phase, RunOptions, Scenario, TraceEvent};

/// Samples closer than this count as unchanged when checking monotonicity.
pub const MONOTONE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("step size and horizon must be positive and finite")]
    InvalidStep,
    #[error("stake state is not finite at t = {t}")]
    NonFiniteState { t: f64 },
    #[error("cannot build an agent scenario: {0}")]
    Bridge(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> TheoryError {
    TheoryError::InvalidParams {
        field,
        reason: reason.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryParams {
    /// Intrinsic win probability of each node.
    pub q: Vec<f64>,
    /// Per-request operating cost of each node.
    pub c: Vec<f64>,
    /// Delegated request arrival rate.
    pub lambda: f64,
    /// Base reward per delegated request.
    #[serde(rename = "R")]
    pub r: f64,
    pub p_d: f64,
    #[serde(rename = "R_add")]
    pub r_add: f64,
    /// Penalty for losing a duel.
    #[serde(rename = "P")]
    pub penalty: f64,
    pub eta: f64,
    pub s0: Vec<f64>,
}

impl TheoryParams {
    pub fn n(&self) -> usize {
        self.q.len()
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let n = self.q.len();
        if n == 0 {
            return Err(invalid("q", "at least one node is required"));
        }
        if self.c.len() != n {
            return Err(invalid("c", format!("expected {n} entries, found {}", self.c.len())));
        }
        if self.s0.len() != n {
            return Err(invalid("s0", format!("expected {n} entries, found {}", self.s0.len())));
        }
        if let Some(q) = self.q.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(invalid("q", format!("{q} is outside [0, 1]")));
        }
        if let Some(c) = self.c.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
            return Err(invalid("c", format!("{c} is not positive")));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid("lambda", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_d) {
            return Err(invalid("p_d", "must be in [0, 1]"));
        }
        for (field, v) in [("R", self.r), ("R_add", self.r_add), ("P", self.penalty)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, "must be a finite non-negative amount"));
            }
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(invalid("eta", "must be positive"));
        }
        if self.s0.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid("s0", "stakes must be finite and non-negative"));
        }
        if self.s0.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("s0", "total stake must be positive"));
        }
        Ok(())
    }
}

/// Shares `p_i = s_i / Σ s_j`.
pub fn shares(s: &[f64]) -> Vec<f64> {
    let total: f64 = s.iter().sum();
    s.iter().map(|x| x / total).collect()
}

/// Selection-weighted average quality `Q̄ = Σ p_i q_i`.
pub fn q_bar(p: &[f64], params: &TheoryParams) -> f64 {
    p.iter().zip(&params.q).map(|(p, q)| p * q).sum()
}

/// Probability that node `i` wins a duel against a share-weighted opponent.
pub fn win_prob(i: usize, p: &[f64], params: &TheoryParams) -> f64 {
    0.5 * (1.0 + params.q[i] - q_bar(p, params))
}

/// Expected payoff of serving one delegated request.
pub fn payoff_delta(i: usize, p: &[f64], params: &TheoryParams) -> f64 {
    let qi = win_prob(i, p, params);
    (params.r - params.c[i]) + params.p_d * (qi * params.r_add - (1.0 - qi) * params.penalty)
}

pub fn payoff_deltas(p: &[f64], params: &TheoryParams) -> Vec<f64> {
    let qb = q_bar(p, params);
    (0..p.len())
        .map(|i| {
            let qi = 0.5 * (1.0 + params.q[i] - qb);
            (params.r - params.c[i]) + params.p_d * (qi * params.r_add - (1.0 - qi) * params.penalty)
        })
        .collect()
}

/// `π_i = λ p_i Δ_i`.
pub fn payoff_rate(i: usize, p: &[f64], params: &TheoryParams) -> f64 {
    params.lambda * p[i] * payoff_delta(i, p, params)
}

/// Share-weighted mean payoff `Δ̄`.
pub fn mean_delta(p: &[f64], deltas: &[f64]) -> f64 {
    p.iter().zip(deltas).map(|(p, d)| p * d).sum()
}

/// `ṡ = η π(s)`, evaluated on the non-negative part of `s`.
pub fn stake_derivative(s: &[f64], params: &TheoryParams) -> Vec<f64> {
    let clamped: Vec<f64> = s.iter().map(|x| x.max(0.0)).collect();
    let p = shares(&clamped);
    let d = payoff_deltas(&p, params);
    p.iter()
        .zip(&d)
        .map(|(p, d)| params.eta * params.lambda * p * d)
        .collect()
}

/// `ṗ_i = (ηλ/S) p_i (Δ_i − Δ̄)`.
pub fn share_derivative(p: &[f64], total_stake: f64, params: &TheoryParams) -> Vec<f64> {
    let d = payoff_deltas(p, params);
    let dbar = mean_delta(p, &d);
    let k = params.eta * params.lambda / total_stake;
    p.iter().zip(&d).map(|(p, d)| k * p * (d - dbar)).collect()
}

/// `ṗ_H = (ηλ/S) p_H (1 − p_H)(Δ̄_H − Δ̄_¬H)` for the node subset `group`.
/// Returns 0 when the group holds no share or all of it.
pub fn group_share_derivative(group: &[usize], p: &[f64], total_stake: f64, params: &TheoryParams) -> f64 {
    let d = payoff_deltas(p, params);
    let mut member = vec![false; p.len()];
    for &i in group {
        member[i] = true;
    }
    let (mut p_h, mut w_h, mut p_out, mut w_out) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..p.len() {
        if member[i] {
            p_h += p[i];
            w_h += p[i] * d[i];
        } else {
            p_out += p[i];
            w_out += p[i] * d[i];
        }
    }
    if p_h <= 0.0 || p_out <= 0.0 {
        return 0.0;
    }
    let k = params.eta * params.lambda / total_stake;
    k * p_h * p_out * (w_h / p_h - w_out / p_out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub s: Vec<f64>,
    pub p: Vec<f64>,
    pub q_bar: f64,
    pub delta: Vec<f64>,
    pub delta_bar: f64,
}

impl TrajectoryPoint {
    fn at(t: f64, s: Vec<f64>, params: &TheoryParams) -> Self {
        let p = shares(&s);
        let delta = payoff_deltas(&p, params);
        TrajectoryPoint {
            t,
            q_bar: q_bar(&p, params),
            delta_bar: mean_delta(&p, &delta),
            s,
            p,
            delta,
        }
    }

    pub fn total_stake(&self) -> f64 {
        self.s.iter().sum()
    }
}

fn axpy(s: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    s.iter().zip(k).map(|(s, k)| s + h * k).collect()
}

/// Classical fixed-step RK4 on the stakes with an absorbing boundary at
/// zero. Emits one point per step, starting at `t = 0`.
pub fn integrate(params: &TheoryParams, t_end: f64, dt: f64) -> Result<Vec<TrajectoryPoint>, TheoryError> {
    params.validate()?;
    if !(dt.is_finite() && dt > 0.0 && t_end.is_finite() && t_end > 0.0) {
        return Err(TheoryError::InvalidStep);
    }
    let steps = (t_end / dt).round().max(1.0) as usize;
    let mut s = params.s0.clone();
    let mut out = Vec::with_capacity(steps + 1);
    out.push(TrajectoryPoint::at(0.0, s.clone(), params));
    for step in 1..=steps {
        let k1 = stake_derivative(&s, params);
        let k2 = stake_derivative(&axpy(&s, dt / 2.0, &k1), params);
        let k3 = stake_derivative(&axpy(&s, dt / 2.0, &k2), params);
        let k4 = stake_derivative(&axpy(&s, dt, &k3), params);
        for i in 0..s.len() {
            s[i] = (s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).max(0.0);
        }
        let t = step as f64 * dt;
        let total: f64 = s.iter().sum();
        if !total.is_finite() || total <= 0.0 || s.iter().any(|x| !x.is_finite()) {
            return Err(TheoryError::NonFiniteState { t });
        }
        out.push(TrajectoryPoint::at(t, s.clone(), params));
    }
    Ok(out)
}

/// Trajectory as CSV: `t, s_i…, p_i…, delta_i…, q_bar`.
pub fn trajectory_csv(traj: &[TrajectoryPoint]) -> String {
    let n = traj.first().map_or(0, |p| p.s.len());
    let mut out = String::from("t");
    for prefix in ["s", "p", "delta"] {
        for i in 0..n {
            let _ = write!(out, ",{prefix}_{i}");
        }
    }
    out.push_str(",q_bar\n");
    for pt in traj {
        let _ = write!(out, "{}", pt.t);
        for v in pt.s.iter().chain(&pt.p).chain(&pt.delta) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", pt.q_bar);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumReport {
    /// Earliest sample time after which the group share never decreases,
    /// or `None` if it is still decreasing at the end.
    pub monotone_after: Option<f64>,
    pub initial_p_h: f64,
    pub terminal_p_h: f64,
}

pub fn group_share(p: &[f64], group: &[usize]) -> f64 {
    group.iter().map(|&i| p[i]).sum()
}

pub fn detect_equilibrium(traj: &[TrajectoryPoint], group: &[usize]) -> EquilibriumReport {
    let series: Vec<f64> = traj.iter().map(|pt| group_share(&pt.p, group)).collect();
    let last_drop = (1..series.len())
        .rev()
        .find(|&k| series[k] < series[k - 1] - MONOTONE_TOLERANCE);
    let monotone_after = match last_drop {
        None => traj.first().map(|pt| pt.t),
        Some(k) if k + 1 == series.len() => None,
        Some(k) => Some(traj[k].t),
    };
    EquilibriumReport {
        monotone_after,
        initial_p_h: series.first().copied().unwrap_or(0.0),
        terminal_p_h: series.last().copied().unwrap_or(0.0),
    }
}

/// How the agent-based scenario for [`cross_validate`] is derived from
/// theory parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgeMapping {
    pub judges: usize,
    pub restake_period: f64,
    pub sample_interval: f64,
    /// Genesis grant of each executor as a multiple of its initial stake.
    pub genesis_factor: f64,
}

impl Default for BridgeMapping {
    fn default() -> Self {
        BridgeMapping {
            judges: 1,
            restake_period: 0.5,
            sample_interval: 1.0,
            genesis_factor: 10.0,
        }
    }
}

/// Executor ids used by the bridge scenario.
pub fn bridge_node_id(i: usize) -> NodeId {
    if i < 26 {
        NodeId::from(((b'a' + i as u8) as char).to_string().as_str())
    } else {
        NodeId::from(format!("x{i}").as_str())
    }
}

fn credits(field: &'static str, v: f64) -> Result<Credits, TheoryError> {
    Credits::from_f64(v).ok_or_else(|| TheoryError::Bridge(format!("{field} = {v} is not a credit amount")))
}

/// Builds the agent scenario matched to `params`. A requester-only node
/// issues Poisson(λ) requests that are all delegated; executors restake
/// proportionally with rate η, and duels use one judge per challenger.
///
/// In the simulator a node meets duels both as incumbent and as challenger,
/// so the designation probability is scaled by `(n − 1) / 2n`; the mapping
/// is exact at uniform shares and requires `R_add = P`.
pub fn bridge_scenario(params: &TheoryParams, horizon: f64, mapping: &BridgeMapping) -> Result<Scenario, TheoryError> {
    params.validate()?;
    let n = params.n();
    if params.p_d > 0.0 {
        if n < 2 + mapping.judges {
            return Err(TheoryError::Bridge(format!(
                "duels need {} executors, have {n}",
                2 + mapping.judges
            )));
        }
        if (params.r_add - params.penalty).abs() > 1e-12 {
            return Err(TheoryError::Bridge("the duel reward and penalty must be equal".into()));
        }
    }
    let n_f = n as f64;
    let duel = DuelConfig {
        p_d: params.p_d * (n_f - 1.0) / (2.0 * n_f),
        judges: mapping.judges,
        r_add: credits("R_add", params.r_add)?,
        penalty: credits("P", params.penalty)?,
        r_judge: Some(Credits::ZERO),
        judge_accuracy: 1.0,
    };
    let fast = BackendModel {
        concurrency_limit: 1000,
        base_latency: 0.01,
        throughput: 100_000.0,
        ..BackendModel::default()
    };
    let mut nodes = vec![NodeSpec {
        id: NodeId::from("req"),
        genesis: Credits::from_whole(10_000_000),
        quality: 0.0,
        cost: 0.0,
        server: PolicyConfig {
            stake_amount: Credits::ZERO,
            restake: RestakeRule::Fixed,
            ..PolicyConfig::default()
        },
        model: BackendModel {
            concurrency_limit: 0,
            ..BackendModel::default()
        },
        schedule: vec![Phase {
            start: 0.0,
            end: horizon,
            mean_interarrival: 1.0 / params.lambda,
        }],
    }];
    for i in 0..n {
        let stake = credits("s0", params.s0[i])?;
        nodes.push(NodeSpec {
            id: bridge_node_id(i),
            genesis: credits("s0", params.s0[i] * mapping.genesis_factor)?,
            quality: params.q[i],
            cost: params.c[i],
            server: PolicyConfig {
                stake_amount: stake,
                accept_frequency: 1.0,
                restake: RestakeRule::Proportional(params.eta),
                ..PolicyConfig::default()
            },
            model: fast.clone(),
            schedule: Vec::new(),
        });
    }
    let scenario = Scenario {
        name: "bridge".into(),
        seed: 1,
        duration: horizon,
        drain: 0.0,
        slo_threshold: 60.0,
        window: 30.0,
        sample_interval: mapping.sample_interval,
        economics: Economics {
            base_reward: credits("R", params.r)?,
            restake_period: mapping.restake_period,
        },
        duel,
        network: NetworkConfig::default(),
        gossip: Default::default(),
        tokens: TokenModel::default(),
        nodes,
        churn: Vec::new(),
    };
    scenario
        .validate()
        .map_err(|e| TheoryError::Bridge(e.to_string()))?;
    Ok(scenario)
}

/// Share trajectory of the executors, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedShares {
    pub times: Vec<f64>,
    pub shares: Vec<Vec<f64>>,
}

/// Runs the bridge scenario for `seeds` and averages the staked shares of
/// the executors at every sample time common to all runs.
pub fn simulate_shares(scenario: &Scenario, n: usize, seeds: &[u64]) -> SimulatedShares {
    let ids: Vec<NodeId> = (0..n).map(bridge_node_id).collect();
    let runs: Vec<BTreeMap<u64, Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let out = run_with(scenario, RunOptions::new(Mode::Decentralized).seed(seed))
                .expect("bridge scenario is valid");
            let mut at: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for rec in &out.trace.records {
                if let TraceEvent::Sample { node, staked, .. } = &rec.event {
                    if let Some(i) = ids.iter().position(|id| id == node) {
                        at.entry(rec.t).or_insert_with(|| vec![0.0; n])[i] = staked.to_f64();
                    }
                }
            }
            at.into_iter()
                .map(|(t, s)| {
                    let total: f64 = s.iter().sum();
                    let p = if total > 0.0 { shares(&s) } else { vec![0.0; n] };
                    (t, p)
                })
                .collect()
        })
        .collect();
    let mut sums: BTreeMap<u64, (usize, Vec<f64>)> = BTreeMap::new();
    for run in &runs {
        for (t, p) in run {
            let e = sums.entry(*t).or_insert_with(|| (0, vec![0.0; n]));
            e.0 += 1;
            for i in 0..n {
                e.1[i] += p[i];
            }
        }
    }
    let mut out = SimulatedShares {
        times: Vec::new(),
        shares: Vec::new(),
    };
    for (t, (count, sum)) in sums {
        if count == runs.len() {
            out.times.push(t as f64 / 1e6);
            out.shares.push(sum.iter().map(|x| x / count as f64).collect());
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    /// Largest absolute share difference over all sample times and nodes.
    pub gap: f64,
    pub gap_at: f64,
    pub theory_terminal: Vec<f64>,
    pub sim_terminal: Vec<f64>,
    pub ordering_agrees: bool,
    pub seeds: usize,
}

/// Node indices sorted by descending share.
pub fn ranking(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]));
    idx
}

/// Sup-norm distance between the ODE shares and seed-averaged simulated
/// shares of the matched agent scenario.
pub fn cross_validate(
    params: &TheoryParams,
    mapping: &BridgeMapping,
    horizon: f64,
    dt: f64,
    seeds: usize,
) -> Result<CrossValidation, TheoryError> {
    let traj = integrate(params, horizon, dt)?;
    let scenario = bridge_scenario(params, horizon, mapping)?;
    let seed_list: Vec<u64> = (0..seeds as u64).collect();
    let sim = simulate_shares(&scenario, params.n(), &seed_list);
    let theory_at = |t: f64| -> &TrajectoryPoint {
        let k = ((t / dt).round() as usize).min(traj.len() - 1);
        &traj[k]
    };
    let (mut gap, mut gap_at) = (0.0_f64, 0.0);
    for (t, p_sim) in sim.times.iter().zip(&sim.shares) {
        let p_th = &theory_at(*t).p;
        for (a, b) in p_th.iter().zip(p_sim) {
            if (a - b).abs() > gap {
                gap = (a - b).abs();
                gap_at = *t;
            }
        }
    }
    let theory_terminal = traj.last().expect("non-empty trajectory").p.clone();
    let sim_terminal = sim.shares.last().cloned().unwrap_or_default();
    Ok(CrossValidation {
        gap,
        gap_at,
        ordering_agrees: ranking(&theory_terminal) == ranking(&sim_terminal),
        theory_terminal,
        sim_terminal,
        seeds,
    })
}

/// A theory parameter file: parameters plus integration and bridge settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoryConfig {
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    /// Node subset tracked by the equilibrium detector.
    #[serde(default)]
    pub group: Vec<usize>,
    pub params: TheoryParams,
    #[serde(default)]
    pub bridge: BridgeMapping,
}

fn default_horizon() -> f64 {
    100.0
}

fn default_dt() -> f64 {
    0.01
}

fn default_seeds() -> usize {
    32
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<(), TheoryError> {
        self.params.validate()?;
        if !(self.dt.is_finite() && self.dt > 0.0 && self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(TheoryError::InvalidStep);
        }
        if let Some(i) = self.group.iter().find(|&&i| i >= self.params.n()) {
            return Err(invalid("group", format!("node index {i} is out of range")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example() -> TheoryParams {
        TheoryParams {
            q: vec![0.7, 0.3],
            c: vec![0.2, 0.2],
            lambda: 10.0,
            r: 1.0,
            p_d: 0.1,
            r_add: 2.0,
            penalty: 1.0,
            eta: 1.0,
            s0: vec![1.0, 1.0],
        }
    }

    #[test]
    fn lemma_example_by_hand() {
        // Q̄ = 0.5 at equal shares of q = 0.7 and 0.3.
        let params = example();
        let p = [0.5, 0.5];
        assert!((win_prob(0, &p, &params) - 0.6).abs() < 1e-12);
        assert!((payoff_delta(0, &p, &params) - 0.88).abs() < 1e-12);
        // Keep Q̄ = 0.5 at p = (0.25, 0.75): q_2 = (0.5 − 0.175) / 0.75.
        let mut skewed = params.clone();
        skewed.q[1] = (0.5 - 0.25 * 0.7) / 0.75;
        assert!((payoff_rate(0, &[0.25, 0.75], &skewed) - 2.2).abs() < 1e-12);
    }

    #[test]
    fn no_duels_leaves_base_margin() {
        let mut params = example();
        params.p_d = 0.0;
        assert!((payoff_delta(1, &[0.3, 0.7], &params) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn equal_quality_is_symmetric() {
        let mut params = example();
        params.q = vec![0.5, 0.5];
        let expect = 0.8 + 0.1 * (2.0 - 1.0) / 2.0;
        assert!((payoff_delta(0, &[0.9, 0.1], &params) - expect).abs() < 1e-12);
    }

    #[test]
    fn group_of_everyone_is_flat() {
        let params = example();
        let traj = integrate(&params, 5.0, 0.1).unwrap();
        let r = detect_equilibrium(&traj, &[0, 1]);
        assert_eq!(r.monotone_after, Some(0.0));
        assert!((r.terminal_p_h - 1.0).abs() < 1e-12);
    }

    #[test]
    fn validation_catches_dimension_mismatch() {
        let mut params = example();
        params.c.pop();
        assert!(matches!(params.validate(), Err(TheoryError::InvalidParams { field: "c", .. })));
        let mut params = example();
        params.s0 = vec![0.0, 0.0];
        assert!(params.validate().is_err());
    }

    #[test]
    fn negative_payoff_is_absorbed_at_zero() {
        let mut params = example();
        params.c = vec![0.2, 5.0];
        let traj = integrate(&params, 20.0, 0.01).unwrap();
        let last = traj.last().unwrap();
        assert!(last.s[1] >= 0.0);
        assert!(last.p[1] < 1e-3);
    }
}
