//! Scenario description: nodes, per-node arrival schedules, economics, duel
//! parameters and churn script.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credits::Credits;
use crate::duel::{DuelError, DuelParams, QualityModel};
use crate::gossip::GossipConfig;
use crate::ids::NodeId;
use crate::node::{BackendModel, PolicyConfig, RestakeRule};

/// A scenario field that failed validation, e.g. `nodes[2].schedule[1]`.
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("{field}: {reason}")]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ValidationError {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// One constant-rate interval of a node's Poisson arrival process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub start: f64,
    pub end: f64,
    /// Mean inter-arrival time in seconds.
    pub mean_interarrival: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub genesis: Credits,
    #[serde(default)]
    pub quality: f64,
    #[serde(default)]
    pub cost: f64,
    #[serde(default)]
    pub server: PolicyConfig,
    #[serde(default)]
    pub model: BackendModel,
    #[serde(default)]
    pub schedule: Vec<Phase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnAction {
    Join(Box<NodeSpec>),
    Leave(NodeId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawChurn", into = "RawChurn")]
pub struct ChurnEvent {
    pub time: f64,
    pub action: ChurnAction,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChurn {
    time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    join: Option<NodeSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    leave: Option<NodeId>,
}

impl TryFrom<RawChurn> for ChurnEvent {
    type Error = String;

    fn try_from(raw: RawChurn) -> Result<Self, String> {
        let action = match (raw.join, raw.leave) {
            (Some(spec), None) => ChurnAction::Join(Box::new(spec)),
            (None, Some(node)) => ChurnAction::Leave(node),
            _ => return Err("a churn entry needs exactly one of `join` or `leave`".into()),
        };
        Ok(ChurnEvent {
            time: raw.time,
            action,
        })
    }
}

impl From<ChurnEvent> for RawChurn {
    fn from(ev: ChurnEvent) -> Self {
        let (join, leave) = match ev.action {
            ChurnAction::Join(spec) => (Some(*spec), None),
            ChurnAction::Leave(node) => (None, Some(node)),
        };
        RawChurn {
            time: ev.time,
            join,
            leave,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Economics {
    /// Base reward R paid per delivered delegated request.
    pub base_reward: Credits,
    /// Seconds between restake steps.
    pub restake_period: f64,
}

impl Default for Economics {
    fn default() -> Self {
        Economics {
            base_reward: Credits::from_whole(1),
            restake_period: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuelConfig {
    pub p_d: f64,
    pub judges: usize,
    pub r_add: Credits,
    pub penalty: Credits,
    /// Defaults to a tenth of `r_add`.
    pub r_judge: Option<Credits>,
    pub judge_accuracy: f64,
}

impl Default for DuelConfig {
    fn default() -> Self {
        DuelConfig {
            p_d: 0.1,
            judges: 3,
            r_add: Credits::from_whole(2),
            penalty: Credits::from_whole(1),
            r_judge: None,
            judge_accuracy: 0.9,
        }
    }
}

impl DuelConfig {
    pub fn params(&self) -> Result<DuelParams, DuelError> {
        let r_judge = self
            .r_judge
            .unwrap_or(Credits::from_micros(self.r_add.micros() / 10));
        DuelParams::new(self.p_d, self.judges, self.r_add, self.penalty, r_judge)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// One-way delay of every inter-node message, seconds.
    pub delay: f64,
    pub max_probes: usize,
    /// Probe capacity multiplier on the concurrency limit.
    pub headroom: f64,
    /// Back-off before a requester-only node retries an exhausted probe
    /// round, seconds.
    pub retry_delay: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            delay: 0.01,
            max_probes: 3,
            headroom: 2.0,
            retry_delay: 1.0,
        }
    }
}

/// Lognormal token-length model and optional service-time noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenModel {
    pub prompt_median: f64,
    pub output_median: f64,
    pub sigma: f64,
    /// Sigma of a multiplicative lognormal on service times; 0 disables it.
    pub service_noise: f64,
}

impl Default for TokenModel {
    fn default() -> Self {
        TokenModel {
            prompt_median: 256.0,
            output_median: 512.0,
            sigma: 0.6,
            service_noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    /// Arrivals are generated in `[0, duration)`.
    pub duration: f64,
    /// Extra time after `duration` for in-flight work to finish.
    #[serde(default = "default_drain")]
    pub drain: f64,
    pub slo_threshold: f64,
    #[serde(default = "default_window")]
    pub window: f64,
    #[serde(default = "default_sample_interval")]
    pub sample_interval: f64,
    #[serde(default)]
    pub economics: Economics,
    #[serde(default)]
    pub duel: DuelConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub gossip: GossipConfig,
    #[serde(default)]
    pub tokens: TokenModel,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub churn: Vec<ChurnEvent>,
}

fn default_drain() -> f64 {
    600.0
}

fn default_window() -> f64 {
    30.0
}

fn default_sample_interval() -> f64 {
    5.0
}

fn positive(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

fn validate_node(spec: &NodeSpec, path: &str) -> Result<(), ValidationError> {
    let err = |f: &str, r: &str| ValidationError::new(format!("{path}.{f}"), r);
    if spec.id.as_str().is_empty() {
        return Err(err("id", "must not be empty"));
    }
    if !(0.0..=1.0).contains(&spec.quality) {
        return Err(err("quality", "must lie in [0, 1]"));
    }
    if !(spec.cost.is_finite() && spec.cost >= 0.0) {
        return Err(err("cost", "must be finite and >= 0"));
    }
    spec.server
        .validate()
        .map_err(|e| err("server", &e.to_string()))?;
    spec.model
        .validate()
        .map_err(|e| err("model", &e.to_string()))?;
    if spec.model.is_requester_only()
        && (!spec.server.stake_amount.is_zero() || spec.server.restake != RestakeRule::Fixed)
    {
        return Err(err("server", "a requester-only node must stake 0 with the fixed restake rule"));
    }
    if spec.server.stake_amount > spec.genesis {
        return Err(err("server.stake_amount", "exceeds the genesis grant"));
    }
    let mut prev_end = f64::NEG_INFINITY;
    for (i, ph) in spec.schedule.iter().enumerate() {
        let perr = |r: &str| err(&format!("schedule[{i}]"), r);
        if !(ph.start.is_finite() && ph.start >= 0.0 && ph.end.is_finite() && ph.end > ph.start) {
            return Err(perr("needs 0 <= start < end"));
        }
        if !positive(ph.mean_interarrival) {
            return Err(perr("mean_interarrival must be > 0"));
        }
        if ph.start < prev_end {
            return Err(perr("overlaps or precedes the previous phase"));
        }
        prev_end = ph.end;
    }
    Ok(())
}

impl Scenario {
    /// Checks every range and cross-field invariant.
    pub fn validate(&self) -> Result<(), ValidationError> {
        if !positive(self.duration) {
            return Err(ValidationError::new("duration", "must be > 0"));
        }
        if !(self.drain.is_finite() && self.drain >= 0.0) {
            return Err(ValidationError::new("drain", "must be >= 0"));
        }
        for (name, v) in [
            ("slo_threshold", self.slo_threshold),
            ("window", self.window),
            ("sample_interval", self.sample_interval),
            ("economics.restake_period", self.economics.restake_period),
            ("gossip.heartbeat_period", self.gossip.heartbeat_period),
            ("gossip.fail_timeout", self.gossip.fail_timeout),
            ("gossip.offline_ttl", self.gossip.offline_ttl),
            ("network.headroom", self.network.headroom),
            ("network.retry_delay", self.network.retry_delay),
            ("tokens.prompt_median", self.tokens.prompt_median),
            ("tokens.output_median", self.tokens.output_median),
        ] {
            if !positive(v) {
                return Err(ValidationError::new(name, "must be > 0"));
            }
        }
        if !(self.network.delay.is_finite() && self.network.delay >= 0.0) {
            return Err(ValidationError::new("network.delay", "must be >= 0"));
        }
        if self.network.max_probes == 0 {
            return Err(ValidationError::new("network.max_probes", "must be >= 1"));
        }
        for (name, v) in [("tokens.sigma", self.tokens.sigma), ("tokens.service_noise", self.tokens.service_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ValidationError::new(name, "must be >= 0"));
            }
        }
        self.duel
            .params()
            .map_err(|e| ValidationError::new("duel", e.to_string()))?;
        if !(0.5..=1.0).contains(&self.duel.judge_accuracy) {
            return Err(ValidationError::new("duel.judge_accuracy", "must lie in [0.5, 1]"));
        }
        if self.nodes.is_empty() {
            return Err(ValidationError::new("nodes", "at least one node is required"));
        }
        let mut ids = BTreeSet::new();
        for (i, spec) in self.nodes.iter().enumerate() {
            let path = format!("nodes[{i}]");
            validate_node(spec, &path)?;
            if !ids.insert(spec.id.clone()) {
                return Err(ValidationError::new(format!("{path}.id"), format!("duplicate id {}", spec.id)));
            }
        }
        let mut online = ids.clone();
        let mut prev = f64::NEG_INFINITY;
        for (i, ev) in self.churn.iter().enumerate() {
            let path = format!("churn[{i}]");
            if !(ev.time.is_finite() && ev.time >= 0.0) {
                return Err(ValidationError::new(format!("{path}.time"), "must be >= 0"));
            }
            if ev.time < prev {
                return Err(ValidationError::new(format!("{path}.time"), "churn events must be in time order"));
            }
            prev = ev.time;
            match &ev.action {
                ChurnAction::Join(spec) => {
                    validate_node(spec, &format!("{path}.join"))?;
                    if !ids.insert(spec.id.clone()) {
                        return Err(ValidationError::new(
                            format!("{path}.join.id"),
                            format!("duplicate join of {}", spec.id),
                        ));
                    }
                    online.insert(spec.id.clone());
                }
                ChurnAction::Leave(node) => {
                    if !online.remove(node) {
                        return Err(ValidationError::new(
                            format!("{path}.leave"),
                            format!("{node} is not online at that time"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn duel_params(&self) -> DuelParams {
        self.duel.params().expect("validated scenario")
    }

    /// Quality of every node that ever appears in the scenario.
    pub fn quality_model(&self) -> QualityModel {
        let q = self
            .all_nodes()
            .map(|s| (s.id.clone(), s.quality))
            .collect();
        QualityModel::new(q, self.duel.judge_accuracy).expect("validated scenario")
    }

    /// Initial nodes followed by joiners in script order.
    pub fn all_nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().chain(self.churn.iter().filter_map(|ev| match &ev.action {
            ChurnAction::Join(spec) => Some(spec.as_ref()),
            ChurnAction::Leave(_) => None,
        }))
    }

    /// `[from, to)` intervals during which `node` is a member.
    pub fn online_intervals(&self, node: &NodeId) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        let mut since = self.nodes.iter().any(|s| s.id == *node).then_some(0.0);
        for ev in &self.churn {
            match &ev.action {
                ChurnAction::Join(spec) if spec.id == *node => since = Some(ev.time),
                ChurnAction::Leave(n) if n == node => {
                    if let Some(s) = since.take() {
                        out.push((s, ev.time));
                    }
                }
                _ => {}
            }
        }
        if let Some(s) = since {
            out.push((s, f64::INFINITY));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn node(id: &str) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            genesis: Credits::from_whole(1000),
            quality: 0.5,
            cost: 0.1,
            server: PolicyConfig::default(),
            model: BackendModel::default(),
            schedule: vec![Phase {
                start: 0.0,
                end: 10.0,
                mean_interarrival: 1.0,
            }],
        }
    }

    fn scenario() -> Scenario {
        Scenario {
            name: "t".into(),
            seed: 1,
            duration: 10.0,
            drain: 10.0,
            slo_threshold: 30.0,
            window: 5.0,
            sample_interval: 1.0,
            economics: Economics::default(),
            duel: DuelConfig::default(),
            network: NetworkConfig::default(),
            gossip: GossipConfig::default(),
            tokens: TokenModel::default(),
            nodes: vec![node("a"), node("b")],
            churn: vec![],
        }
    }

    #[test]
    fn valid_scenario_passes() {
        scenario().validate().unwrap();
    }

    #[test]
    fn overlapping_phases_rejected() {
        let mut s = scenario();
        s.nodes[1].schedule.push(Phase {
            start: 5.0,
            end: 20.0,
            mean_interarrival: 2.0,
        });
        let e = s.validate().unwrap_err();
        assert_eq!(e.field, "nodes[1].schedule[1]");
    }

    #[test]
    fn churn_rules() {
        let mut s = scenario();
        s.churn = vec![ChurnEvent {
            time: 1.0,
            action: ChurnAction::Leave("zz".into()),
        }];
        assert_eq!(s.validate().unwrap_err().field, "churn[0].leave");
        s.churn = vec![ChurnEvent {
            time: 1.0,
            action: ChurnAction::Join(Box::new(node("a"))),
        }];
        assert_eq!(s.validate().unwrap_err().field, "churn[0].join.id");
        s.churn = vec![
            ChurnEvent {
                time: 1.0,
                action: ChurnAction::Join(Box::new(node("c"))),
            },
            ChurnEvent {
                time: 4.0,
                action: ChurnAction::Leave("c".into()),
            },
        ];
        s.validate().unwrap();
        assert_eq!(s.online_intervals(&"c".into()), vec![(1.0, 4.0)]);
        assert_eq!(s.online_intervals(&"a".into()), vec![(0.0, f64::INFINITY)]);
        assert_eq!(s.all_nodes().count(), 3);
    }

    #[test]
    fn stake_above_genesis_rejected() {
        let mut s = scenario();
        s.nodes[0].server.stake_amount = Credits::from_whole(5000);
        assert_eq!(s.validate().unwrap_err().field, "nodes[0].server.stake_amount");
    }
}
