//! Per-node state machine: request admission, local-versus-delegate
//! decisions, willingness probes, mock backend execution, payment emission
//! and restaking.

use std::collections::{HashSet, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credits::Credits;
use crate::gossip::PeerView;
use crate::ids::{DuelId, NodeId, RequestId, SimTime};
use crate::ledger::{Account, CreditOperation};
use crate::scheduler::ProbeReply;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    User,
    Delegated,
    DuelChallenge,
    JudgeEval,
}

impl RequestKind {
    /// Duel and judge traffic generated by the settlement mechanism.
    pub fn is_auxiliary(self) -> bool {
        matches!(self, RequestKind::DuelChallenge | RequestKind::JudgeEval)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub origin: NodeId,
    pub user_submit_time: SimTime,
    pub kind: RequestKind,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
    /// End-to-end latency budget.
    pub slo_deadline: SimTime,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duel_id: Option<DuelId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum NodeError {
    #[error("request {0} was already admitted")]
    DuplicateRequest(RequestId),
    #[error("request {0} cannot change kind from {1:?} to {2:?}")]
    BadKindTransition(RequestId, RequestKind, RequestKind),
    #[error("invalid policy: {0}")]
    InvalidPolicy(&'static str),
    #[error("invalid backend: {0}")]
    InvalidBackend(&'static str),
}

impl Request {
    /// The single allowed kind transition, User → Delegated.
    pub fn into_delegated(mut self) -> Result<Request, NodeError> {
        if self.kind != RequestKind::User {
            return Err(NodeError::BadKindTransition(self.id, self.kind, RequestKind::Delegated));
        }
        self.kind = RequestKind::Delegated;
        Ok(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestakeRule {
    Fixed,
    Proportional(f64),
}

/// User-level policy of one node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub stake_amount: Credits,
    pub offload_frequency: f64,
    pub accept_frequency: f64,
    pub target_utilization: f64,
    pub queue_threshold: usize,
    pub prioritize_own: bool,
    pub restake: RestakeRule,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            stake_amount: Credits::from_whole(100),
            offload_frequency: 0.8,
            accept_frequency: 0.8,
            target_utilization: 0.7,
            queue_threshold: 4,
            prioritize_own: false,
            restake: RestakeRule::Fixed,
        }
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), NodeError> {
        if !unit(self.offload_frequency) {
            return Err(NodeError::InvalidPolicy("offload_frequency must be in [0, 1]"));
        }
        if !unit(self.accept_frequency) {
            return Err(NodeError::InvalidPolicy("accept_frequency must be in [0, 1]"));
        }
        if !(self.target_utilization > 0.0 && self.target_utilization <= 1.0) {
            return Err(NodeError::InvalidPolicy("target_utilization must be in (0, 1]"));
        }
        if let RestakeRule::Proportional(eta) = self.restake {
            if !(eta.is_finite() && eta >= 0.0) {
                return Err(NodeError::InvalidPolicy("restake rate must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Parametric stand-in for a serving backend.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendModel {
    /// Zero marks a requester-only node.
    pub concurrency_limit: usize,
    /// Seconds.
    pub base_latency: f64,
    /// Output tokens per second.
    pub throughput: f64,
    pub judge_cost_factor: f64,
}

impl Default for BackendModel {
    fn default() -> Self {
        BackendModel {
            concurrency_limit: 4,
            base_latency: 1.0,
            throughput: 20.0,
            judge_cost_factor: 0.3,
        }
    }
}

impl BackendModel {
    pub fn validate(&self) -> Result<(), NodeError> {
        if !(self.throughput.is_finite() && self.throughput > 0.0) {
            return Err(NodeError::InvalidBackend("throughput must be > 0"));
        }
        if !(self.base_latency.is_finite() && self.base_latency >= 0.0) {
            return Err(NodeError::InvalidBackend("base_latency must be >= 0"));
        }
        if !(self.judge_cost_factor > 0.0 && self.judge_cost_factor <= 1.0) {
            return Err(NodeError::InvalidBackend("judge_cost_factor must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn is_requester_only(&self) -> bool {
        self.concurrency_limit == 0
    }

    /// `base + tokens / throughput`, with the token term scaled by
    /// `judge_cost_factor` for judge evaluations. Seconds.
    pub fn service_secs(&self, request: &Request) -> f64 {
        let decode = f64::from(request.output_tokens) / self.throughput;
        let decode = if request.kind == RequestKind::JudgeEval {
            decode * self.judge_cost_factor
        } else {
            decode
        };
        self.base_latency + decode
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Queued {
    request: Request,
    admitted_at: SimTime,
    seq: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Running {
    pub request: Request,
    pub started: SimTime,
    pub finish: SimTime,
}

/// Mutable state of one serving node.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub id: NodeId,
    pub backend: BackendModel,
    pub policy: PolicyConfig,
    own_queue: VecDeque<Queued>,
    delegated_queue: VecDeque<Queued>,
    running: Vec<Running>,
    admitted: HashSet<RequestId>,
    admit_seq: u64,
    pub peer_view: PeerView,
    /// Per-request operational cost c_i (bookkeeping only).
    pub cost: f64,
    /// Intrinsic response quality q_i.
    pub quality: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    ExecuteLocal,
    Delegate,
}

impl NodeState {
    pub fn new(
        id: NodeId,
        backend: BackendModel,
        policy: PolicyConfig,
        peer_view: PeerView,
        cost: f64,
        quality: f64,
    ) -> Self {
        NodeState {
            id,
            backend,
            policy,
            own_queue: VecDeque::new(),
            delegated_queue: VecDeque::new(),
            running: Vec::new(),
            admitted: HashSet::new(),
            admit_seq: 0,
            peer_view,
            cost,
            quality,
        }
    }

    pub fn running(&self) -> &[Running] {
        &self.running
    }

    pub fn own_queue_len(&self) -> usize {
        self.own_queue.len()
    }

    pub fn delegated_queue_len(&self) -> usize {
        self.delegated_queue.len()
    }

    pub fn queued(&self) -> usize {
        self.own_queue.len() + self.delegated_queue.len()
    }

    pub fn is_idle(&self) -> bool {
        self.running.is_empty() && self.queued() == 0
    }

    /// Running requests over capacity; zero for requester-only nodes.
    pub fn utilization(&self) -> f64 {
        if self.backend.concurrency_limit == 0 {
            0.0
        } else {
            self.running.len() as f64 / self.backend.concurrency_limit as f64
        }
    }

    /// Queues a request: user requests into the own queue, everything else
    /// into the delegated queue.
    pub fn admit(&mut self, request: Request, now: SimTime) -> Result<(), NodeError> {
        if !self.admitted.insert(request.id) {
            return Err(NodeError::DuplicateRequest(request.id));
        }
        self.admit_seq += 1;
        let entry = Queued {
            request,
            admitted_at: now,
            seq: self.admit_seq,
        };
        if entry.request.kind == RequestKind::User {
            self.own_queue.push_back(entry);
        } else {
            self.delegated_queue.push_back(entry);
        }
        Ok(())
    }

    fn pop_next(&mut self) -> Option<Request> {
        let take_own = match (self.own_queue.front(), self.delegated_queue.front()) {
            (None, None) => return None,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(o), Some(d)) => {
                self.policy.prioritize_own || (o.admitted_at, o.seq) <= (d.admitted_at, d.seq)
            }
        };
        let q = if take_own {
            &mut self.own_queue
        } else {
            &mut self.delegated_queue
        };
        q.pop_front().map(|e| e.request)
    }

    /// Starts queued requests while concurrency slots are free. Returns the
    /// started requests with their finish times. `noise` scales each service
    /// time (pass `|_| 1.0` for the deterministic model).
    pub fn execute(&mut self, now: SimTime, mut noise: impl FnMut() -> f64) -> Vec<Running> {
        let mut started = Vec::new();
        while self.running.len() < self.backend.concurrency_limit {
            let Some(request) = self.pop_next() else { break };
            let secs = self.backend.service_secs(&request) * noise();
            let run = Running {
                request,
                started: now,
                finish: now + SimTime::from_secs_f64(secs),
            };
            self.running.push(run.clone());
            started.push(run);
        }
        started
    }

    /// Completion time of a new request with the given service time if it
    /// were admitted now, assuming queued work runs in dispatch order with
    /// its nominal service times. `None` for requester-only nodes.
    pub fn predicted_completion(&self, now: SimTime, service_secs: f64) -> Option<SimTime> {
        let limit = self.backend.concurrency_limit;
        if limit == 0 {
            return None;
        }
        let mut slots: Vec<SimTime> = self.running.iter().map(|r| r.finish.max(now)).collect();
        slots.resize(limit, now);
        let mut own = self.own_queue.iter().peekable();
        let mut delegated = self.delegated_queue.iter().peekable();
        loop {
            let next = match (own.peek(), delegated.peek()) {
                (None, None) => break,
                (Some(_), None) => own.next(),
                (None, Some(_)) => delegated.next(),
                (Some(o), Some(d)) => {
                    if self.policy.prioritize_own || (o.admitted_at, o.seq) <= (d.admitted_at, d.seq) {
                        own.next()
                    } else {
                        delegated.next()
                    }
                }
            };
            let entry = next.expect("peeked");
            let slot = earliest(&mut slots);
            *slot = *slot + SimTime::from_secs_f64(self.backend.service_secs(&entry.request));
        }
        let slot = earliest(&mut slots);
        Some(*slot + SimTime::from_secs_f64(service_secs))
    }

    /// Removes a finished request from the running set.
    pub fn finish(&mut self, id: RequestId) -> Option<Running> {
        let idx = self.running.iter().position(|r| r.request.id == id)?;
        Some(self.running.swap_remove(idx))
    }

    fn loaded(&self) -> bool {
        let limit = self.backend.concurrency_limit as f64;
        self.running.len() as f64 >= self.policy.target_utilization * limit
            || self.queued() >= self.policy.queue_threshold
    }

    /// Local-versus-delegate decision for a user request arriving at its
    /// origin. `spendable` is free balance not already promised to pending
    /// delegations; delegation requires at least `base_reward` of it.
    pub fn decide<R: Rng + ?Sized>(
        &self,
        spendable: Credits,
        base_reward: Credits,
        rng: &mut R,
    ) -> Decision {
        if spendable < base_reward {
            return Decision::ExecuteLocal;
        }
        if self.backend.is_requester_only() {
            return Decision::Delegate;
        }
        if self.loaded() && rng.random_bool(self.policy.offload_frequency) {
            Decision::Delegate
        } else {
            Decision::ExecuteLocal
        }
    }

    /// Reply to a willingness probe: a policy coin and a capacity check of
    /// `running + queued_delegated < limit * headroom`.
    pub fn probe_response<R: Rng + ?Sized>(&self, headroom: f64, rng: &mut R) -> ProbeReply {
        let accept = rng.random_bool(self.policy.accept_frequency);
        let capacity = self.backend.concurrency_limit as f64 * headroom;
        let load = (self.running.len() + self.delegated_queue.len()) as f64;
        if accept && load < capacity {
            ProbeReply::Accept
        } else {
            ProbeReply::Decline
        }
    }
}

fn earliest(slots: &mut [SimTime]) -> &mut SimTime {
    slots.iter_mut().min_by_key(|t| **t).expect("at least one slot")
}

/// Credits-for-offloading transfer for a delivered delegated response.
pub fn complete_delegated(
    origin: &NodeId,
    executor: &NodeId,
    request: &Request,
    base_reward: Credits,
) -> Vec<CreditOperation> {
    vec![CreditOperation::offload_payment(
        origin.clone(),
        executor.clone(),
        base_reward,
        request.id,
    )]
}

/// Inputs to one restake step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RestakeInput {
    pub balance: Account,
    /// Free balance not reserved for pending payments.
    pub spendable: Credits,
    /// Realized payoff per unit time over the last period.
    pub payoff_rate: f64,
    /// Seconds since the previous step.
    pub period: f64,
    /// Stake already burned by penalties during the period. Those burns are
    /// part of the realized payoff, so they are netted out of the target
    /// stake change rather than charged twice.
    pub stake_burned: Credits,
}

/// Stake adjustment `η · payoff_rate · period`, clamped so that neither the
/// free nor the staked balance goes negative.
pub fn restake_tick(node: &NodeId, policy: &PolicyConfig, input: RestakeInput) -> Option<CreditOperation> {
    let RestakeRule::Proportional(eta) = policy.restake else {
        return None;
    };
    let target = eta * input.payoff_rate * input.period + input.stake_burned.to_f64();
    if !target.is_finite() || target == 0.0 {
        return None;
    }
    if target > 0.0 {
        let amount = Credits::from_f64(target)?.min(input.spendable);
        (!amount.is_zero()).then(|| CreditOperation::stake_lock(node.clone(), amount))
    } else {
        let amount = Credits::from_f64(-target)?.min(input.balance.staked);
        (!amount.is_zero()).then(|| CreditOperation::stake_release(node.clone(), amount))
    }
}
