//! The discrete-event loop.
//!
//! Events are ordered by `(time, sequence)`, where the sequence number is
//! assigned when an event is scheduled, so simultaneous events run in the
//! order they were created. All randomness comes from seeded ChaCha streams:
//! one for the workload, one for protocol decisions and one for gossip peer
//! choice, so the workload is identical across modes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::credits::Credits;
use crate::duel::{self, DuelParams, DuelTicket, QualityModel, Verdict};
use crate::gossip::{self, PeerView};
use crate::ids::{DuelId, NodeId, RequestId, SimTime};
use crate::ledger::{
    self, Account, Chain, CreditBlock, CreditOperation, Finality, KeyedHashKeys, LedgerState, Vote,
};
use crate::node::{self, Decision, NodeState, Request, RequestKind, RestakeInput, RestakeRule};
use crate::scheduler::{self, ProbeReply, ProbeSession, SelectionConfig, StakeTable};
use crate::sim::scenario::{ChurnAction, NodeSpec, Scenario};
use crate::sim::trace::{Trace, TraceEvent};
use crate::sim::workload::{generate_workload, Arrival};
use crate::sim::{LedgerMode, Mode};

const WORKLOAD_STREAM: u64 = 0;
const PROTOCOL_STREAM: u64 = 1;
const GOSSIP_STREAM: u64 = 2;

#[derive(Clone, Debug)]
enum Ev {
    Arrival(usize),
    ProbeArrive { req: RequestId, target: NodeId },
    ProbeReply { req: RequestId, target: NodeId, reply: ProbeReply },
    Deliver { node: NodeId, request: Request },
    Finish { node: NodeId, req: RequestId },
    Response { executor: NodeId, request: Request },
    Retry(RequestId),
    GossipTick,
    RestakeTick,
    Sample,
    Churn(usize),
}

#[derive(Debug)]
struct Scheduled {
    time: SimTime,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct NodeRt {
    state: NodeState,
    online: bool,
    /// Credits promised to delegations that have not been paid yet.
    reserved: Credits,
    /// Realized serving payoff since the last restake step.
    payoff: f64,
    burned: Credits,
    last_restake: SimTime,
}

/// A user request waiting at its origin for an executor.
struct Pending {
    request: Request,
    session: Option<ProbeSession>,
}

struct DuelRt {
    ticket: DuelTicket,
    origin: NodeId,
    template: Request,
    incumbent_done: bool,
    challenger_done: bool,
    votes: usize,
}

/// The credit ledger as seen by the simulation: one serialized chain, or a
/// replica per node with majority finalization.
struct LedgerRt {
    mode: LedgerMode,
    keys: KeyedHashKeys,
    chain: Chain,
    replicas: BTreeMap<NodeId, Chain>,
}

impl LedgerRt {
    fn state(&self) -> &LedgerState {
        self.chain.state()
    }

    fn add_member(&mut self, seed: u64, node: &NodeId) {
        self.keys.insert_derived(seed, node.clone());
        if self.mode == LedgerMode::Chain {
            self.replicas.insert(node.clone(), self.chain.clone());
        }
    }

    /// Proposes, validates and (if accepted) applies a block. `voters` are
    /// the peers the proposer currently sees online.
    fn commit(
        &mut self,
        proposer: &NodeId,
        ops: Vec<CreditOperation>,
        now: SimTime,
        voters: &BTreeSet<NodeId>,
        trace: &mut Trace,
    ) -> bool {
        let block = match ledger::propose_block(ops, proposer, &self.keys, self.chain.head(), now.millis()) {
            Ok(b) => b,
            Err(e) => {
                trace.push(
                    now.micros(),
                    TraceEvent::BlockRejected {
                        proposer: proposer.clone(),
                        reason: e.to_string(),
                    },
                );
                return false;
            }
        };
        let finality = match self.mode {
            LedgerMode::Shared => self.append_shared(block.clone(), now, trace),
            LedgerMode::Chain => self.append_replicated(block.clone(), voters, now, trace),
        };
        if let Some(finality) = finality {
            trace.push(
                now.micros(),
                TraceEvent::Block {
                    height: self.chain.state().height,
                    proposer: proposer.clone(),
                    ops: block.operations.len(),
                    finality,
                },
            );
        }
        finality == Some(Finality::Finalized)
    }

    fn append_shared(&mut self, block: CreditBlock, now: SimTime, trace: &mut Trace) -> Option<Finality> {
        let proposer = block.proposer.clone();
        match self.chain.append(block, &self.keys) {
            Ok(()) => Some(Finality::Finalized),
            Err(r) => {
                trace.push(
                    now.micros(),
                    TraceEvent::BlockRejected {
                        proposer,
                        reason: r.to_string(),
                    },
                );
                None
            }
        }
    }

    fn append_replicated(
        &mut self,
        block: CreditBlock,
        voters: &BTreeSet<NodeId>,
        now: SimTime,
        trace: &mut Trace,
    ) -> Option<Finality> {
        let votes: BTreeMap<NodeId, Vote> = voters
            .iter()
            .filter_map(|v| {
                let replica = self.replicas.get(v)?;
                let vote = match ledger::validate_block(&block, replica.state(), &self.keys) {
                    Ok(()) => Vote::Accept,
                    Err(_) => Vote::Reject,
                };
                Some((v.clone(), vote))
            })
            .collect();
        let finality = ledger::finalize(&votes, voters);
        if finality == Finality::Finalized {
            if let Err(r) = self.chain.append(block.clone(), &self.keys) {
                trace.push(
                    now.micros(),
                    TraceEvent::BlockRejected {
                        proposer: block.proposer.clone(),
                        reason: r.to_string(),
                    },
                );
                return None;
            }
            for replica in self.replicas.values_mut() {
                replica.append_validated(block.clone());
            }
        }
        Some(finality)
    }
}

/// Everything a finished run produces.
pub struct RunArtifacts {
    pub trace: Trace,
    pub ledger: LedgerState,
    pub blocks: Vec<CreditBlock>,
}

pub(crate) struct Engine<'a> {
    scenario: &'a Scenario,
    mode: Mode,
    seed: u64,
    now: SimTime,
    horizon: SimTime,
    delay: SimTime,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    rng: ChaCha8Rng,
    gossip_rng: ChaCha8Rng,
    noise: Option<LogNormal<f64>>,
    workload: Vec<Arrival>,
    nodes: Vec<NodeRt>,
    index: HashMap<NodeId, usize>,
    pending: HashMap<RequestId, Pending>,
    open_users: BTreeMap<RequestId, NodeId>,
    duels: HashMap<DuelId, DuelRt>,
    next_req: RequestId,
    next_duel: DuelId,
    ledger: LedgerRt,
    duel_params: DuelParams,
    quality: QualityModel,
    trace: Trace,
}

impl<'a> Engine<'a> {
    pub(crate) fn new(scenario: &'a Scenario, mode: Mode, ledger_mode: LedgerMode, seed: u64) -> Self {
        let stream = |s| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(s);
            r
        };
        let workload = generate_workload(scenario, &mut stream(WORKLOAD_STREAM));
        let noise = (scenario.tokens.service_noise > 0.0)
            .then(|| LogNormal::new(0.0, scenario.tokens.service_noise).expect("validated noise"));
        Engine {
            scenario,
            mode,
            seed,
            now: SimTime::ZERO,
            horizon: SimTime::from_secs_f64(scenario.duration + scenario.drain),
            delay: SimTime::from_secs_f64(scenario.network.delay),
            queue: BinaryHeap::new(),
            seq: 0,
            rng: stream(PROTOCOL_STREAM),
            gossip_rng: stream(GOSSIP_STREAM),
            noise,
            next_req: workload.len() as RequestId,
            workload,
            nodes: Vec::new(),
            index: HashMap::new(),
            pending: HashMap::new(),
            open_users: BTreeMap::new(),
            duels: HashMap::new(),
            next_duel: 0,
            ledger: LedgerRt {
                mode: ledger_mode,
                keys: KeyedHashKeys::new(),
                chain: Chain::new(),
                replicas: BTreeMap::new(),
            },
            duel_params: scenario.duel_params(),
            quality: scenario.quality_model(),
            trace: Trace::default(),
        }
    }

    fn schedule(&mut self, at: SimTime, ev: Ev) {
        self.seq += 1;
        self.queue.push(Scheduled {
            time: at,
            seq: self.seq,
            ev,
        });
    }

    fn emit(&mut self, ev: TraceEvent) {
        self.trace.push(self.now.micros(), ev);
    }

    fn idx(&self, node: &NodeId) -> usize {
        self.index[node]
    }

    fn node(&self, node: &NodeId) -> &NodeRt {
        &self.nodes[self.idx(node)]
    }

    fn node_mut(&mut self, node: &NodeId) -> &mut NodeRt {
        let i = self.idx(node);
        &mut self.nodes[i]
    }

    fn decentralized(&self) -> bool {
        self.mode == Mode::Decentralized
    }

    fn base_reward(&self) -> Credits {
        self.scenario.economics.base_reward
    }

    fn spendable(&self, node: &NodeId) -> Credits {
        let acc = self.ledger.state().balance_of(node);
        acc.free.saturating_sub(self.node(node).reserved)
    }

    fn voters(&self, proposer: &NodeId) -> BTreeSet<NodeId> {
        let mut set = self.node(proposer).state.peer_view.online_set();
        set.insert(proposer.clone());
        set
    }

    fn commit(&mut self, proposer: &NodeId, ops: Vec<CreditOperation>) -> bool {
        let voters = self.voters(proposer);
        self.ledger.commit(proposer, ops, self.now, &voters, &mut self.trace)
    }

    /// Adds a node with an empty view, funds it and locks its stake.
    fn add_node(&mut self, spec: &NodeSpec) {
        let view = PeerView::new(spec.id.clone(), format!("sim://{}", spec.id), self.now);
        let state = NodeState::new(
            spec.id.clone(),
            spec.model.clone(),
            spec.server.clone(),
            view,
            spec.cost,
            spec.quality,
        );
        self.index.insert(spec.id.clone(), self.nodes.len());
        self.nodes.push(NodeRt {
            state,
            online: true,
            reserved: Credits::ZERO,
            payoff: 0.0,
            burned: Credits::ZERO,
            last_restake: self.now,
        });
        self.ledger.add_member(self.seed, &spec.id);
        let mut ops = vec![CreditOperation::genesis_grant(spec.id.clone(), spec.genesis)];
        if !spec.server.stake_amount.is_zero() {
            ops.push(CreditOperation::stake_lock(spec.id.clone(), spec.server.stake_amount));
        }
        self.commit(&spec.id, ops);
    }

    fn bootstrap(&mut self) {
        for spec in &self.scenario.nodes {
            self.add_node(spec);
        }
        // Initial members start with a full, consistent view of each other.
        let records: Vec<_> = self
            .nodes
            .iter()
            .map(|n| n.state.peer_view.own_record().clone())
            .collect();
        for n in &mut self.nodes {
            for r in &records {
                n.state.peer_view.records.insert(r.node_id.clone(), r.clone());
            }
        }
        for i in 0..self.workload.len() {
            let t = self.workload[i].time;
            self.schedule(t, Ev::Arrival(i));
        }
        for (i, ev) in self.scenario.churn.iter().enumerate() {
            self.schedule(SimTime::from_secs_f64(ev.time), Ev::Churn(i));
        }
        if self.decentralized() {
            let hb = SimTime::from_secs_f64(self.scenario.gossip.heartbeat_period);
            self.schedule(hb, Ev::GossipTick);
            let rp = SimTime::from_secs_f64(self.scenario.economics.restake_period);
            self.schedule(rp, Ev::RestakeTick);
        }
        self.schedule(SimTime::ZERO, Ev::Sample);
    }

    pub(crate) fn run(mut self) -> RunArtifacts {
        self.bootstrap();
        while let Some(Scheduled { time, ev, .. }) = self.queue.pop() {
            if time > self.horizon {
                break;
            }
            self.now = time;
            self.handle(ev);
        }
        self.now = self.horizon;
        for (req, node) in std::mem::take(&mut self.open_users) {
            self.emit(TraceEvent::Open { req, node });
        }
        self.sample();
        RunArtifacts {
            ledger: self.ledger.state().clone(),
            blocks: self.ledger.chain.blocks().to_vec(),
            trace: self.trace,
        }
    }

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::Arrival(i) => self.on_arrival(i),
            Ev::ProbeArrive { req, target } => self.on_probe_arrive(req, target),
            Ev::ProbeReply { req, target, reply } => self.on_probe_reply(req, target, reply),
            Ev::Deliver { node, request } => self.on_deliver(node, request),
            Ev::Finish { node, req } => self.on_finish(node, req),
            Ev::Response { executor, request } => self.on_response(executor, request),
            Ev::Retry(req) => self.try_delegate(req),
            Ev::GossipTick => self.on_gossip_tick(),
            Ev::RestakeTick => self.on_restake_tick(),
            Ev::Sample => {
                self.sample();
                let next = self.now + SimTime::from_secs_f64(self.scenario.sample_interval);
                if next < self.horizon {
                    self.schedule(next, Ev::Sample);
                }
            }
            Ev::Churn(i) => self.on_churn(i),
        }
    }

    fn sample(&mut self) {
        for i in 0..self.nodes.len() {
            let n = &self.nodes[i];
            let Account { free, staked } = self.ledger.state().balance_of(&n.state.id);
            let ev = TraceEvent::Sample {
                node: n.state.id.clone(),
                online: n.online,
                running: n.state.running().len(),
                own_queue: n.state.own_queue_len(),
                delegated_queue: n.state.delegated_queue_len(),
                free,
                staked,
            };
            self.emit(ev);
        }
    }

    // ---- request lifecycle -------------------------------------------------

    fn on_arrival(&mut self, i: usize) {
        let a = self.workload[i].clone();
        let request = Request {
            id: i as RequestId,
            origin: a.node.clone(),
            user_submit_time: a.time,
            kind: RequestKind::User,
            prompt_tokens: a.prompt_tokens,
            output_tokens: a.output_tokens,
            slo_deadline: SimTime::from_secs_f64(self.scenario.slo_threshold),
            duel_id: None,
        };
        self.emit(TraceEvent::Arrival {
            req: request.id,
            node: a.node.clone(),
            prompt_tokens: a.prompt_tokens,
            output_tokens: a.output_tokens,
        });
        self.open_users.insert(request.id, a.node.clone());
        match self.mode {
            Mode::Single => {
                if !self.node(&a.node).state.backend.is_requester_only() {
                    self.execute_at(&a.node, request);
                }
            }
            Mode::Centralized => self.dispatch_central(request),
            Mode::Decentralized => {
                let id = request.id;
                self.pending.insert(
                    id,
                    Pending {
                        request,
                        session: None,
                    },
                );
                self.try_delegate(id);
            }
        }
    }

    /// Admits a request at `node` and starts whatever fits.
    fn execute_at(&mut self, node: &NodeId, request: Request) {
        let (id, kind) = (request.id, request.kind);
        let now = self.now;
        let admitted = self.node_mut(node).state.admit(request, now);
        if admitted.is_err() {
            return;
        }
        self.emit(TraceEvent::Admit {
            req: id,
            node: node.clone(),
            kind,
        });
        self.kick(node);
    }

    fn kick(&mut self, node: &NodeId) {
        let i = self.idx(node);
        let now = self.now;
        let started = {
            let noise = self.noise;
            let rng = &mut self.rng;
            self.nodes[i]
                .state
                .execute(now, || noise.map_or(1.0, |d| d.sample(rng)))
        };
        for run in started {
            self.emit(TraceEvent::Start {
                req: run.request.id,
                node: node.clone(),
                kind: run.request.kind,
            });
            self.schedule(
                run.finish,
                Ev::Finish {
                    node: node.clone(),
                    req: run.request.id,
                },
            );
        }
    }

    fn send(&mut self, from: &NodeId, to: &NodeId, request: Request) {
        self.emit(TraceEvent::Dispatch {
            req: request.id,
            from: from.clone(),
            to: to.clone(),
            kind: request.kind,
        });
        self.schedule(
            self.now + self.delay,
            Ev::Deliver {
                node: to.clone(),
                request,
            },
        );
    }

    fn on_deliver(&mut self, node: NodeId, request: Request) {
        self.execute_at(&node, request);
    }

    fn on_finish(&mut self, node: NodeId, req: RequestId) {
        let Some(run) = self.node_mut(&node).state.finish(req) else {
            return;
        };
        let request = run.request;
        self.emit(TraceEvent::Finish {
            req,
            node: node.clone(),
            kind: request.kind,
        });
        self.kick(&node);
        if request.kind == RequestKind::User && request.origin == node {
            self.complete_user(&request, &node, false);
        } else {
            self.schedule(
                self.now + self.delay,
                Ev::Response {
                    executor: node,
                    request,
                },
            );
        }
    }

    fn complete_user(&mut self, request: &Request, executor: &NodeId, delegated: bool) {
        self.open_users.remove(&request.id);
        self.emit(TraceEvent::Complete {
            req: request.id,
            origin: request.origin.clone(),
            executor: executor.clone(),
            submit: request.user_submit_time.micros(),
            delegated,
        });
    }

    fn on_response(&mut self, executor: NodeId, request: Request) {
        match request.kind {
            RequestKind::User => self.complete_user(&request, &executor, false),
            RequestKind::Delegated => {
                self.complete_user(&request, &executor, true);
                self.pay(&executor, &request);
                if let Some(d) = request.duel_id {
                    if let Some(duel) = self.duels.get_mut(&d) {
                        duel.incumbent_done = true;
                    }
                    self.maybe_judge(d);
                }
            }
            RequestKind::DuelChallenge => {
                let d = request.duel_id.expect("challenge carries its duel");
                if let Some(duel) = self.duels.get_mut(&d) {
                    duel.challenger_done = true;
                }
                self.maybe_judge(d);
            }
            RequestKind::JudgeEval => {
                let d = request.duel_id.expect("judge request carries its duel");
                let ready = self.duels.get_mut(&d).is_some_and(|duel| {
                    duel.votes += 1;
                    duel.votes == duel.ticket.judges.len()
                });
                if ready {
                    self.settle_duel(d);
                }
            }
        }
    }

    fn pay(&mut self, executor: &NodeId, request: &Request) {
        let r = self.base_reward();
        let origin = request.origin.clone();
        let ops = node::complete_delegated(&origin, executor, request, r);
        let o = self.node_mut(&origin);
        o.reserved = o.reserved.saturating_sub(r);
        if self.commit(&origin, ops) {
            self.emit(TraceEvent::Payment {
                req: request.id,
                from: origin,
                to: executor.clone(),
                amount: r,
            });
            let e = self.node_mut(executor);
            e.payoff += r.to_f64() - e.state.cost;
        }
    }

    // ---- centralized baseline ----------------------------------------------

    fn dispatch_central(&mut self, request: Request) {
        let origin = request.origin.clone();
        let mut best: Option<(SimTime, bool, usize)> = None;
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.online {
                continue;
            }
            let remote = n.state.id != origin;
            let hop = if remote { self.delay } else { SimTime::ZERO };
            let service = n.state.backend.service_secs(&request);
            let Some(done) = n.state.predicted_completion(self.now + hop, service) else {
                continue;
            };
            let key = (done + hop, remote, i);
            if best.is_none_or(|b| key < b) {
                best = Some(key);
            }
        }
        let Some((_, remote, i)) = best else { return };
        let target = self.nodes[i].state.id.clone();
        if remote {
            self.send(&origin, &target, request);
        } else {
            self.execute_at(&target, request);
        }
    }

    // ---- decentralized pipeline --------------------------------------------

    fn stake_table(&self, owner: &NodeId) -> StakeTable {
        let state = self.ledger.state();
        self.node(owner)
            .state
            .peer_view
            .online_peers()
            .into_iter()
            .map(|p| {
                let staked = state.balance_of(&p).staked;
                (p, staked)
            })
            .collect()
    }

    /// Runs the local-versus-delegate decision for a pending user request
    /// and, when delegating, starts a probe session.
    fn try_delegate(&mut self, req: RequestId) {
        let Some(origin) = self.pending.get(&req).map(|p| p.request.origin.clone()) else {
            return;
        };
        let r = self.base_reward();
        let spendable = self.spendable(&origin);
        let decision = {
            let rng = &mut self.rng;
            self.nodes[self.index[&origin]].state.decide(spendable, r, rng)
        };
        self.emit(TraceEvent::Decision {
            req,
            node: origin.clone(),
            decision,
        });
        if decision == Decision::ExecuteLocal {
            self.run_locally(req);
            return;
        }
        let table = self.stake_table(&origin);
        let cfg = SelectionConfig::new(self.scenario.network.max_probes, BTreeSet::from([origin.clone()]))
            .expect("validated probe budget");
        match ProbeSession::new(&table, &cfg) {
            Ok(session) => {
                self.node_mut(&origin).reserved = self.node(&origin).reserved.saturating_add(r);
                self.pending.get_mut(&req).expect("pending").session = Some(session);
                self.next_probe(req);
            }
            Err(_) => self.exhausted(req),
        }
    }

    fn run_locally(&mut self, req: RequestId) {
        let Some(p) = self.pending.remove(&req) else { return };
        let origin = p.request.origin.clone();
        self.execute_at(&origin, p.request);
    }

    fn next_probe(&mut self, req: RequestId) {
        let Some(p) = self.pending.get_mut(&req) else { return };
        let origin = p.request.origin.clone();
        let candidate = p
            .session
            .as_mut()
            .and_then(|s| s.next_candidate(&mut self.rng));
        match candidate {
            Some(target) => self.schedule(self.now + self.delay, Ev::ProbeArrive { req, target }),
            None => {
                let r = self.base_reward();
                let o = self.node_mut(&origin);
                o.reserved = o.reserved.saturating_sub(r);
                self.exhausted(req);
            }
        }
    }

    /// No executor was found. Serving nodes fall back to local execution;
    /// requester-only nodes retry later.
    fn exhausted(&mut self, req: RequestId) {
        let origin = self.pending[&req].request.origin.clone();
        let requester_only = self.node(&origin).state.backend.is_requester_only();
        let retry_at = self.now + SimTime::from_secs_f64(self.scenario.network.retry_delay);
        let retry = requester_only && retry_at <= self.horizon;
        self.emit(TraceEvent::Exhausted {
            req,
            node: origin.clone(),
            retry,
        });
        if requester_only {
            if retry {
                self.pending.get_mut(&req).expect("pending").session = None;
                self.schedule(retry_at, Ev::Retry(req));
            }
        } else {
            self.run_locally(req);
        }
    }

    fn on_probe_arrive(&mut self, req: RequestId, target: NodeId) {
        let headroom = self.scenario.network.headroom;
        let reply = {
            let i = self.idx(&target);
            if self.nodes[i].online {
                let rng = &mut self.rng;
                self.nodes[i].state.probe_response(headroom, rng)
            } else {
                ProbeReply::Decline
            }
        };
        self.schedule(self.now + self.delay, Ev::ProbeReply { req, target, reply });
    }

    fn on_probe_reply(&mut self, req: RequestId, target: NodeId, reply: ProbeReply) {
        let Some(p) = self.pending.get_mut(&req) else { return };
        let origin = p.request.origin.clone();
        let chosen = p.session.as_mut().and_then(|s| s.on_reply(reply));
        self.emit(TraceEvent::Probe {
            req,
            from: origin.clone(),
            to: target.clone(),
            reply,
        });
        match chosen {
            Some(executor) => {
                let p = self.pending.remove(&req).expect("pending");
                let mut request = p.request.into_delegated().expect("user request");
                self.maybe_open_duel(&mut request, &origin, &executor);
                self.send(&origin, &executor, request);
            }
            None => self.next_probe(req),
        }
    }

    fn maybe_open_duel(&mut self, request: &mut Request, origin: &NodeId, incumbent: &NodeId) {
        if !duel::designate(request, self.duel_params.p_d(), &mut self.rng) {
            return;
        }
        let k = self.duel_params.judges();
        let table = self.stake_table(origin);
        let exclude = BTreeSet::from([origin.clone(), incumbent.clone()]);
        let picks = match scheduler::sample_distinct(&table, 1 + k, &mut self.rng, &exclude) {
            Ok(p) => p,
            Err(e) => {
                self.emit(TraceEvent::DuelSkipped {
                    req: request.id,
                    reason: e.to_string(),
                });
                return;
            }
        };
        let duel_id = self.next_duel;
        self.next_duel += 1;
        let ticket = DuelTicket::new(
            duel_id,
            request.id,
            origin,
            incumbent.clone(),
            picks[0].clone(),
            picks[1..].to_vec(),
        )
        .expect("sampled participants are distinct");
        request.duel_id = Some(duel_id);
        self.emit(TraceEvent::DuelOpen {
            duel: duel_id,
            req: request.id,
            incumbent: incumbent.clone(),
            challenger: ticket.challenger.clone(),
            judges: ticket.judges.clone(),
        });
        let challenge = Request {
            id: self.fresh_id(),
            kind: RequestKind::DuelChallenge,
            duel_id: Some(duel_id),
            ..request.clone()
        };
        let challenger = ticket.challenger.clone();
        self.duels.insert(
            duel_id,
            DuelRt {
                ticket,
                origin: origin.clone(),
                template: request.clone(),
                incumbent_done: false,
                challenger_done: false,
                votes: 0,
            },
        );
        self.send(origin, &challenger, challenge);
    }

    fn fresh_id(&mut self) -> RequestId {
        let id = self.next_req;
        self.next_req += 1;
        id
    }

    /// Once both responses are in, the origin asks every judge for a
    /// pairwise evaluation.
    fn maybe_judge(&mut self, d: DuelId) {
        let Some(duel) = self.duels.get(&d) else { return };
        if !(duel.incumbent_done && duel.challenger_done) {
            return;
        }
        let origin = duel.origin.clone();
        let judges = duel.ticket.judges.clone();
        let template = duel.template.clone();
        for judge in judges {
            let eval = Request {
                id: self.fresh_id(),
                kind: RequestKind::JudgeEval,
                duel_id: Some(d),
                ..template.clone()
            };
            self.send(&origin, &judge, eval);
        }
    }

    fn settle_duel(&mut self, d: DuelId) {
        let duel = self.duels.remove(&d).expect("open duel");
        let t = &duel.ticket;
        let latent = duel::latent_winner(&t.incumbent, &t.challenger, &self.quality, &mut self.rng);
        let mut outcome = duel::judge_vote(t, &latent, &self.quality, &mut self.rng);
        let ops = duel::settle(&outcome, &self.duel_params);
        let burned = match outcome.loser() {
            Some(l) => self.ledger.state().penalty_burn(l, self.duel_params.penalty),
            None => Credits::ZERO,
        };
        outcome.settlement = ops.clone();
        if !self.commit(&duel.origin, ops) {
            return;
        }
        if let Verdict::Winner(w) = &outcome.declared {
            let r_add = self.duel_params.r_add.to_f64();
            self.node_mut(w).payoff += r_add;
        }
        if let Some(l) = outcome.loser().cloned() {
            let n = self.node_mut(&l);
            n.payoff -= burned.to_f64();
            n.burned = n.burned.saturating_add(burned);
        }
        let r_judge = self.duel_params.r_judge.to_f64();
        for j in &t.judges {
            let n = &mut self.nodes[self.index[j]];
            n.payoff += r_judge;
        }
        self.emit(TraceEvent::Duel {
            duel: d,
            req: t.request_id,
            incumbent: t.incumbent.clone(),
            challenger: t.challenger.clone(),
            latent: outcome.latent_winner,
            votes: outcome.votes,
            declared: outcome.declared,
            burned,
        });
    }

    // ---- periodic protocol work --------------------------------------------

    fn on_gossip_tick(&mut self) {
        let cfg = self.scenario.gossip;
        let now = self.now;
        let mut views = BTreeMap::new();
        for n in self.nodes.iter_mut().filter(|n| n.online) {
            let blank = PeerView {
                owner: n.state.id.clone(),
                records: BTreeMap::new(),
            };
            let view = std::mem::replace(&mut n.state.peer_view, blank);
            views.insert(n.state.id.clone(), gossip::local_tick(view, now, &cfg));
        }
        gossip::gossip_round(&mut views, cfg.fanout, &mut self.gossip_rng);
        for (id, view) in views {
            let i = self.index[&id];
            self.nodes[i].state.peer_view = view;
        }
        let next = now + SimTime::from_secs_f64(cfg.heartbeat_period);
        if next <= self.horizon {
            self.schedule(next, Ev::GossipTick);
        }
    }

    fn on_restake_tick(&mut self) {
        for i in 0..self.nodes.len() {
            let n = &self.nodes[i];
            if !n.online || !matches!(n.state.policy.restake, RestakeRule::Proportional(_)) {
                continue;
            }
            let id = n.state.id.clone();
            let period = self.now.saturating_sub(n.last_restake).as_secs_f64();
            if period <= 0.0 {
                continue;
            }
            let input = RestakeInput {
                balance: self.ledger.state().balance_of(&id),
                spendable: self.spendable(&id),
                payoff_rate: n.payoff / period,
                period,
                stake_burned: n.burned,
            };
            let op = node::restake_tick(&id, &n.state.policy, input);
            let n = &mut self.nodes[i];
            n.payoff = 0.0;
            n.burned = Credits::ZERO;
            n.last_restake = self.now;
            if let Some(op) = op {
                let (kind, amount) = (op.kind, op.amount);
                if self.commit(&id, vec![op]) {
                    self.emit(TraceEvent::Restake { node: id, kind, amount });
                }
            }
        }
        let next = self.now + SimTime::from_secs_f64(self.scenario.economics.restake_period);
        if next <= self.horizon {
            self.schedule(next, Ev::RestakeTick);
        }
    }

    fn on_churn(&mut self, i: usize) {
        match &self.scenario.churn[i].action {
            ChurnAction::Join(spec) => {
                self.add_node(spec);
                if self.decentralized() {
                    self.register_with_bootstrap(&spec.id);
                }
                self.emit(TraceEvent::Join { node: spec.id.clone() });
            }
            ChurnAction::Leave(node) => {
                let node = node.clone();
                self.node_mut(&node).online = false;
                self.emit(TraceEvent::Leave { node });
            }
        }
    }

    /// Introduces a joiner to the lowest-id online member; gossip spreads it
    /// from there.
    fn register_with_bootstrap(&mut self, joiner: &NodeId) {
        let Some(boot) = self
            .nodes
            .iter()
            .filter(|n| n.online && n.state.id != *joiner)
            .map(|n| n.state.id.clone())
            .min()
        else {
            return;
        };
        let mut views = BTreeMap::new();
        let bi = self.idx(&boot);
        views.insert(boot.clone(), self.nodes[bi].state.peer_view.clone());
        let endpoint = format!("sim://{joiner}");
        if gossip::register_join(&mut views, joiner.clone(), endpoint, &boot, self.now).is_ok() {
            for (id, view) in views {
                let i = self.idx(&id);
                self.nodes[i].state.peer_view = view;
            }
        }
    }
}
