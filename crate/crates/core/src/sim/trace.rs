//! Append-only event trace. Every metric is a pure function of it.

use serde::{Deserialize, Serialize};

use crate::credits::Credits;
use crate::duel::Verdict;
use crate::ids::{DuelId, NodeId, RequestId};
use crate::ledger::{Finality, OpKind};
use crate::node::{Decision, RequestKind};
use crate::scheduler::ProbeReply;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "snake_case")]
pub enum TraceEvent {
    /// A user request entered the system at its origin.
    Arrival {
        req: RequestId,
        node: NodeId,
        prompt_tokens: u32,
        output_tokens: u32,
    },
    Decision {
        req: RequestId,
        node: NodeId,
        decision: Decision,
    },
    /// A probe reply reached the origin.
    Probe {
        req: RequestId,
        from: NodeId,
        to: NodeId,
        reply: ProbeReply,
    },
    /// Every probe was declined; `retry` marks a scheduled re-attempt.
    Exhausted {
        req: RequestId,
        node: NodeId,
        retry: bool,
    },
    /// A request was sent to another node for execution.
    Dispatch {
        req: RequestId,
        from: NodeId,
        to: NodeId,
        kind: RequestKind,
    },
    Admit {
        req: RequestId,
        node: NodeId,
        kind: RequestKind,
    },
    Start {
        req: RequestId,
        node: NodeId,
        kind: RequestKind,
    },
    Finish {
        req: RequestId,
        node: NodeId,
        kind: RequestKind,
    },
    /// The user-visible response is available at the origin.
    Complete {
        req: RequestId,
        origin: NodeId,
        executor: NodeId,
        /// Submission time in microseconds.
        submit: u64,
        delegated: bool,
    },
    Payment {
        req: RequestId,
        from: NodeId,
        to: NodeId,
        amount: Credits,
    },
    DuelOpen {
        duel: DuelId,
        req: RequestId,
        incumbent: NodeId,
        challenger: NodeId,
        judges: Vec<NodeId>,
    },
    DuelSkipped {
        req: RequestId,
        reason: String,
    },
    Duel {
        duel: DuelId,
        req: RequestId,
        incumbent: NodeId,
        challenger: NodeId,
        latent: NodeId,
        votes: Vec<(NodeId, NodeId)>,
        declared: Verdict,
        burned: Credits,
    },
    Restake {
        node: NodeId,
        kind: OpKind,
        amount: Credits,
    },
    Block {
        height: u64,
        proposer: NodeId,
        ops: usize,
        finality: Finality,
    },
    BlockRejected {
        proposer: NodeId,
        reason: String,
    },
    Sample {
        node: NodeId,
        online: bool,
        running: usize,
        own_queue: usize,
        delegated_queue: usize,
        free: Credits,
        staked: Credits,
    },
    Join {
        node: NodeId,
    },
    Leave {
        node: NodeId,
    },
    /// A user request still unfinished at the horizon.
    Open {
        req: RequestId,
        node: NodeId,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Simulated time in microseconds.
    pub t: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, t: u64, event: TraceEvent) {
        self.records.push(TraceRecord { t, event });
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Trace, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Trace { records })
    }
}
