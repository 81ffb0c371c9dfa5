//! Duel-and-judge quality settlement.
//!
//! A delegated request is occasionally re-run by a stake-sampled challenger;
//! `k` stake-sampled judges then vote on which response is better. The
//! latent (true) winner follows the pairwise law
//! `w(i, j) = ½(1 + q_i − q_j)`, whose expectation over a stake-sampled
//! opponent is `½(1 + q_i − Q̄)`. Judges see the latent winner through
//! independent noise of accuracy `a`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credits::Credits;
use crate::ids::{DuelId, NodeId, RequestId};
use crate::ledger::CreditOperation;
use crate::node::{Request, RequestKind};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DuelError {
    #[error("quality of {0} must lie in [0, 1]")]
    QualityOutOfRange(NodeId),
    #[error("judge accuracy must lie in [0.5, 1]")]
    AccuracyOutOfRange,
    #[error("duel probability must lie in [0, 1]")]
    ProbabilityOutOfRange,
    #[error("at least one judge is required")]
    NoJudges,
    #[error("duel participants must be pairwise distinct")]
    ParticipantsNotDistinct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityModel {
    quality: BTreeMap<NodeId, f64>,
    judge_accuracy: f64,
}

impl QualityModel {
    pub fn new(quality: BTreeMap<NodeId, f64>, judge_accuracy: f64) -> Result<Self, DuelError> {
        if let Some((n, _)) = quality.iter().find(|(_, q)| !(0.0..=1.0).contains(*q)) {
            return Err(DuelError::QualityOutOfRange(n.clone()));
        }
        if !(0.5..=1.0).contains(&judge_accuracy) {
            return Err(DuelError::AccuracyOutOfRange);
        }
        Ok(QualityModel {
            quality,
            judge_accuracy,
        })
    }

    /// Unknown nodes default to quality 0.
    pub fn quality(&self, node: &NodeId) -> f64 {
        self.quality.get(node).copied().unwrap_or(0.0)
    }

    pub fn judge_accuracy(&self) -> f64 {
        self.judge_accuracy
    }

    pub fn set_quality(&mut self, node: NodeId, q: f64) -> Result<(), DuelError> {
        if !(0.0..=1.0).contains(&q) {
            return Err(DuelError::QualityOutOfRange(node));
        }
        self.quality.insert(node, q);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuelTicket {
    pub duel_id: DuelId,
    pub request_id: RequestId,
    pub incumbent: NodeId,
    pub challenger: NodeId,
    pub judges: Vec<NodeId>,
}

impl DuelTicket {
    /// Checks that originator, incumbent, challenger and judges are pairwise
    /// distinct and that there is at least one judge.
    pub fn new(
        duel_id: DuelId,
        request_id: RequestId,
        originator: &NodeId,
        incumbent: NodeId,
        challenger: NodeId,
        judges: Vec<NodeId>,
    ) -> Result<Self, DuelError> {
        if judges.is_empty() {
            return Err(DuelError::NoJudges);
        }
        let mut all: BTreeSet<&NodeId> = BTreeSet::new();
        let distinct = [originator, &incumbent, &challenger]
            .into_iter()
            .chain(judges.iter())
            .all(|n| all.insert(n));
        if !distinct {
            return Err(DuelError::ParticipantsNotDistinct);
        }
        Ok(DuelTicket {
            duel_id,
            request_id,
            incumbent,
            challenger,
            judges,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuelParams {
    p_d: f64,
    judges: usize,
    pub r_add: Credits,
    pub penalty: Credits,
    pub r_judge: Credits,
}

impl DuelParams {
    pub fn new(
        p_d: f64,
        judges: usize,
        r_add: Credits,
        penalty: Credits,
        r_judge: Credits,
    ) -> Result<Self, DuelError> {
        if !(0.0..=1.0).contains(&p_d) {
            return Err(DuelError::ProbabilityOutOfRange);
        }
        if judges == 0 {
            return Err(DuelError::NoJudges);
        }
        Ok(DuelParams {
            p_d,
            judges,
            r_add,
            penalty,
            r_judge,
        })
    }

    pub fn p_d(&self) -> f64 {
        self.p_d
    }

    pub fn judges(&self) -> usize {
        self.judges
    }

    pub fn with_p_d(&self, p_d: f64) -> Result<Self, DuelError> {
        Self::new(p_d, self.judges, self.r_add, self.penalty, self.r_judge)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Winner(NodeId),
    Draw,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuelOutcome {
    pub ticket: DuelTicket,
    pub latent_winner: NodeId,
    /// `(judge, voted-for)` in ticket order.
    pub votes: Vec<(NodeId, NodeId)>,
    pub declared: Verdict,
    pub settlement: Vec<CreditOperation>,
}

impl DuelOutcome {
    pub fn loser(&self) -> Option<&NodeId> {
        match &self.declared {
            Verdict::Draw => None,
            Verdict::Winner(w) if *w == self.ticket.incumbent => Some(&self.ticket.challenger),
            Verdict::Winner(_) => Some(&self.ticket.incumbent),
        }
    }
}

/// Whether a request becomes a duel. Only delegated requests qualify, so
/// duel traffic never spawns further duels.
pub fn designate<R: Rng + ?Sized>(request: &Request, p_d: f64, rng: &mut R) -> bool {
    request.kind == RequestKind::Delegated && rng.random_bool(p_d)
}

/// Pairwise win probability `½(1 + q_i − q_j)`.
pub fn pairwise_win_prob(q_i: f64, q_j: f64) -> f64 {
    (0.5 * (1.0 + q_i - q_j)).clamp(0.0, 1.0)
}

pub fn latent_winner<R: Rng + ?Sized>(
    incumbent: &NodeId,
    challenger: &NodeId,
    qm: &QualityModel,
    rng: &mut R,
) -> NodeId {
    let w = pairwise_win_prob(qm.quality(incumbent), qm.quality(challenger));
    if rng.random_bool(w) {
        incumbent.clone()
    } else {
        challenger.clone()
    }
}

/// Each judge independently votes for the latent winner with probability
/// `judge_accuracy`; a strict majority declares the winner, anything else
/// is a draw.
pub fn judge_vote<R: Rng + ?Sized>(
    ticket: &DuelTicket,
    latent: &NodeId,
    qm: &QualityModel,
    rng: &mut R,
) -> DuelOutcome {
    let other = if *latent == ticket.incumbent {
        &ticket.challenger
    } else {
        &ticket.incumbent
    };
    let votes: Vec<(NodeId, NodeId)> = ticket
        .judges
        .iter()
        .map(|j| {
            let pick = if rng.random_bool(qm.judge_accuracy()) {
                latent
            } else {
                other
            };
            (j.clone(), pick.clone())
        })
        .collect();
    let for_latent = votes.iter().filter(|(_, v)| v == latent).count();
    let k = votes.len();
    let declared = if 2 * for_latent > k {
        Verdict::Winner(latent.clone())
    } else if 2 * (k - for_latent) > k {
        Verdict::Winner(other.clone())
    } else {
        Verdict::Draw
    };
    DuelOutcome {
        ticket: ticket.clone(),
        latent_winner: latent.clone(),
        votes,
        declared,
        settlement: Vec::new(),
    }
}

/// Winner reward, loser penalty, then one judge reward per judge in ticket
/// order. A draw pays the judges only.
pub fn settle(outcome: &DuelOutcome, params: &DuelParams) -> Vec<CreditOperation> {
    let duel = outcome.ticket.duel_id;
    let mut ops = Vec::with_capacity(2 + outcome.ticket.judges.len());
    if let (Verdict::Winner(w), Some(l)) = (&outcome.declared, outcome.loser()) {
        ops.push(CreditOperation::duel_win_reward(w.clone(), params.r_add, duel));
        ops.push(CreditOperation::duel_penalty(l.clone(), params.penalty, duel));
    }
    ops.extend(
        outcome
            .ticket
            .judges
            .iter()
            .map(|j| CreditOperation::judge_reward(j.clone(), params.r_judge, duel)),
    );
    ops
}

/// `Q_i = ½(1 + q_i − Q̄)`.
pub fn expected_win_prob(q_i: f64, q_bar: f64) -> f64 {
    (0.5 * (1.0 + q_i - q_bar)).clamp(0.0, 1.0)
}

/// Expected extra requests `N · α · p_d · (1 + k)`.
pub fn overhead(n_requests: f64, alpha: f64, p_d: f64, k: usize) -> f64 {
    n_requests * alpha * p_d * (1.0 + k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::SimTime;
    use crate::ledger::OpKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn n(s: &str) -> NodeId {
        NodeId::from(s)
    }

    fn qm(pairs: &[(&str, f64)], a: f64) -> QualityModel {
        QualityModel::new(pairs.iter().map(|(k, q)| (n(k), *q)).collect(), a).unwrap()
    }

    fn ticket(k: usize) -> DuelTicket {
        let judges = (0..k).map(|i| n(&format!("j{i}"))).collect();
        DuelTicket::new(1, 9, &n("o"), n("i"), n("c"), judges).unwrap()
    }

    fn request(kind: RequestKind) -> Request {
        Request {
            id: 1,
            origin: n("o"),
            user_submit_time: SimTime::ZERO,
            kind,
            prompt_tokens: 1,
            output_tokens: 1,
            slo_deadline: SimTime::ZERO,
            duel_id: None,
        }
    }

    #[test]
    fn designate_extremes_and_no_recursion() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = request(RequestKind::Delegated);
        assert!((0..100).all(|_| !designate(&d, 0.0, &mut rng)));
        assert!((0..100).all(|_| designate(&d, 1.0, &mut rng)));
        for kind in [RequestKind::User, RequestKind::DuelChallenge, RequestKind::JudgeEval] {
            assert!(!designate(&request(kind), 1.0, &mut rng));
        }
    }

    #[test]
    fn latent_winner_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = qm(&[("i", 1.0), ("c", 0.0)], 0.9);
        assert!((0..200).all(|_| latent_winner(&n("i"), &n("c"), &m, &mut rng) == n("i")));
        assert_eq!(pairwise_win_prob(0.3, 0.3), 0.5);
    }

    #[test]
    fn perfect_judges_are_unanimous() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = qm(&[("i", 0.5), ("c", 0.5)], 1.0);
        let t = ticket(3);
        let out = judge_vote(&t, &n("c"), &m, &mut rng);
        assert_eq!(out.declared, Verdict::Winner(n("c")));
        assert!(out.votes.iter().all(|(_, v)| *v == n("c")));
        assert_eq!(out.loser(), Some(&n("i")));
    }

    #[test]
    fn settle_draw_and_win() {
        let params = DuelParams::new(0.1, 2, Credits::from_whole(2), Credits::from_whole(1), Credits::from_micros(100_000)).unwrap();
        let mut out = judge_vote(&ticket(2), &n("i"), &qm(&[], 1.0), &mut ChaCha8Rng::seed_from_u64(0));
        out.declared = Verdict::Draw;
        let ops = settle(&out, &params);
        assert_eq!(ops.len(), 2);
        assert!(ops.iter().all(|o| o.kind == OpKind::JudgeReward && o.duel_id == Some(1)));

        let params = DuelParams::new(0.1, 3, Credits::from_whole(2), Credits::from_whole(1), Credits::from_micros(100_000)).unwrap();
        let out = judge_vote(&ticket(3), &n("i"), &qm(&[], 1.0), &mut ChaCha8Rng::seed_from_u64(0));
        let ops = settle(&out, &params);
        assert_eq!(ops.len(), 5);
        assert_eq!(ops[0].kind, OpKind::DuelWinReward);
        assert_eq!(ops[0].to, Some(n("i")));
        assert_eq!(ops[1].kind, OpKind::DuelPenalty);
        assert_eq!(ops[1].from, Some(n("c")));
        let minted: Credits = ops
            .iter()
            .filter(|o| matches!(o.kind, OpKind::DuelWinReward | OpKind::JudgeReward))
            .map(|o| o.amount)
            .sum();
        assert_eq!(minted, Credits::from_micros(2_300_000));
    }

    #[test]
    fn params_and_tickets_validate() {
        let c = Credits::ZERO;
        assert_eq!(DuelParams::new(0.1, 0, c, c, c), Err(DuelError::NoJudges));
        assert_eq!(DuelParams::new(1.5, 1, c, c, c), Err(DuelError::ProbabilityOutOfRange));
        assert_eq!(
            DuelTicket::new(1, 1, &n("o"), n("a"), n("a"), vec![n("j")]),
            Err(DuelError::ParticipantsNotDistinct)
        );
        assert_eq!(
            DuelTicket::new(1, 1, &n("o"), n("a"), n("b"), vec![n("o")]),
            Err(DuelError::ParticipantsNotDistinct)
        );
        assert!(QualityModel::new(BTreeMap::new(), 0.4).is_err());
        assert!(QualityModel::new([(n("x"), 1.2)].into(), 0.9).is_err());
    }

    #[test]
    fn closed_forms() {
        assert!((expected_win_prob(0.4, 0.4) - 0.5).abs() < 1e-15);
        assert_eq!(expected_win_prob(1.0, 0.0), 1.0);
        assert!((overhead(1000.0, 0.8, 0.1, 2) - 240.0).abs() < 1e-9);
        assert_eq!(overhead(1000.0, 0.8, 0.0, 2), 0.0);
    }
}
