//! Stake-weighted executor selection.
//!
//! Sampling works on integer micro-credit stakes: a uniform integer is drawn
//! below the eligible total and located on the cumulative stake line, so the
//! selection law is exactly `s_i / Σ s_j` with no float rounding.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::credits::Credits;
use crate::ids::NodeId;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SchedulerError {
    #[error("no eligible node holds a positive stake")]
    AllZeroStake,
    #[error("requested {requested} distinct nodes but only {eligible} are eligible")]
    NotEnoughPeers { requested: usize, eligible: usize },
    #[error("max_probes must be at least 1")]
    InvalidConfig,
}

/// Staked credits of the peers a node can currently see.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StakeTable {
    entries: BTreeMap<NodeId, Credits>,
}

impl StakeTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, node: NodeId, stake: Credits) {
        self.entries.insert(node, stake);
    }

    pub fn get(&self, node: &NodeId) -> Option<Credits> {
        self.entries.get(node).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, Credits)> {
        self.entries.iter().map(|(n, c)| (n, *c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Positive-stake entries not in `exclusions`, in id order.
    pub fn eligible(&self, exclusions: &BTreeSet<NodeId>) -> Vec<(NodeId, u64)> {
        self.entries
            .iter()
            .filter(|(n, s)| !s.is_zero() && !exclusions.contains(*n))
            .map(|(n, s)| (n.clone(), s.micros()))
            .collect()
    }
}

impl FromIterator<(NodeId, Credits)> for StakeTable {
    fn from_iter<I: IntoIterator<Item = (NodeId, Credits)>>(iter: I) -> Self {
        StakeTable {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionConfig {
    max_probes: usize,
    pub exclusions: BTreeSet<NodeId>,
}

impl SelectionConfig {
    pub fn new(max_probes: usize, exclusions: BTreeSet<NodeId>) -> Result<Self, SchedulerError> {
        if max_probes == 0 {
            return Err(SchedulerError::InvalidConfig);
        }
        Ok(SelectionConfig {
            max_probes,
            exclusions,
        })
    }

    pub fn max_probes(&self) -> usize {
        self.max_probes
    }
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            max_probes: 3,
            exclusions: BTreeSet::new(),
        }
    }
}

/// Selection probabilities `s_i / Σ s_j` over eligible nodes.
pub fn selection_distribution(
    table: &StakeTable,
    exclusions: &BTreeSet<NodeId>,
) -> Result<BTreeMap<NodeId, f64>, SchedulerError> {
    let eligible = table.eligible(exclusions);
    let total: u128 = eligible.iter().map(|(_, s)| u128::from(*s)).sum();
    if total == 0 {
        return Err(SchedulerError::AllZeroStake);
    }
    Ok(eligible
        .into_iter()
        .map(|(n, s)| (n, s as f64 / total as f64))
        .collect())
}

/// Removes and returns one stake-weighted draw from `pool`.
fn draw<R: Rng + ?Sized>(pool: &mut Vec<(NodeId, u64)>, rng: &mut R) -> Option<NodeId> {
    let total: u128 = pool.iter().map(|(_, s)| u128::from(*s)).sum();
    if total == 0 {
        return None;
    }
    let mut ticket = rng.random_range(0..total);
    let idx = pool
        .iter()
        .position(|(_, s)| {
            let s = u128::from(*s);
            if ticket < s {
                true
            } else {
                ticket -= s;
                false
            }
        })
        .expect("ticket below total");
    Some(pool.remove(idx).0)
}

/// Draws `m` distinct nodes sequentially without replacement,
/// renormalizing over the remaining stake after each draw.
pub fn sample_distinct<R: Rng + ?Sized>(
    table: &StakeTable,
    m: usize,
    rng: &mut R,
    exclusions: &BTreeSet<NodeId>,
) -> Result<Vec<NodeId>, SchedulerError> {
    let mut pool = table.eligible(exclusions);
    if pool.is_empty() && m > 0 {
        return Err(SchedulerError::AllZeroStake);
    }
    if m > pool.len() {
        return Err(SchedulerError::NotEnoughPeers {
            requested: m,
            eligible: pool.len(),
        });
    }
    Ok((0..m)
        .map(|_| draw(&mut pool, rng).expect("pool holds positive stakes"))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeReply {
    Accept,
    Decline,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Selection {
    Chosen(NodeId),
    Exhausted,
}

/// The willingness-probe loop as an explicit state machine: the caller asks
/// for a candidate, sends it a probe, and reports the reply. Only one probe
/// is outstanding at a time.
#[derive(Clone, Debug)]
pub struct ProbeSession {
    pool: Vec<(NodeId, u64)>,
    probes_left: usize,
    issued: Vec<NodeId>,
    chosen: Option<NodeId>,
}

impl ProbeSession {
    pub fn new(table: &StakeTable, cfg: &SelectionConfig) -> Result<Self, SchedulerError> {
        let pool = table.eligible(&cfg.exclusions);
        if pool.is_empty() {
            return Err(SchedulerError::AllZeroStake);
        }
        Ok(ProbeSession {
            pool,
            probes_left: cfg.max_probes,
            issued: Vec::new(),
            chosen: None,
        })
    }

    /// Next candidate to probe, or `None` once the probe budget or the
    /// candidate pool is exhausted.
    pub fn next_candidate<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<NodeId> {
        if self.chosen.is_some() || self.probes_left == 0 {
            return None;
        }
        let node = draw(&mut self.pool, rng)?;
        self.probes_left -= 1;
        self.issued.push(node.clone());
        Some(node)
    }

    /// Records the reply from the most recent candidate.
    pub fn on_reply(&mut self, reply: ProbeReply) -> Option<NodeId> {
        if reply == ProbeReply::Accept {
            self.chosen = self.issued.last().cloned();
        }
        self.chosen.clone()
    }

    pub fn probes_issued(&self) -> &[NodeId] {
        &self.issued
    }
}

/// Synchronous form of the probe loop: returns the first candidate whose
/// probe is accepted, or `Exhausted` after `max_probes` declines.
pub fn select_with_probe<R, F>(
    table: &StakeTable,
    mut probe: F,
    cfg: &SelectionConfig,
    rng: &mut R,
) -> Result<Selection, SchedulerError>
where
    R: Rng + ?Sized,
    F: FnMut(&NodeId) -> ProbeReply,
{
    let mut session = ProbeSession::new(table, cfg)?;
    while let Some(candidate) = session.next_candidate(rng) {
        if let Some(chosen) = session.on_reply(probe(&candidate)) {
            return Ok(Selection::Chosen(chosen));
        }
    }
    Ok(Selection::Exhausted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn table(stakes: &[(&str, u64)]) -> StakeTable {
        stakes
            .iter()
            .map(|(n, s)| (NodeId::from(*n), Credits::from_whole(*s)))
            .collect()
    }

    fn none() -> BTreeSet<NodeId> {
        BTreeSet::new()
    }

    #[test]
    fn distribution_one_two_three_four() {
        let d = selection_distribution(&table(&[("n1", 1), ("n2", 2), ("n3", 3), ("n4", 4)]), &none()).unwrap();
        let expect = [0.1, 0.2, 0.3, 0.4];
        for ((_, p), e) in d.iter().zip(expect) {
            assert!((p - e).abs() < 1e-15);
        }
        assert!((d.values().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn distribution_single_and_exclusion() {
        let d = selection_distribution(&table(&[("n1", 5)]), &none()).unwrap();
        assert_eq!(d[&NodeId::from("n1")], 1.0);
        let excl: BTreeSet<NodeId> = [NodeId::from("n1")].into();
        let d = selection_distribution(&table(&[("n1", 1), ("n2", 1)]), &excl).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[&NodeId::from("n2")], 1.0);
    }

    #[test]
    fn distribution_all_zero() {
        assert_eq!(
            selection_distribution(&table(&[("n1", 0)]), &none()),
            Err(SchedulerError::AllZeroStake)
        );
        assert_eq!(selection_distribution(&StakeTable::new(), &none()), Err(SchedulerError::AllZeroStake));
    }

    #[test]
    fn sample_all_is_permutation() {
        let t = table(&[("a", 1), ("b", 5), ("c", 2)]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut got = sample_distinct(&t, 3, &mut rng, &none()).unwrap();
        got.sort();
        assert_eq!(got, vec!["a".into(), "b".into(), "c".into()]);
        assert_eq!(
            sample_distinct(&t, 4, &mut rng, &none()),
            Err(SchedulerError::NotEnoughPeers { requested: 4, eligible: 3 })
        );
    }

    #[test]
    fn probe_first_accepts() {
        let t = table(&[("a", 1), ("b", 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut probes = 0;
        let sel = select_with_probe(&t, |_| { probes += 1; ProbeReply::Accept }, &SelectionConfig::default(), &mut rng).unwrap();
        assert!(matches!(sel, Selection::Chosen(_)));
        assert_eq!(probes, 1);
    }

    #[test]
    fn probe_all_decline_is_exhausted_after_three_distinct() {
        let t = table(&[("a", 1), ("b", 1), ("c", 1), ("d", 1), ("e", 1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut seen = Vec::new();
        let sel = select_with_probe(
            &t,
            |n| { seen.push(n.clone()); ProbeReply::Decline },
            &SelectionConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(sel, Selection::Exhausted);
        assert_eq!(seen.len(), 3);
        let uniq: BTreeSet<_> = seen.iter().collect();
        assert_eq!(uniq.len(), 3);
    }

    #[test]
    fn probe_config_requires_one() {
        assert_eq!(SelectionConfig::new(0, none()), Err(SchedulerError::InvalidConfig));
    }
}
