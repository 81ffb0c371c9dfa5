//! Gossip membership.
//!
//! Each node keeps a [`PeerView`] of heartbeat-versioned records. Views are
//! reconciled pairwise by a last-writer-wins merge keyed on
//! `(heartbeat, last_updated)`, which makes the merge a join on a
//! per-record total order.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{NodeId, SimTime};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeerStatus {
    Online,
    Offline,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub node_id: NodeId,
    pub status: PeerStatus,
    pub endpoint: String,
    pub heartbeat: u64,
    pub last_updated: SimTime,
}

impl PeerRecord {
    pub fn version(&self) -> (u64, SimTime) {
        (self.heartbeat, self.last_updated)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeerView {
    pub owner: NodeId,
    pub records: BTreeMap<NodeId, PeerRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GossipConfig {
    pub heartbeat_period: f64,
    pub fail_timeout: f64,
    pub fanout: usize,
    /// Offline records older than this are dropped from the view.
    pub offline_ttl: f64,
}

impl Default for GossipConfig {
    fn default() -> Self {
        GossipConfig {
            heartbeat_period: 1.0,
            fail_timeout: 5.0,
            fanout: 2,
            offline_ttl: 100.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum GossipError {
    #[error("bootstrap peer {0} is not online")]
    OfflineBootstrap(NodeId),
    #[error("node {0} is already a member")]
    DuplicateJoin(NodeId),
}

impl PeerView {
    /// A view containing only the owner's own Online record at heartbeat 0.
    pub fn new(owner: NodeId, endpoint: String, now: SimTime) -> Self {
        let mut records = BTreeMap::new();
        records.insert(
            owner.clone(),
            PeerRecord {
                node_id: owner.clone(),
                status: PeerStatus::Online,
                endpoint,
                heartbeat: 0,
                last_updated: now,
            },
        );
        PeerView { owner, records }
    }

    pub fn get(&self, node: &NodeId) -> Option<&PeerRecord> {
        self.records.get(node)
    }

    pub fn own_record(&self) -> &PeerRecord {
        &self.records[&self.owner]
    }

    pub fn is_online(&self, node: &NodeId) -> bool {
        self.records
            .get(node)
            .is_some_and(|r| r.status == PeerStatus::Online)
    }

    /// Online peers other than the owner, in id order.
    pub fn online_peers(&self) -> Vec<NodeId> {
        self.records
            .values()
            .filter(|r| r.status == PeerStatus::Online && r.node_id != self.owner)
            .map(|r| r.node_id.clone())
            .collect()
    }

    pub fn online_set(&self) -> BTreeSet<NodeId> {
        self.online_peers().into_iter().collect()
    }

    /// Records a new endpoint for the owner under a fresh heartbeat.
    pub fn update_endpoint(&mut self, endpoint: String, now: SimTime) {
        let own = self.records.get_mut(&self.owner).expect("own record");
        own.endpoint = endpoint;
        own.heartbeat += 1;
        own.last_updated = now;
    }

    /// Graceful departure: the owner publishes an Offline record under a
    /// fresh heartbeat so that the status wins every merge.
    pub fn announce_leave(&mut self, now: SimTime) {
        let own = self.records.get_mut(&self.owner).expect("own record");
        own.status = PeerStatus::Offline;
        own.heartbeat += 1;
        own.last_updated = now;
    }
}

/// Bumps the owner's heartbeat, marks silent peers Offline and drops
/// Offline records past the TTL.
pub fn local_tick(mut view: PeerView, now: SimTime, cfg: &GossipConfig) -> PeerView {
    let owner = view.owner.clone();
    let timeout = SimTime::from_secs_f64(cfg.fail_timeout);
    let ttl = SimTime::from_secs_f64(cfg.offline_ttl);
    view.records.retain(|id, r| {
        *id == owner || r.status == PeerStatus::Online || now.saturating_sub(r.last_updated) <= ttl
    });
    for (id, r) in view.records.iter_mut() {
        if *id == owner {
            r.heartbeat += 1;
            r.last_updated = now;
            r.status = PeerStatus::Online;
        } else if now.saturating_sub(r.last_updated) > timeout {
            r.status = PeerStatus::Offline;
        }
    }
    view
}

/// Per id keeps the record with the larger `(heartbeat, last_updated)`;
/// equal versions keep `a`'s record. The result is owned by `a.owner`.
pub fn merge(a: &PeerView, b: &PeerView) -> PeerView {
    let mut records = a.records.clone();
    for (id, theirs) in &b.records {
        match records.get(id) {
            Some(mine) if mine.version() >= theirs.version() => {}
            _ => {
                records.insert(id.clone(), theirs.clone());
            }
        }
    }
    PeerView {
        owner: a.owner.clone(),
        records,
    }
}

/// One push-pull round: every member, in id order, contacts up to `fanout`
/// distinct peers drawn uniformly from the Online peers in its own view;
/// both sides of each contact adopt the merge of the two views. Peers that
/// are not members of `views` (departed nodes) cannot be contacted.
pub fn gossip_round<R: Rng + ?Sized>(
    views: &mut BTreeMap<NodeId, PeerView>,
    fanout: usize,
    rng: &mut R,
) {
    let members: Vec<NodeId> = views.keys().cloned().collect();
    for me in members {
        let candidates = views[&me].online_peers();
        if candidates.is_empty() {
            continue;
        }
        let picks: Vec<NodeId> = candidates
            .choose_multiple(rng, fanout.min(candidates.len()))
            .cloned()
            .collect();
        for peer in picks {
            let Some(theirs) = views.get(&peer) else { continue };
            let mine = &views[&me];
            let new_mine = merge(mine, theirs);
            let new_theirs = merge(theirs, mine);
            views.insert(me.clone(), new_mine);
            views.insert(peer, new_theirs);
        }
    }
}

/// Adds `new_node` with its own view seeded with the bootstrap record, and
/// inserts the newcomer into the bootstrap's view.
pub fn register_join(
    views: &mut BTreeMap<NodeId, PeerView>,
    new_node: NodeId,
    endpoint: String,
    bootstrap: &NodeId,
    now: SimTime,
) -> Result<(), GossipError> {
    if views.contains_key(&new_node) {
        return Err(GossipError::DuplicateJoin(new_node));
    }
    let boot_view = views
        .get_mut(bootstrap)
        .filter(|v| v.own_record().status == PeerStatus::Online)
        .ok_or_else(|| GossipError::OfflineBootstrap(bootstrap.clone()))?;
    let mut view = PeerView::new(new_node.clone(), endpoint, now);
    view.records
        .insert(bootstrap.clone(), boot_view.own_record().clone());
    boot_view
        .records
        .insert(new_node.clone(), view.own_record().clone());
    views.insert(new_node, view);
    Ok(())
}

/// True when every view holds exactly the same records.
pub fn views_identical(views: &BTreeMap<NodeId, PeerView>) -> bool {
    let mut it = views.values();
    match it.next() {
        None => true,
        Some(first) => it.all(|v| v.records == first.records),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rec(id: &str, hb: u64, t: u64, endpoint: &str, status: PeerStatus) -> PeerRecord {
        PeerRecord {
            node_id: id.into(),
            status,
            endpoint: endpoint.into(),
            heartbeat: hb,
            last_updated: SimTime::from_micros(t),
        }
    }

    fn view(owner: &str, recs: Vec<PeerRecord>) -> PeerView {
        PeerView {
            owner: owner.into(),
            records: recs.into_iter().map(|r| (r.node_id.clone(), r)).collect(),
        }
    }

    #[test]
    fn tick_increments_and_detects_failure() {
        let cfg = GossipConfig::default();
        let v = PeerView::new("a".into(), "x".into(), SimTime::ZERO);
        let v = local_tick(v, SimTime::from_secs_f64(1.0), &cfg);
        assert_eq!(v.own_record().heartbeat, 1);

        let mk = || view("a", vec![rec("a", 0, 0, "x", PeerStatus::Online), rec("b", 3, 0, "y", PeerStatus::Online)]);
        let late = local_tick(mk(), SimTime::from_secs_f64(6.0), &cfg);
        assert_eq!(late.get(&"b".into()).unwrap().status, PeerStatus::Offline);
        assert_eq!(late.get(&"b".into()).unwrap().heartbeat, 3);
        let early = local_tick(mk(), SimTime::from_secs_f64(4.0), &cfg);
        assert_eq!(early.get(&"b".into()).unwrap().status, PeerStatus::Online);
    }

    #[test]
    fn offline_records_expire_after_ttl() {
        let cfg = GossipConfig::default();
        let v = view("a", vec![rec("a", 0, 0, "x", PeerStatus::Online), rec("b", 3, 0, "y", PeerStatus::Offline)]);
        let v = local_tick(v, SimTime::from_secs_f64(101.0), &cfg);
        assert!(v.get(&"b".into()).is_none());
    }

    #[test]
    fn reconciliation_cases() {
        // node 5 went offline, node 3 moved, node 6 joined
        let a = view(
            "n1",
            vec![
                rec("n1", 10, 10, "e1", PeerStatus::Online),
                rec("n3", 4, 4, "X", PeerStatus::Online),
                rec("n5", 5, 5, "e5", PeerStatus::Online),
                rec("n6", 1, 9, "e6", PeerStatus::Online),
            ],
        );
        let b = view(
            "n2",
            vec![
                rec("n2", 10, 10, "e2", PeerStatus::Online),
                rec("n3", 7, 7, "Y", PeerStatus::Online),
                rec("n5", 6, 6, "e5", PeerStatus::Offline),
            ],
        );
        let m = merge(&a, &b);
        assert_eq!(m.get(&"n3".into()).unwrap().endpoint, "Y");
        assert_eq!(m.get(&"n5".into()).unwrap().status, PeerStatus::Offline);
        assert!(m.get(&"n6".into()).is_some());
        let m2 = merge(&b, &a);
        assert!(m2.get(&"n6".into()).is_some());
        assert_eq!(m.records, m2.records);
    }

    #[test]
    fn merge_idempotent_and_ties_keep_left() {
        let a = view("a", vec![rec("a", 1, 1, "x", PeerStatus::Online), rec("b", 2, 2, "y", PeerStatus::Offline)]);
        assert_eq!(merge(&a, &a), a);
        let b = view("b", vec![rec("b", 2, 2, "y", PeerStatus::Online)]);
        assert_eq!(merge(&a, &b).get(&"b".into()).unwrap().status, PeerStatus::Offline);
    }

    #[test]
    fn two_node_round_spreads_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut views = BTreeMap::new();
        views.insert("a".into(), PeerView::new("a".into(), "ea".into(), SimTime::ZERO));
        register_join(&mut views, "b".into(), "eb".into(), &"a".into(), SimTime::ZERO).unwrap();
        views.get_mut(&NodeId::from("a")).unwrap().update_endpoint("ea2".into(), SimTime::from_micros(5));
        gossip_round(&mut views, 1, &mut rng);
        assert_eq!(views[&NodeId::from("b")].get(&"a".into()).unwrap().endpoint, "ea2");
    }

    #[test]
    fn join_visibility_and_offline_bootstrap() {
        let mut views = BTreeMap::new();
        for id in ["a", "b", "c"] {
            views.insert(NodeId::from(id), PeerView::new(id.into(), id.into(), SimTime::ZERO));
        }
        register_join(&mut views, "d".into(), "ed".into(), &"a".into(), SimTime::ZERO).unwrap();
        let knowers: Vec<_> = views.values().filter(|v| v.get(&"d".into()).is_some()).map(|v| v.owner.clone()).collect();
        assert_eq!(knowers, vec![NodeId::from("a"), NodeId::from("d")]);

        views.get_mut(&NodeId::from("b")).unwrap().announce_leave(SimTime::from_micros(1));
        assert_eq!(
            register_join(&mut views, "e".into(), "ee".into(), &"b".into(), SimTime::ZERO),
            Err(GossipError::OfflineBootstrap("b".into()))
        );
        assert_eq!(
            register_join(&mut views, "e".into(), "ee".into(), &"zz".into(), SimTime::ZERO),
            Err(GossipError::OfflineBootstrap("zz".into()))
        );
    }
}
