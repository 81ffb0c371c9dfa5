use std::collections::BTreeMap;

use meshserve::credits::Credits;
use meshserve::duel::{judge_vote, latent_winner, settle, DuelParams, DuelTicket, QualityModel, Verdict};
use meshserve::ids::NodeId;
use meshserve::ledger::{propose_block, Chain, CreditOperation, KeyedHashKeys, OpKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn id(s: &str) -> NodeId {
    NodeId::from(s)
}

fn model(qi: f64, qj: f64, accuracy: f64) -> QualityModel {
    QualityModel::new(BTreeMap::from([(id("i"), qi), (id("j"), qj)]), accuracy).unwrap()
}

fn ticket(judges: usize) -> DuelTicket {
    let js = (0..judges).map(|k| NodeId::new(format!("judge{k}"))).collect();
    DuelTicket::new(1, 1, &id("origin"), id("i"), id("j"), js).unwrap()
}

/// |x − p| within `z` binomial standard errors.
fn close(hits: u64, n: u64, p: f64, z: f64) -> bool {
    let x = hits as f64 / n as f64;
    (x - p).abs() <= z * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn latent_winner_follows_pairwise_law() {
    let qm = model(0.9, 0.3, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 50_000;
    let wins = (0..n)
        .filter(|_| latent_winner(&id("i"), &id("j"), &qm, &mut rng) == id("i"))
        .count() as u64;
    assert!(close(wins, n, 0.8, 4.0), "{wins}");
}

#[test]
fn three_judges_majority_accuracy() {
    let a: f64 = 0.8;
    let qm = model(0.5, 0.5, a);
    let t = ticket(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 50_000;
    let correct = (0..n)
        .filter(|_| judge_vote(&t, &id("i"), &qm, &mut rng).declared == Verdict::Winner(id("i")))
        .count() as u64;
    // At least two of three judges vote for the latent winner.
    let expected = a.powi(3) + 3.0 * a.powi(2) * (1.0 - a);
    assert!(close(correct, n, expected, 4.0), "{correct} vs {expected}");
}

#[test]
fn two_judges_split_is_a_draw() {
    let a: f64 = 0.7;
    let qm = model(0.5, 0.5, a);
    let t = ticket(2);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 50_000;
    let draws = (0..n)
        .filter(|_| judge_vote(&t, &id("j"), &qm, &mut rng).declared == Verdict::Draw)
        .count() as u64;
    assert!(close(draws, n, 2.0 * a * (1.0 - a), 4.0), "{draws}");
}

#[test]
fn settlement_applies_with_burn_capped_by_stake() {
    let params = DuelParams::new(0.5, 1, Credits::from_whole(2), Credits::from_whole(5), Credits::from_whole(1)).unwrap();
    let qm = model(1.0, 0.0, 1.0);
    let t = ticket(1);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let latent = latent_winner(&id("i"), &id("j"), &qm, &mut rng);
    assert_eq!(latent, id("i"));
    let outcome = judge_vote(&t, &latent, &qm, &mut rng);
    let ops = settle(&outcome, &params);
    let kinds: Vec<OpKind> = ops.iter().map(|o| o.kind).collect();
    assert_eq!(kinds, vec![OpKind::DuelWinReward, OpKind::DuelPenalty, OpKind::JudgeReward]);

    let parties = [id("i"), id("j"), id("judge0")];
    let keys = KeyedHashKeys::derive(1, &parties);
    let mut chain = Chain::new();
    let setup = vec![
        CreditOperation::genesis_grant(id("i"), Credits::from_whole(10)),
        CreditOperation::genesis_grant(id("j"), Credits::from_whole(10)),
        CreditOperation::stake_lock(id("j"), Credits::from_whole(3)),
    ];
    chain.append(propose_block(setup, &id("i"), &keys, chain.head(), 0).unwrap(), &keys).unwrap();
    chain.append(propose_block(ops, &id("judge0"), &keys, chain.head(), 1).unwrap(), &keys).unwrap();
    let s = chain.state();
    assert_eq!(s.balance_of(&id("i")).free, Credits::from_whole(12));
    assert_eq!(s.balance_of(&id("j")).staked, Credits::ZERO);
    assert_eq!(s.balance_of(&id("judge0")).free, Credits::from_whole(1));
    assert_eq!(s.supply_burned, Credits::from_whole(3));
    assert!(s.supply_identity_holds());
}
