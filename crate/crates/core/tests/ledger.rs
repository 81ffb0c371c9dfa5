use std::collections::{BTreeMap, BTreeSet};

use meshserve::credits::Credits;
use meshserve::ids::NodeId;
use meshserve::ledger::{
    apply_block, blocks_from_jsonl, blocks_to_jsonl, finalize, propose_block, validate_block, Chain, CreditOperation,
    Finality, KeyedHashKeys, LedgerState, Reject, Vote,
};
use meshserve::validate::{random_chain, tamper_block};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn nodes() -> Vec<NodeId> {
    ["a", "b", "c", "d"].into_iter().map(NodeId::from).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn single_field_tamper_fails_at_that_height(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = nodes();
        let keys = KeyedHashKeys::derive(seed, &nodes);
        let (chain, _) = random_chain(&mut rng, &nodes, &keys, 8);
        prop_assert!(Chain::replay(chain.blocks(), &keys).is_ok());
        let mut blocks = chain.blocks().to_vec();
        let k = (seed % blocks.len() as u64) as usize;
        let field = tamper_block(&mut blocks[k], &mut rng, &nodes);
        let err = Chain::replay(&blocks, &keys).expect_err(field);
        prop_assert_eq!(err.height, k as u64, "{}", field);
    }

    #[test]
    fn supply_identity_at_every_prefix(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = nodes();
        let keys = KeyedHashKeys::derive(1, &nodes);
        let (chain, identity) = random_chain(&mut rng, &nodes, &keys, 10);
        prop_assert!(identity);
        let mut state = LedgerState::new();
        for block in chain.blocks() {
            state = apply_block(state, block);
            // Independent recount of Σ(free + staked) in micro-credits.
            let held: u64 = state.balances.values().map(|a| a.free.micros() + a.staked.micros()).sum();
            let supply = state.genesis_total.micros() + state.supply_minted.micros() - state.supply_burned.micros();
            prop_assert_eq!(held, supply);
        }
    }

    #[test]
    fn finalization_is_strict_majority(n in 1usize..=9, codes in prop::collection::vec(0u8..3, 9), outsiders in 0usize..3) {
        let peers: BTreeSet<NodeId> = (0..n).map(|i| NodeId::new(format!("p{i}"))).collect();
        let mut votes = BTreeMap::new();
        let mut accepts = 0;
        for (peer, code) in peers.iter().zip(&codes) {
            match code {
                0 => { votes.insert(peer.clone(), Vote::Accept); accepts += 1; }
                1 => { votes.insert(peer.clone(), Vote::Reject); }
                _ => {}
            }
        }
        for i in 0..outsiders {
            votes.insert(NodeId::new(format!("x{i}")), Vote::Accept);
        }
        let expected = if 2 * accepts > n { Finality::Finalized } else { Finality::Dropped };
        prop_assert_eq!(finalize(&votes, &peers), expected);
    }

    #[test]
    fn overspending_is_rejected(free in 0u64..1_000_000_000, extra in 1u64..1_000_000, split in 0.0f64..1.0) {
        let (a, b) = (NodeId::from("a"), NodeId::from("b"));
        let keys = KeyedHashKeys::derive(3, [&a, &b]);
        let mut chain = Chain::new();
        let g = propose_block(vec![CreditOperation::genesis_grant(a.clone(), Credits::from_micros(free))], &a, &keys, chain.head(), 0).unwrap();
        chain.append(g, &keys).unwrap();
        let single = propose_block(vec![CreditOperation::offload_payment(a.clone(), b.clone(), Credits::from_micros(free + extra), 1)], &a, &keys, chain.head(), 1).unwrap();
        prop_assert_eq!(
            validate_block(&single, chain.state(), &keys),
            Err(Reject::Overdraft { node: a.clone(), op_index: 0 })
        );
        let first = (free as f64 * split) as u64;
        let double = propose_block(vec![
            CreditOperation::offload_payment(a.clone(), b.clone(), Credits::from_micros(first), 1),
            CreditOperation::offload_payment(a.clone(), b.clone(), Credits::from_micros(free - first + extra), 2),
        ], &a, &keys, chain.head(), 1).unwrap();
        prop_assert_eq!(
            validate_block(&double, chain.state(), &keys),
            Err(Reject::Overdraft { node: a, op_index: 1 })
        );
    }

    #[test]
    fn jsonl_round_trip(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes = nodes();
        let keys = KeyedHashKeys::derive(2, &nodes);
        let (chain, _) = random_chain(&mut rng, &nodes, &keys, 6);
        let text = blocks_to_jsonl(chain.blocks());
        let back = blocks_from_jsonl(&text).unwrap();
        prop_assert_eq!(&back, chain.blocks());
        let rebuilt = Chain::from_blocks(back, &keys).unwrap();
        prop_assert_eq!(rebuilt.state(), chain.state());
    }
}

#[test]
fn penalty_burns_at_most_the_stake() {
    let a = NodeId::from("a");
    let keys = KeyedHashKeys::derive(4, [&a]);
    let mut chain = Chain::new();
    let ops = vec![
        CreditOperation::genesis_grant(a.clone(), Credits::from_whole(10)),
        CreditOperation::stake_lock(a.clone(), Credits::from_whole(3)),
        CreditOperation::duel_penalty(a.clone(), Credits::from_whole(5), 1),
    ];
    let block = propose_block(ops, &a, &keys, chain.head(), 0).unwrap();
    chain.append(block, &keys).unwrap();
    let s = chain.state();
    assert_eq!(s.balance_of(&a).staked, Credits::ZERO);
    assert_eq!(s.balance_of(&a).free, Credits::from_whole(7));
    assert_eq!(s.supply_burned, Credits::from_whole(3));
    assert!(s.supply_identity_holds());
}
