use std::collections::{BTreeMap, BTreeSet};

use meshserve::credits::Credits;
use meshserve::ids::NodeId;
use meshserve::scheduler::{
    sample_distinct, select_with_probe, ProbeReply, ProbeSession, SelectionConfig, Selection, StakeTable,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn table(stakes: &[u64]) -> StakeTable {
    stakes
        .iter()
        .enumerate()
        .map(|(i, s)| (NodeId::new(format!("n{i}")), Credits::from_micros(*s)))
        .collect()
}

proptest! {
    #[test]
    fn draws_are_distinct_and_respect_exclusions(
        stakes in prop::collection::vec(0u64..1_000, 1..10),
        excl_mask in prop::collection::vec(any::<bool>(), 10),
        m in 1usize..5,
        seed in any::<u64>(),
    ) {
        let t = table(&stakes);
        let exclusions: BTreeSet<NodeId> = (0..stakes.len())
            .filter(|i| excl_mask[*i])
            .map(|i| NodeId::new(format!("n{i}")))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if let Ok(drawn) = sample_distinct(&t, m, &mut rng, &exclusions) {
            let set: BTreeSet<_> = drawn.iter().collect();
            prop_assert_eq!(set.len(), drawn.len());
            for n in &drawn {
                prop_assert!(!exclusions.contains(n));
                prop_assert!(t.get(n).unwrap() > Credits::ZERO);
            }
        }
    }

    #[test]
    fn probe_session_never_repeats(
        stakes in prop::collection::vec(1u64..100, 1..8),
        max_probes in 1usize..6,
        seed in any::<u64>(),
    ) {
        let t = table(&stakes);
        let cfg = SelectionConfig::new(max_probes, BTreeSet::new()).unwrap();
        let mut session = ProbeSession::new(&t, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while let Some(_) = session.next_candidate(&mut rng) {
            prop_assert!(session.on_reply(ProbeReply::Decline).is_none());
        }
        let issued = session.probes_issued();
        prop_assert_eq!(issued.len(), max_probes.min(stakes.len()));
        prop_assert_eq!(issued.iter().collect::<BTreeSet<_>>().len(), issued.len());
    }
}

/// Pearson χ² of observed counts against expected probabilities.
fn chi_square(observed: &[u64], expected_p: &[f64]) -> f64 {
    let n: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(expected_p)
        .map(|(o, p)| {
            let e = n as f64 * p;
            (*o as f64 - e).powi(2) / e
        })
        .sum()
}

#[test]
fn first_draw_is_stake_proportional() {
    let t = table(&[1, 2, 3, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = [0u64; 4];
    for _ in 0..40_000 {
        let n = &sample_distinct(&t, 1, &mut rng, &BTreeSet::new()).unwrap()[0];
        counts[n.as_str()[1..].parse::<usize>().unwrap()] += 1;
    }
    // 99.9% quantile of χ² with 3 degrees of freedom.
    assert!(chi_square(&counts, &[0.1, 0.2, 0.3, 0.4]) < 16.27, "{counts:?}");
}

#[test]
fn second_draw_renormalizes_over_remaining_stake() {
    let stakes = [1.0, 2.0, 3.0, 4.0];
    let p: Vec<f64> = stakes.iter().map(|s| s / 10.0).collect();
    // P(second = j) = Σ_{i≠j} p_i p_j / (1 − p_i)
    let expected: Vec<f64> = (0..4)
        .map(|j| (0..4).filter(|&i| i != j).map(|i| p[i] * p[j] / (1.0 - p[i])).sum())
        .collect();
    let t = table(&[1, 2, 3, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut counts = [0u64; 4];
    for _ in 0..40_000 {
        let drawn = sample_distinct(&t, 2, &mut rng, &BTreeSet::new()).unwrap();
        counts[drawn[1].as_str()[1..].parse::<usize>().unwrap()] += 1;
    }
    assert!(chi_square(&counts, &expected) < 16.27, "{counts:?} vs {expected:?}");
}

#[test]
fn probe_accepts_first_willing_candidate() {
    let t = table(&[10, 10, 10]);
    let willing = NodeId::from("n2");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut hits = BTreeMap::new();
    for _ in 0..200 {
        let sel = select_with_probe(
            &t,
            |n| if *n == willing { ProbeReply::Accept } else { ProbeReply::Decline },
            &SelectionConfig::default(),
            &mut rng,
        )
        .unwrap();
        *hits.entry(format!("{sel:?}")).or_insert(0) += 1;
        assert_eq!(sel, Selection::Chosen(willing.clone()));
    }
    assert_eq!(hits.len(), 1);
}
