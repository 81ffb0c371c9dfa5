//! Piecewise-Poisson arrival generation.

use rand::Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use crate::ids::{NodeId, SimTime};
use crate::sim::scenario::{Scenario, TokenModel};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: SimTime,
    pub node: NodeId,
    pub prompt_tokens: u32,
    pub output_tokens: u32,
}

fn token_sampler(median: f64, sigma: f64) -> LogNormal<f64> {
    LogNormal::new(median.ln(), sigma).expect("validated token model")
}

fn draw_tokens<R: Rng + ?Sized>(d: &LogNormal<f64>, rng: &mut R) -> u32 {
    d.sample(rng).round().clamp(1.0, f64::from(u32::MAX)) as u32
}

/// Draws arrivals for every node that appears in the scenario, restricted to
/// `[0, duration)` and to the intervals in which the node is online, merged
/// into a single stream ordered by time and then by node declaration order.
pub fn generate_workload<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Vec<Arrival> {
    let TokenModel {
        prompt_median,
        output_median,
        sigma,
        ..
    } = scenario.tokens;
    let prompt = token_sampler(prompt_median, sigma);
    let output = token_sampler(output_median, sigma);
    let mut tagged: Vec<(SimTime, usize, Arrival)> = Vec::new();
    for (order, spec) in scenario.all_nodes().enumerate() {
        let online = scenario.online_intervals(&spec.id);
        for phase in &spec.schedule {
            let end = phase.end.min(scenario.duration);
            let gap = Exp::new(1.0 / phase.mean_interarrival).expect("validated phase");
            let mut t = phase.start;
            loop {
                t += gap.sample(rng);
                if t >= end {
                    break;
                }
                let prompt_tokens = draw_tokens(&prompt, rng);
                let output_tokens = draw_tokens(&output, rng);
                if !online.iter().any(|(a, b)| t >= *a && t < *b) {
                    continue;
                }
                let time = SimTime::from_secs_f64(t);
                tagged.push((
                    time,
                    order,
                    Arrival {
                        time,
                        node: spec.id.clone(),
                        prompt_tokens,
                        output_tokens,
                    },
                ));
            }
        }
    }
    tagged.sort_by_key(|(t, order, _)| (*t, *order));
    tagged.into_iter().map(|(_, _, a)| a).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::credits::Credits;
    use crate::sim::scenario::{NodeSpec, Phase};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scenario(schedule: Vec<Phase>) -> Scenario {
        let toml = r#"
            name = "w"
            duration = 750.0
            slo_threshold = 60.0
            [[nodes]]
            id = "n1"
            genesis = "100"
        "#;
        let mut s: Scenario = toml::from_str(toml).unwrap();
        s.nodes[0].schedule = schedule;
        s
    }

    #[test]
    fn empty_workload() {
        let s = scenario(vec![]);
        assert!(generate_workload(&s, &mut ChaCha8Rng::seed_from_u64(0)).is_empty());
    }

    #[test]
    fn poisson_count_within_three_sigma() {
        let s = scenario(vec![Phase {
            start: 0.0,
            end: 750.0,
            mean_interarrival: 20.0,
        }]);
        let seeds = 200;
        let total: usize = (0..seeds)
            .map(|seed| generate_workload(&s, &mut ChaCha8Rng::seed_from_u64(seed)).len())
            .sum();
        let mean = total as f64 / seeds as f64;
        let se = (37.5f64 / seeds as f64).sqrt();
        assert!((mean - 37.5).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn deterministic_and_ordered() {
        let mut s = scenario(vec![Phase {
            start: 0.0,
            end: 100.0,
            mean_interarrival: 2.0,
        }]);
        let mut other: NodeSpec = s.nodes[0].clone();
        other.id = "n2".into();
        other.genesis = Credits::from_whole(100);
        s.nodes.push(other);
        let a = generate_workload(&s, &mut ChaCha8Rng::seed_from_u64(5));
        let b = generate_workload(&s, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].time <= w[1].time));
        assert!(a.iter().all(|x| x.output_tokens >= 1 && x.prompt_tokens >= 1));
    }
}
