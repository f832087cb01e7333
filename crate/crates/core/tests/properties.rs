mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reld::instance_gen::{instance_rng, sample_instance, triangular_inverse_cdf, GenConfig};
use reld::io::cvrplib::{parse_cvrplib, write_cvrplib};
use reld::io::dataset::{instances_to_ljson, parse_instance_set};
use reld::rollout::{augment8, rollout, DecodeMode};
use reld::training::advantages;
use reld::vrp::{tour_cost, validate_solution, Instance};

fn instance() -> impl Strategy<Value = Instance> {
    (1usize..12, any::<u64>()).prop_map(|(n, seed)| {
        let cfg = GenConfig::fixed(n, GenConfig::standard_capacity(n)).with_seed(seed);
        sample_instance(&cfg, &mut instance_rng(seed, 0)).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn advantages_sum_to_zero(costs in prop::collection::vec(0.0f64..1e4, 2..200)) {
        let s: f64 = advantages(&costs).iter().sum();
        prop_assert!(s.abs() < 1e-9);
    }

    #[test]
    fn sampled_rollouts_are_feasible(inst in instance(), seed in any::<u64>()) {
        let cfg = small("reld");
        let params = params_for(&cfg, seed);
        let k = inst.num_customers();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [DecodeMode::Sample, DecodeMode::Greedy] {
            let batch = rollout(&inst, &params, &cfg, k, mode, &mut rng).unwrap();
            prop_assert_eq!(batch.trajectories.len(), k);
            let mut firsts: Vec<usize> = batch.trajectories.iter().map(|t| t.nodes[1]).collect();
            firsts.sort_unstable();
            firsts.dedup();
            prop_assert_eq!(firsts.len(), k);
            for t in &batch.trajectories {
                prop_assert!(validate_solution(&inst, &t.nodes).is_empty());
                prop_assert!((tour_cost(&inst, &t.nodes).unwrap() - t.cost).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn augmentation_preserves_tour_costs(inst in instance()) {
        let tour: Vec<usize> = std::iter::once(0).chain(1..inst.num_nodes()).chain([0]).collect();
        let base = tour_cost(&inst, &tour).unwrap();
        for copy in augment8(&inst) {
            prop_assert!((tour_cost(&copy, &tour).unwrap() - base).abs() < 1e-12);
        }
    }

    #[test]
    fn cvrplib_and_instance_sets_round_trip(inst in instance()) {
        prop_assert_eq!(&parse_cvrplib(&write_cvrplib(&inst)).unwrap(), &inst);
        let text = instances_to_ljson(std::slice::from_ref(&inst)).unwrap();
        prop_assert_eq!(parse_instance_set(&text).unwrap(), vec![inst]);
    }

    #[test]
    fn triangular_inverse_stays_in_range(u in 0.0f64..=1.0, low in 0.0f64..10.0, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (mode, high) = (low + a.min(b), low + a.max(b));
        let x = triangular_inverse_cdf(u, low, mode, high).unwrap();
        prop_assert!(x >= low - 1e-12 && x <= high + 1e-12);
    }
}
