//! Pruned errors stay closer in direction to the raw errors than a random
//! vector with the same per-element magnitudes.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StudentT};

use efgd::feedback::angle_to_bp;
use efgd::prune::{PruneConfig, Pruner};
use efgd::Tensor;

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn pruning_beats_a_magnitude_matched_random_vector(
        rate in 0.05f64..0.99, dof in 2.0f64..30.0, n in 64usize..4096, seed in any::<u64>(),
    ) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let tails = StudentT::new(dof).unwrap();
        let delta = Tensor::<f64>::from_vec(&[n], (0..n).map(|_| tails.sample(&mut rng)).collect()).unwrap();

        let draws = 8;
        let (mut pruned_sum, mut random_sum) = (0.0, 0.0);
        for step in 0..draws {
            let mut pruner = Pruner::new(PruneConfig::with_rate(rate), seed).unwrap();
            let (pruned, _) = pruner.prune(0, step, &delta).unwrap();
            let shuffled: Vec<f64> = pruned
                .data()
                .iter()
                .map(|v| if rng.random_bool(0.5) { *v } else { -*v })
                .collect();
            let random = Tensor::from_vec(&[n], shuffled).unwrap();
            pruned_sum += angle_to_bp(&pruned, &delta).unwrap();
            random_sum += angle_to_bp(&random, &delta).unwrap();
        }
        prop_assert!(pruned_sum / draws as f64 <= random_sum / draws as f64);
    }
}
