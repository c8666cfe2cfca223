//! Stochastic error pruning on Gaussian errors: thresholds, realized
//! sparsity against its closed form, and the unbiasedness of the rule.
//!
//! ```text
//! cargo run --example pruning
//! ```

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use efgd::prune::{compute_threshold, expected_zero_fraction, stochastic_prune, PruneConfig, Pruner};
use efgd::rng::CounterRng;
use efgd::Tensor;

fn main() -> efgd::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let sigma = 0.05;
    let normal = Normal::new(0.0, sigma).expect("valid std");
    let delta = Tensor::<f64>::from_vec(&[200_000], (0..200_000).map(|_| normal.sample(&mut rng)).collect())?;

    println!("    P      tau   passed  clamped   zeroed  expected-zeroed");
    for p in [0.0, 0.3, 0.5, 0.7, 0.9, 0.99] {
        let mut pruner = Pruner::new(PruneConfig::with_rate(p), 7)?;
        let (_, s) = pruner.prune(0, 0, &delta)?;
        let n = s.n_total as f64;
        println!(
            "{p:5.2}  {:.5}  {:7.4}  {:7.4}  {:7.4}  {:7.4}",
            s.tau,
            s.n_passed as f64 / n,
            s.n_clamped as f64 / n,
            s.n_zeroed as f64 / n,
            expected_zero_fraction(p)
        );
    }

    // Below the threshold a value becomes 0 or +-tau, with mean equal to the input.
    let tau = compute_threshold(0.7, sigma)?;
    for d in [0.1 * tau, 0.5 * tau, -0.9 * tau] {
        let n = 100_000;
        let t = Tensor::<f64>::from_vec(&[n], vec![d; n])?;
        let (out, _) = stochastic_prune(&t, tau, &CounterRng::new(3, 0, 0))?;
        let mean = out.data().iter().sum::<f64>() / n as f64;
        println!("delta {d:+.5}: mean after pruning {mean:+.5}");
    }
    Ok(())
}
