//! Analytic MAC and DRAM-traffic estimates for one training step of the
//! small MNIST CNN, per feedback mode and pruning rate.
//!
//! ```text
//! cargo run --example cost_model
//! ```

use efgd::costmodel::{uniform_zero_fractions, weighted_shapes, CostParams, CostReport, CostSummary};
use efgd::feedback::{FeedbackConfig, FeedbackMode};
use efgd::network::NetworkConfig;
use efgd::prune::expected_zero_fraction;

fn main() -> efgd::Result<()> {
    let net = NetworkConfig::small_cnn([1, 28, 28], &[16, 32], 10);
    let shapes = weighted_shapes(&net)?;
    let params = CostParams::default();
    let batch = 64;

    for s in &shapes {
        println!("layer {:2} {:7}: {:6} weights, {:7} MACs/sample", s.layer, s.kind, s.weight_count, s.macs_per_sample);
    }
    println!();
    println!("mode        P    zeroed  MAC-speedup  traffic-red  phase2-red  energy");
    for mode in [FeedbackMode::Bp, FeedbackMode::Fa, FeedbackMode::SignSym, FeedbackMode::BinarySign] {
        for p in [0.0, 0.5, 0.7, 0.9] {
            let z = expected_zero_fraction(p);
            let zeros = uniform_zero_fractions(&shapes, z);
            let r = CostReport::build(&shapes, &FeedbackConfig::new(mode), &params, batch, &zeros)?.ratios()?;
            println!(
                "{:10} {p:.1}  {z:6.3}  {:11.3}  {:11.3}  {:10.3}  {:6.3}",
                mode.as_str(),
                r.mac_speedup,
                r.traffic_reduction,
                r.phase2_traffic_reduction,
                r.energy_ratio
            );
        }
    }

    // Measured sparsity from training is usually higher than the Gaussian
    // estimate; pass it in directly when known.
    let measured = uniform_zero_fractions(&shapes, 0.78);
    let report = CostReport::build(&shapes, &FeedbackConfig::new(FeedbackMode::SignSym), &params, batch, &measured)?;
    let summary = CostSummary::new(report)?;
    println!();
    println!("signsym with 78% of pruned errors zeroed: {:#?}", summary.ratios);
    Ok(())
}
