//! Runs one error pass per feedback mode on the same batch and reports how
//! far each layer's error signal is from the exact one.
//!
//! ```text
//! cargo run --example feedback_modes
//! ```

use efgd::backprop;
use efgd::data::synth_blobs;
use efgd::diagnostics::shadow_bp_pass;
use efgd::feedback::{angle_to_bp, FeedbackConfig, FeedbackMode, FeedbackState};
use efgd::network::{Network, NetworkConfig};

fn main() -> efgd::Result<()> {
    let data = synth_blobs(4, 64, &[1, 6, 6], 3)?;
    let (x, labels) = data.batch::<f64>(&(0..64).collect::<Vec<_>>())?;
    let cfg = NetworkConfig { input: vec![1, 6, 6], ..NetworkConfig::mlp(36, &[32, 16], 4) };
    let mut net = Network::<f64>::build(&cfg, 1)?;
    let out = net.forward_train(&x, &labels)?;
    let exact = shadow_bp_pass(&net, &out.trace)?;
    let weighted = net.weighted_layers();

    println!("weighted layers {weighted:?}; angle to the exact error at each layer's output (degrees)");
    for mode in [FeedbackMode::Bp, FeedbackMode::Fa, FeedbackMode::SignSym, FeedbackMode::BinarySign] {
        let fb = FeedbackState::init(&net, &FeedbackConfig::new(mode), 9)?;
        let pass = backprop::backward(&net, &out.trace, &fb, None)?;
        let angles: Vec<String> = weighted
            .iter()
            .map(|&l| Ok(format!("{:6.2}", angle_to_bp(&pass.deltas[l], &exact[l])?)))
            .collect::<efgd::Result<_>>()?;
        println!("{:>11}: {}", mode.as_str(), angles.join("  "));
    }

    // Signs of the sign-symmetric matrix follow the weights; magnitudes do not.
    let fb = FeedbackState::init(&net, &FeedbackConfig::new(FeedbackMode::SignSym), 9)?;
    let w = net.layers[0].weight().expect("linear layer");
    let m = fb.modulatory_matrix(0, w)?;
    let agree = w.data().iter().zip(m.data()).filter(|(a, b)| a.signum() == b.signum()).count();
    println!("layer 0 sign agreement: {agree}/{}", w.len());

    // A per-layer override mixes modes within one network.
    let mut mixed = FeedbackConfig::new(FeedbackMode::SignSym);
    mixed.overrides.insert(weighted[0], FeedbackMode::Bp);
    let fb = FeedbackState::init(&net, &mixed, 9)?;
    println!("mixed: {:?}", weighted.iter().map(|&l| fb.mode_for(l).as_str()).collect::<Vec<_>>());
    Ok(())
}
