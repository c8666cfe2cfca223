//! Tracks the angle between the sign-symmetric, pruned error signal and the
//! exact one during training, and writes angle and histogram CSVs.
//!
//! ```text
//! cargo run --example angle_diagnostics -- [out-dir]
//! ```

use std::path::PathBuf;

use efgd::data::synth_blobs;
use efgd::diagnostics::{angles_csv, histogram_csv, histogram_file_name};
use efgd::feedback::FeedbackMode;
use efgd::network::{Network, NetworkConfig};
use efgd::prune::PruneConfig;
use efgd::trainer::{train, Cadence, NoObserver, TrainConfig};

fn main() -> efgd::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "runs/angles".into());
    std::fs::create_dir_all(&out).expect("create output dir");

    let mut data = synth_blobs(5, 1_000, &[1, 6, 6], 2)?;
    data.standardize()?;
    let net_cfg = NetworkConfig { input: vec![1, 6, 6], ..NetworkConfig::mlp(36, &[48, 24], 5) };
    let mut cfg = TrainConfig::new(FeedbackMode::SignSym, 2);
    cfg.epochs = 3;
    cfg.lr = 0.02;
    cfg.prune = PruneConfig::with_rate(0.7);
    cfg.diagnostics = Cadence::Steps(5);
    cfg.histogram_bins = 30;

    let mut net = Network::<f32>::build(&net_cfg, cfg.seed)?;
    let report = train(&mut net, &data, None, &cfg, &mut NoObserver)?;
    for e in &report.epochs {
        println!("epoch {} mean angle per layer (deg): {:?}", e.epoch, e.angles);
    }
    std::fs::write(out.join("angles.csv"), angles_csv(&report.angles)).expect("write angles");
    for h in &report.histograms {
        std::fs::write(out.join(histogram_file_name(h)), histogram_csv(h)).expect("write histogram");
    }
    println!("{} angle records and {} histograms in {}", report.angles.len(), report.histograms.len(), out.display());
    Ok(())
}
