//! Trains the small CNN on an MNIST subset under several feedback modes and
//! prints the per-epoch validation accuracy side by side.
//!
//! ```text
//! cargo run --release --example accuracy_parity -- [data/mnist] [train-subset] [epochs] [modes]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use efgd::data::load_mnist;
use efgd::feedback::FeedbackMode;
use efgd::network::NetworkConfig;
use efgd::prune::PruneConfig;
use efgd::trainer::{compare_modes, parse_modes, Cadence, TrainConfig};

fn main() -> efgd::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let dir = args.first().map(PathBuf::from).unwrap_or_else(|| "data/mnist".into());
    let subset: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let modes = parse_modes(args.get(3).map(String::as_str).unwrap_or("bp,signsym,binarysign,signsym_prune"))?;

    let (train, test) = load_mnist(&dir)?;
    let mut train = train.stratified_subset(subset, 1)?;
    let mut val = test.stratified_subset(2_000, 2)?;
    let norm = train.standardize()?;
    val.apply_normalization(&norm)?;

    let mut cfg = TrainConfig::new(FeedbackMode::Bp, 1);
    cfg.epochs = epochs;
    cfg.batch_size = 64;
    cfg.lr = 0.02;
    cfg.momentum = 0.9;
    cfg.diagnostics = Cadence::Off;
    cfg.prune = PruneConfig { enabled: false, ..PruneConfig::with_rate(0.7) };

    let net = NetworkConfig::small_cnn([1, 28, 28], &[16, 32], 10);
    let started = Instant::now();
    let cmp = compare_modes(&net, &train, Some(&val), &cfg, &modes)?;
    print!("{}", cmp.to_csv());
    for (m, r) in cmp.modes.iter().zip(&cmp.reports) {
        let last = r.epochs.last().expect("at least one epoch");
        println!(
            "{m:>14}: val {:.4}  train loss {:.4}  MAC speedup {:.3}x  traffic reduction {:.3}x",
            last.val_acc.unwrap_or(f64::NAN),
            last.train_loss,
            last.cost.mac_speedup,
            last.cost.traffic_reduction
        );
    }
    eprintln!("{:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}
