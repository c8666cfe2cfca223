//! Trains an MLP with sign-symmetric feedback and error pruning on synthetic
//! clusters, streams per-epoch metrics through an observer, then saves,
//! reloads and evaluates a checkpoint.
//!
//! ```text
//! cargo run --example train_blobs
//! ```

use efgd::checkpoint;
use efgd::data::synth_blobs;
use efgd::feedback::FeedbackMode;
use efgd::network::{Network, NetworkConfig};
use efgd::prune::PruneConfig;
use efgd::trainer::{evaluate, train, EpochMetrics, TrainConfig, TrainObserver};

struct Printer;

impl TrainObserver<f32> for Printer {
    fn on_epoch_end(&mut self, _net: &Network<f32>, m: &EpochMetrics) -> efgd::Result<()> {
        println!(
            "epoch {}  loss {:.4}  train {:.3}  val {:.3}  sparsity {:?}  MAC speedup {:.2}x",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.val_acc.unwrap_or(f64::NAN),
            m.sparsity.values().map(|s| (s * 100.0).round() / 100.0).collect::<Vec<_>>(),
            m.cost.mac_speedup
        );
        Ok(())
    }
}

fn main() -> efgd::Result<()> {
    let all = synth_blobs(6, 1_800, &[1, 8, 8], 11)?;
    let idx: Vec<usize> = (0..all.len()).collect();
    let (mut tr, mut va) = (all.select(&idx[..1_500])?, all.select(&idx[1_500..])?);
    let norm = tr.standardize()?;
    va.apply_normalization(&norm)?;

    let net_cfg = NetworkConfig { input: vec![1, 8, 8], ..NetworkConfig::mlp(64, &[64, 32], 6) };
    let mut cfg = TrainConfig::new(FeedbackMode::SignSym, 11);
    cfg.epochs = 4;
    cfg.lr = 0.02;
    cfg.prune = PruneConfig::with_rate(0.8);

    let mut net = Network::<f32>::build(&net_cfg, cfg.seed)?;
    let report = train(&mut net, &tr, Some(&va), &cfg, &mut Printer)?;
    println!("{} steps", report.steps);

    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("final.ckpt");
    checkpoint::save(&path, &net, cfg.epochs, Some(&norm))?;
    let (restored, header) = checkpoint::load(&path)?;
    let (loss, acc) = evaluate(&restored, &va, 256)?;
    println!("restored epoch {}: val loss {loss:.4}, accuracy {acc:.3}", header.epoch);
    Ok(())
}
