//! Mini-batch training: forward, error pass, weight gradients, momentum SGD.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backprop::{self, BackwardPass, PruneHook};
use crate::costmodel::{weighted_shapes, CostParams, CostReport};
use crate::data::Dataset;
use crate::diagnostics::{self, AngleRecord, GradHistogram, Recorder};
use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, FeedbackMode, FeedbackState};
use crate::network::{Network, NetworkConfig};
use crate::prune::{PruneConfig, PruneStats, Pruner};
use crate::rng::{self, Domain};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {},
    /// Multiply by `factor` once at the start of each milestone epoch
    /// (1-based).
    Step {
        milestones: Vec<usize>,
        #[serde(default = "default_decay")]
        factor: f64,
    },
}

fn default_decay() -> f64 {
    0.1
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant {}
    }
}

/// When to sample angles (and histograms, if enabled).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Cadence {
    Off,
    /// On the last step of every epoch.
    #[default]
    Epoch,
    /// Whenever the global step is a multiple of `n`.
    Steps(u64),
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    #[serde(default)]
    pub schedule: LrSchedule,
    pub feedback: FeedbackConfig,
    #[serde(default = "PruneConfig::disabled")]
    pub prune: PruneConfig,
    pub seed: u64,
    /// Evaluate on the validation split every this many epochs; 0 = never.
    #[serde(default = "one")]
    pub eval_every: usize,
    #[serde(default)]
    pub diagnostics: Cadence,
    /// Histogram bins for sampled error tensors; 0 = no histograms.
    #[serde(default)]
    pub histogram_bins: usize,
    #[serde(default)]
    pub cost: CostParams,
    /// Put wall-clock seconds in the metrics (makes them run-dependent).
    #[serde(default)]
    pub record_wall_time: bool,
}

impl TrainConfig {
    pub fn new(feedback: FeedbackMode, seed: u64) -> Self {
        Self {
            batch_size: 32,
            epochs: 1,
            lr: 0.05,
            momentum: 0.9,
            schedule: LrSchedule::default(),
            feedback: FeedbackConfig::new(feedback),
            prune: PruneConfig::disabled(),
            seed,
            eval_every: 1,
            diagnostics: Cadence::Epoch,
            histogram_bins: 0,
            cost: CostParams::default(),
            record_wall_time: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if let LrSchedule::Step { factor, .. } = self.schedule {
            if factor.is_nan() || factor <= 0.0 {
                return bad(format!("lr decay factor must be positive, got {factor}"));
            }
        }
        if self.diagnostics == Cadence::Steps(0) {
            return bad("diagnostics step interval must be at least 1".into());
        }
        if self.histogram_bins == 1 {
            return bad("histograms need at least 2 bins".into());
        }
        self.prune.validate()?;
        self.cost.validate()
    }

    /// Learning rate in effect during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match &self.schedule {
            LrSchedule::Constant {} => self.lr,
            LrSchedule::Step { milestones, factor } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                self.lr * factor.powi(passed as i32)
            }
        }
    }
}

/// Per-epoch cost tallies summed over the epoch's steps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochCost {
    pub macs_total: u64,
    pub macs_effective: f64,
    pub dram_bytes: f64,
    pub mac_speedup: f64,
    pub traffic_reduction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Mean sampled angle per weighted layer, degrees.
    pub angles: BTreeMap<usize, f64>,
    /// Fraction of each pruned layer's errors zeroed over the epoch.
    pub sparsity: BTreeMap<usize, f64>,
    pub cost: EpochCost,
    pub wall_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
    pub angles: Vec<AngleRecord>,
    pub histograms: Vec<GradHistogram>,
    /// Pruning counters pooled over the whole run.
    pub prune_totals: BTreeMap<usize, PruneStats>,
    pub steps: u64,
    /// [`FeedbackState::checksum`] of the feedback matrices at the end of
    /// the run.
    pub feedback_checksum: u64,
}

impl TrainReport {
    pub fn final_val_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_acc)
    }

    /// One JSON object per line.
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

/// Hooks into the step loop. Every method defaults to doing nothing.
pub trait TrainObserver<T> {
    fn on_forward(&mut self, _step: u64) {}
    /// Phase 2 finished for every layer.
    fn on_errors(&mut self, _step: u64, _pass: &BackwardPass<T>) {}
    /// `delta` is the exact tensor handed to the weight-gradient computation.
    fn on_weight_grad(&mut self, _step: u64, _layer: usize, _delta: &Tensor<T>) {}
    fn on_update(&mut self, _step: u64) {}
    fn on_epoch_end(&mut self, _net: &Network<T>, _metrics: &EpochMetrics) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl<T> TrainObserver<T> for NoObserver {}

fn diverged(epoch: usize, step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step, source: Box::new(e) },
        other => other,
    }
}

fn check_data<T: Scalar>(net: &Network<T>, ds: &Dataset) -> Result<()> {
    if ds.sample_shape() != net.config.input.as_slice() {
        return Err(Error::dim(
            "input",
            format!("split `{}` has samples {:?}, network takes {:?}", ds.split, ds.sample_shape(), net.config.input),
        ));
    }
    if ds.class_count > net.num_classes() {
        return Err(Error::dim(
            "classes",
            format!("split `{}` has {} classes, network outputs {}", ds.split, ds.class_count, net.num_classes()),
        ));
    }
    Ok(())
}

/// Trains `net` in place.
pub fn train<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver<T>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(net, train)?;
    if let Some(v) = val {
        check_data(net, v)?;
    }
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    let feedback = FeedbackState::init(net, &cfg.feedback, rng::derive_seed(cfg.seed, Domain::Feedback))?;
    let mut pruner = Pruner::new(cfg.prune.clone(), rng::derive_seed(cfg.seed, Domain::Prune))?;
    let mut shuffle = rng::stream(cfg.seed, Domain::Shuffle);
    let weighted = net.weighted_layers();
    let shapes = weighted_shapes(&net.config)?;
    let mut recorder = Recorder::new(cfg.histogram_bins);
    let mut prune_totals: BTreeMap<usize, PruneStats> = BTreeMap::new();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle);
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        let mut epoch_prune: BTreeMap<usize, PruneStats> = BTreeMap::new();
        let mut cost = EpochCost::default();
        let (mut base_macs, mut base_bytes) = (0u64, 0.0f64);

        for (b, idx) in batches.iter().enumerate() {
            let (x, y) = train.batch::<T>(idx)?;
            obs.on_forward(step);
            let out = net.forward_train(&x, &y).map_err(|e| diverged(epoch, step, e))?;
            loss_sum += out.loss * y.len() as f64;
            correct += out.predictions.iter().zip(&y).filter(|(p, t)| p == t).count();

            let hook = PruneHook { pruner: &mut pruner, step };
            let pass = backprop::backward(net, &out.trace, &feedback, Some(hook))?;
            obs.on_errors(step, &pass);

            let sample = match cfg.diagnostics {
                Cadence::Off => false,
                Cadence::Epoch => b + 1 == batches.len(),
                Cadence::Steps(n) => step.is_multiple_of(n),
            };
            if sample {
                let exact = diagnostics::shadow_bp_pass(net, &out.trace)?;
                recorder.angles.extend(diagnostics::record_angles(epoch, step, &weighted, &pass.deltas, &exact)?);
                if cfg.histogram_bins > 0 && b + 1 == batches.len() {
                    for &l in &weighted {
                        recorder.histogram(epoch, l, &pass.deltas[l])?;
                    }
                }
            }

            let mut grads = Vec::with_capacity(net.layers.len());
            for (i, layer) in net.layers.iter().enumerate() {
                if layer.spec.is_weighted() {
                    obs.on_weight_grad(step, i, &pass.deltas[i]);
                    grads.push(net.weight_grad(i, &pass.deltas[i], &out.trace)?);
                } else {
                    grads.push(pass.bn_grads.get(&i).cloned().unwrap_or_default());
                }
            }
            obs.on_update(step);
            net.sgd_step(&grads, lr, cfg.momentum)?;

            let zeros: BTreeMap<usize, f64> =
                pass.prune_stats.iter().map(|(&l, s)| (l, s.realized_zero_fraction)).collect();
            let report = CostReport::build(&shapes, &cfg.feedback, &cfg.cost, y.len(), &zeros)?;
            let base = report.baseline()?;
            cost.macs_total += report.totals.macs_total;
            cost.macs_effective += report.totals.macs_effective;
            cost.dram_bytes += report.totals.dram_bytes;
            base_macs += base.totals.macs_total;
            base_bytes += base.totals.dram_bytes;
            for (l, s) in &pass.prune_stats {
                let e = epoch_prune.entry(*l).or_default();
                *e = e.merge(s);
            }
            step += 1;
        }
        cost.mac_speedup = base_macs as f64 / cost.macs_effective;
        cost.traffic_reduction = base_bytes / cost.dram_bytes;

        let val_acc = match val {
            Some(v) if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) => {
                Some(evaluate(net, v, cfg.batch_size.max(256))?.1)
            }
            _ => None,
        };
        for (l, s) in &epoch_prune {
            let e = prune_totals.entry(*l).or_default();
            *e = e.merge(s);
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            angles: recorder.mean_angles(epoch),
            sparsity: epoch_prune.iter().map(|(&l, s)| (l, s.realized_zero_fraction)).collect(),
            cost,
            wall_s: cfg.record_wall_time.then(|| started.elapsed().as_secs_f64()),
        };
        obs.on_epoch_end(net, &metrics)?;
        epochs.push(metrics);
    }
    Ok(TrainReport {
        epochs,
        angles: recorder.angles,
        histograms: recorder.histograms,
        prune_totals,
        steps: step,
        feedback_checksum: feedback.checksum(),
    })
}

/// Batch-mean loss and accuracy in evaluation mode. Ties in the output go
/// to the lowest class index.
pub fn evaluate<T: Scalar>(net: &Network<T>, ds: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Contract(format!("cannot evaluate on empty split `{}`", ds.split)));
    }
    check_data(net, ds)?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut loss, mut correct) = (0.0f64, 0usize);
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = ds.batch::<T>(chunk)?;
        let out = net.forward_eval(&x, &y)?;
        loss += out.loss * y.len() as f64;
        correct += out.predictions.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

/// A training variant in a side-by-side comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CompareMode {
    Bp,
    Fa,
    SignSym,
    BinarySign,
    /// Sign-symmetric feedback with error pruning at the base config's rate.
    SignSymPrune,
}

impl CompareMode {
    pub const ALL: [CompareMode; 5] =
        [CompareMode::Bp, CompareMode::Fa, CompareMode::SignSym, CompareMode::BinarySign, CompareMode::SignSymPrune];

    pub fn as_str(self) -> &'static str {
        match self {
            CompareMode::Bp => "bp",
            CompareMode::Fa => "fa",
            CompareMode::SignSym => "signsym",
            CompareMode::BinarySign => "binarysign",
            CompareMode::SignSymPrune => "signsym_prune",
        }
    }

    /// `base` with this mode's feedback and pruning switched in.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        let (mode, prune) = match self {
            CompareMode::Bp => (FeedbackMode::Bp, false),
            CompareMode::Fa => (FeedbackMode::Fa, false),
            CompareMode::SignSym => (FeedbackMode::SignSym, false),
            CompareMode::BinarySign => (FeedbackMode::BinarySign, false),
            CompareMode::SignSymPrune => (FeedbackMode::SignSym, true),
        };
        cfg.feedback = FeedbackConfig { mode, overrides: BTreeMap::new(), freeze_signs: base.feedback.freeze_signs };
        cfg.prune.enabled = prune;
        cfg
    }
}

impl fmt::Display for CompareMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompareMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CompareMode::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            Error::Config(format!("unknown mode `{s}` (expected one of bp, fa, signsym, binarysign, signsym_prune)"))
        })
    }
}

pub fn parse_modes(list: &str) -> Result<Vec<CompareMode>> {
    let modes = list.split(',').map(|s| s.trim().parse()).collect::<Result<Vec<_>>>()?;
    if modes.is_empty() {
        return Err(Error::Config("empty mode list".into()));
    }
    Ok(modes)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub modes: Vec<String>,
    pub reports: Vec<TrainReport>,
}

impl Comparison {
    /// `epoch, <mode>...` with validation accuracy (empty when not evaluated).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch");
        for m in &self.modes {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        let rows = self.reports.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
        for e in 0..rows {
            s.push_str(&(e + 1).to_string());
            for r in &self.reports {
                s.push(',');
                if let Some(a) = r.epochs.get(e).and_then(|m| m.val_acc) {
                    s.push_str(&format!("{a:.6}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Trains a fresh network per mode from the same seed and data.
pub fn compare_modes(
    net_cfg: &NetworkConfig,
    train_set: &Dataset,
    val: Option<&Dataset>,
    base: &TrainConfig,
    modes: &[CompareMode],
) -> Result<Comparison> {
    let mut reports = Vec::with_capacity(modes.len());
    for &m in modes {
        let mut net = Network::<f32>::build(net_cfg, base.seed)?;
        reports.push(train(&mut net, train_set, val, &m.apply(base), &mut NoObserver)?);
    }
    Ok(Comparison { modes: modes.iter().map(|m| m.to_string()).collect(), reports })
}

/// Runs `f` on a pool of `threads` workers (0 = rayon's default).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} threads: {e}")))?;
    Ok(pool.install(f))
}
