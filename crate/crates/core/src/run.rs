//! Run directories: configuration, artifacts, and the commands behind the
//! `efgd` binary.
//!
//! A run directory after `train` holds:
//!
//! | file                   | contents                                          |
//! |------------------------|---------------------------------------------------|
//! | `config.resolved.json` | the config with CLI overrides applied             |
//! | `metrics.jsonl`        | one JSON object per epoch                         |
//! | `angles.csv`           | `epoch,step,layer,angle_deg`                      |
//! | `hist_<l>_<e>.csv`     | `bin_lo,bin_hi,count` (when histograms are on)    |
//! | `prune_stats.json`     | pooled pruning counters per layer                 |
//! | `cost.json`            | cost model with the measured sparsity             |
//! | `run_meta.json`        | normalization constants, split sizes, notes       |
//! | `checkpoints/`         | `epoch_<e>.ckpt` and `final.ckpt`                 |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::costmodel::{uniform_zero_fractions, weighted_shapes, CostReport, CostSummary};
use crate::data::{self, Dataset, Normalization};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::prune::{expected_zero_fraction, PruneStats};
use crate::trainer::{self, CompareMode, EpochMetrics, TrainConfig, TrainObserver, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    /// MNIST IDX files in `dir`; validation is the test split.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        subset: Option<usize>,
        #[serde(default)]
        val_subset: Option<usize>,
    },
    Cifar10 {
        train_files: Vec<PathBuf>,
        val_files: Vec<PathBuf>,
        #[serde(default)]
        subset: Option<usize>,
        #[serde(default)]
        val_subset: Option<usize>,
    },
    /// Synthetic clusters; the last `val_samples` of one draw are held out.
    Blobs { classes: usize, samples: usize, val_samples: usize, shape: Vec<usize> },
}

fn yes() -> bool {
    true
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub data: DataSpec,
    /// Standardize inputs with constants fitted on the training split.
    #[serde(default = "yes")]
    pub standardize: bool,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Write a checkpoint every this many epochs; 0 = final only.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Worker threads; 0 = one per core. Results do not depend on it.
    #[serde(default)]
    pub threads: usize,
}

/// Command-line values that replace config entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub subset: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.train.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(k) = o.subset {
            match &mut self.data {
                DataSpec::Mnist { subset, .. } | DataSpec::Cifar10 { subset, .. } => *subset = Some(k),
                DataSpec::Blobs { samples, .. } => *samples = k,
            }
        }
        Ok(())
    }

    /// Everything that can be checked without touching data.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        Network::<f32>::build(&self.network, self.train.seed).map_err(|e| Error::Config(format!("network: {e}")))?;
        if let DataSpec::Blobs { classes, samples, val_samples, shape } = &self.data {
            if *classes < 2 || *samples == 0 || *val_samples == 0 || shape.len() != 3 {
                return Err(Error::Config(format!("bad blobs spec: {:?}", self.data)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Training and validation splits, standardized if configured.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let seed = cfg.train.seed;
    let subset = |ds: Dataset, k: Option<usize>, salt: u64| match k {
        Some(k) if k < ds.len() => ds.stratified_subset(k, seed ^ salt),
        _ => Ok(ds),
    };
    let (mut train, mut val) = match &cfg.data {
        DataSpec::Mnist { dir, subset: k, val_subset } => {
            let (t, v) = data::load_mnist(dir)?;
            (subset(t, *k, 0)?, subset(v, *val_subset, 1)?)
        }
        DataSpec::Cifar10 { train_files, val_files, subset: k, val_subset } => {
            let t = data::read_cifar10(train_files)?;
            let v = data::read_cifar10(val_files)?;
            (subset(t, *k, 0)?, subset(v, *val_subset, 1)?)
        }
        DataSpec::Blobs { classes, samples, val_samples, shape } => {
            // Same centres, fresh noise: draw both from one seed and split.
            let all = data::synth_blobs(*classes, samples + val_samples, shape, seed)?;
            let idx: Vec<usize> = (0..all.len()).collect();
            let (t, v) = idx.split_at(*samples);
            let mut train = all.select(t)?;
            let mut val = all.select(v)?;
            train.split = "blobs-train".into();
            val.split = "blobs-val".into();
            (train, val)
        }
    };
    if cfg.standardize {
        let norm = train.standardize()?;
        val.apply_normalization(&norm)?;
    }
    Ok((train, val))
}

/// Process exit code for an error: 2 for configuration, input and format
/// problems, 3 for divergence, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io { .. } | Error::Parse { .. } | Error::Json(_) | Error::Build { .. } => 2,
        Error::Diverged { .. } => 3,
        _ => 1,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct RunMeta<'a> {
    train_split: &'a str,
    train_samples: usize,
    val_split: &'a str,
    val_samples: usize,
    normalization: Option<&'a Normalization>,
    angles: &'static str,
}

/// Streams metrics and checkpoints to the run directory as epochs finish,
/// so a diverged run keeps everything up to its last good epoch.
struct RunWriter {
    dir: PathBuf,
    metrics: String,
    checkpoint_every: usize,
    normalization: Option<Normalization>,
}

impl TrainObserver<f32> for RunWriter {
    fn on_epoch_end(&mut self, net: &Network<f32>, m: &EpochMetrics) -> Result<()> {
        self.metrics.push_str(&serde_json::to_string(m)?);
        self.metrics.push('\n');
        write(&self.dir.join("metrics.jsonl"), &self.metrics)?;
        if self.checkpoint_every > 0 && m.epoch.is_multiple_of(self.checkpoint_every) {
            let p = self.dir.join("checkpoints").join(format!("epoch_{:03}.ckpt", m.epoch));
            checkpoint::save(&p, net, m.epoch, self.normalization.as_ref())?;
        }
        Ok(())
    }
}

fn cost_summary(cfg: &RunConfig, zero_fractions: &BTreeMap<usize, f64>) -> Result<CostSummary> {
    let shapes = weighted_shapes(&cfg.network)?;
    let report =
        CostReport::build(&shapes, &cfg.train.feedback, &cfg.train.cost, cfg.train.batch_size, zero_fractions)?;
    CostSummary::new(report)
}

/// Trains per `cfg` and writes the run directory. Returns the report.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let dir = &cfg.out_dir;
    create_dir(&dir.join("checkpoints"))?;
    write(&dir.join("config.resolved.json"), cfg.to_json()?)?;
    let (train, val) = load_data(cfg)?;
    let meta = RunMeta {
        train_split: &train.split,
        train_samples: train.len(),
        val_split: &val.split,
        val_samples: val.len(),
        normalization: train.normalization.as_ref(),
        angles: "single-batch snapshots: one mini-batch per sampled step, not averaged over batches",
    };
    write(&dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

    let mut writer = RunWriter {
        dir: dir.clone(),
        metrics: String::new(),
        checkpoint_every: cfg.checkpoint_every,
        normalization: train.normalization.clone(),
    };
    let report = trainer::with_threads(cfg.threads, || -> Result<(Network<f32>, TrainReport)> {
        let mut net = Network::<f32>::build(&cfg.network, cfg.train.seed)?;
        let r = trainer::train(&mut net, &train, Some(&val), &cfg.train, &mut writer)?;
        Ok((net, r))
    })?;
    let (net, report) = report?;

    checkpoint::save(
        &dir.join("checkpoints").join("final.ckpt"),
        &net,
        cfg.train.epochs,
        train.normalization.as_ref(),
    )?;
    write(&dir.join("angles.csv"), diagnostics::angles_csv(&report.angles))?;
    for h in &report.histograms {
        write(&dir.join(diagnostics::histogram_file_name(h)), diagnostics::histogram_csv(h))?;
    }
    write(&dir.join("prune_stats.json"), serde_json::to_string_pretty(&report.prune_totals)? + "\n")?;
    let zeros = report.prune_totals.iter().map(|(&l, s)| (l, s.realized_zero_fraction)).collect();
    write(&dir.join("cost.json"), cost_summary(cfg, &zeros)?.to_json()? + "\n")?;
    Ok(report)
}

/// One training run per mode; writes `compare.csv` and
/// `<mode>/metrics.jsonl`.
pub fn cmd_compare(cfg: &RunConfig, modes: &[CompareMode]) -> Result<trainer::Comparison> {
    cfg.validate()?;
    let (train, val) = load_data(cfg)?;
    let cmp = trainer::with_threads(cfg.threads, || {
        trainer::compare_modes(&cfg.network, &train, Some(&val), &cfg.train, modes)
    })??;
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("config.resolved.json"), cfg.to_json()?)?;
    write(&cfg.out_dir.join("compare.csv"), cmp.to_csv())?;
    for (m, r) in cmp.modes.iter().zip(&cmp.reports) {
        let d = cfg.out_dir.join(m);
        create_dir(&d)?;
        write(&d.join("metrics.jsonl"), r.metrics_jsonl()?)?;
    }
    Ok(cmp)
}

/// Cost model without training: the configured pruning rate's expected
/// zero fraction on Gaussian errors, or measured counters from a finished
/// run. Writes `cost.json`.
pub fn cmd_cost(cfg: &RunConfig, from_run: Option<&Path>) -> Result<CostSummary> {
    cfg.validate()?;
    let zeros: BTreeMap<usize, f64> = match from_run {
        Some(run) => {
            let p = run.join("prune_stats.json");
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            let stats: BTreeMap<usize, PruneStats> = serde_json::from_str(&text)?;
            stats.into_iter().map(|(l, s)| (l, s.realized_zero_fraction)).collect()
        }
        None if cfg.train.prune.enabled => {
            let shapes = weighted_shapes(&cfg.network)?;
            uniform_zero_fractions(&shapes, expected_zero_fraction(cfg.train.prune.rate))
        }
        None => BTreeMap::new(),
    };
    let summary = cost_summary(cfg, &zeros)?;
    create_dir(&cfg.out_dir)?;
    write(&cfg.out_dir.join("cost.json"), summary.to_json()? + "\n")?;
    Ok(summary)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Evaluates a checkpoint on the validation split of `cfg`, standardized
/// with the checkpoint's own constants.
pub fn cmd_eval(cfg: &RunConfig, checkpoint_path: &Path) -> Result<EvalResult> {
    let (net, header) = checkpoint::load(checkpoint_path)?;
    let mut raw = cfg.clone();
    raw.standardize = false;
    let (_, mut val) = load_data(&raw)?;
    if let Some(norm) = &header.normalization {
        val.apply_normalization(norm)?;
    }
    let (loss, accuracy) = trainer::with_threads(cfg.threads, || trainer::evaluate(&net, &val, 256))??;
    Ok(EvalResult { loss, accuracy, samples: val.len() })
}
