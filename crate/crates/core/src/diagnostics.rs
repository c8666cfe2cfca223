//! Angles between training and exact error signals, error histograms, and
//! their CSV forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::backprop::{self, ExactTranspose};
use crate::error::{Error, Result};
use crate::feedback::angle_to_bp;
use crate::network::{ForwardTrace, Network};
use crate::tensor::{Scalar, Tensor};

/// Exact error signal at the output of every layer, with no pruning. Reads
/// the network and trace only.
pub fn shadow_bp_pass<T: Scalar>(net: &Network<T>, trace: &ForwardTrace<T>) -> Result<Vec<Tensor<T>>> {
    Ok(backprop::backward(net, trace, &ExactTranspose, None)?.deltas)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AngleRecord {
    pub epoch: usize,
    pub step: u64,
    pub layer: usize,
    /// Degrees in `[0, 180]`; `None` when either signal is all zero.
    pub angle_deg: Option<f64>,
}

/// One record per layer in `layers`, comparing `eg[l]` against `bp[l]`.
pub fn record_angles<T: Scalar>(
    epoch: usize,
    step: u64,
    layers: &[usize],
    eg: &[Tensor<T>],
    bp: &[Tensor<T>],
) -> Result<Vec<AngleRecord>> {
    if eg.len() != bp.len() {
        return Err(Error::dim("layers", format!("{} training signals vs {} exact", eg.len(), bp.len())));
    }
    layers
        .iter()
        .map(|&layer| {
            let (a, b) = eg
                .get(layer)
                .zip(bp.get(layer))
                .ok_or_else(|| Error::Contract(format!("no error signal for layer {layer}")))?;
            let angle_deg = match angle_to_bp(a, b) {
                Ok(v) => Some(v),
                Err(Error::UndefinedAngle(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(AngleRecord { epoch, step, layer, angle_deg })
        })
        .collect()
}

/// Counts over fixed edges plus one overflow bin at each end.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradHistogram {
    pub epoch: usize,
    pub layer: usize,
    /// `bins + 1` ascending edges; bin `i` is `[edges[i], edges[i+1])`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub underflow: u64,
    /// Includes values equal to the last edge.
    pub overflow: u64,
}

impl GradHistogram {
    pub fn total(&self) -> u64 {
        self.underflow + self.overflow + self.counts.iter().sum::<u64>()
    }

    /// Rows of `(lo, hi, count)` including the two overflow bins.
    pub fn rows(&self) -> Vec<(f64, f64, u64)> {
        let mut rows = Vec::with_capacity(self.counts.len() + 2);
        rows.push((f64::NEG_INFINITY, self.edges[0], self.underflow));
        for (i, &c) in self.counts.iter().enumerate() {
            rows.push((self.edges[i], self.edges[i + 1], c));
        }
        rows.push((*self.edges.last().expect("edges"), f64::INFINITY, self.overflow));
        rows
    }
}

/// `±5` standard deviations of `delta`, or `±1` when it is constant zero.
pub fn auto_range<T: Scalar>(delta: &Tensor<T>) -> (f64, f64) {
    let s = delta.std();
    if s > 0.0 && s.is_finite() {
        (-5.0 * s, 5.0 * s)
    } else {
        (-1.0, 1.0)
    }
}

pub fn record_histogram<T: Scalar>(
    epoch: usize,
    layer: usize,
    delta: &Tensor<T>,
    bins: usize,
    range: (f64, f64),
) -> Result<GradHistogram> {
    let (lo, hi) = range;
    if bins < 2 {
        return Err(Error::Contract(format!("a histogram needs at least 2 bins, got {bins}")));
    }
    if lo.is_nan() || hi.is_nan() || lo >= hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Contract(format!("bad histogram range [{lo}, {hi})")));
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0u64; bins];
    let (mut underflow, mut overflow) = (0, 0);
    for v in delta.data() {
        let v = v.as_f64();
        if v < lo {
            underflow += 1;
        } else if v >= hi || v.is_nan() {
            overflow += 1;
        } else {
            // Float rounding can put `v` one bin off the computed index.
            let mut i = (((v - lo) / width) as usize).min(bins - 1);
            while i > 0 && v < edges[i] {
                i -= 1;
            }
            while i + 1 < bins && v >= edges[i + 1] {
                i += 1;
            }
            counts[i] += 1;
        }
    }
    Ok(GradHistogram { epoch, layer, edges, counts, underflow, overflow })
}

/// Collects angles and histograms over a run. Histogram ranges per layer are
/// fixed by the first histogram recorded for that layer.
#[derive(Clone, Debug, Default)]
pub struct Recorder {
    pub bins: usize,
    pub angles: Vec<AngleRecord>,
    pub histograms: Vec<GradHistogram>,
    ranges: BTreeMap<usize, (f64, f64)>,
}

impl Recorder {
    pub fn new(bins: usize) -> Self {
        Self { bins, ..Self::default() }
    }

    pub fn histogram<T: Scalar>(&mut self, epoch: usize, layer: usize, delta: &Tensor<T>) -> Result<()> {
        let range = *self.ranges.entry(layer).or_insert_with(|| auto_range(delta));
        let h = record_histogram(epoch, layer, delta, self.bins, range)?;
        self.histograms.push(h);
        Ok(())
    }

    /// Mean of the defined angles per layer for `epoch`.
    pub fn mean_angles(&self, epoch: usize) -> BTreeMap<usize, f64> {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in self.angles.iter().filter(|r| r.epoch == epoch) {
            if let Some(a) = r.angle_deg {
                let e = acc.entry(r.layer).or_default();
                e.0 += a;
                e.1 += 1;
            }
        }
        acc.into_iter().map(|(l, (s, n))| (l, s / n as f64)).collect()
    }
}

/// `epoch,step,layer,angle_deg`; a missing angle is an empty field.
pub fn angles_csv(records: &[AngleRecord]) -> String {
    let mut s = String::from("epoch,step,layer,angle_deg\n");
    for r in records {
        let angle = r.angle_deg.map(|a| format!("{a:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.step, r.layer, angle);
    }
    s
}

/// `bin_lo,bin_hi,count`, overflow bins first and last with infinite bounds.
pub fn histogram_csv(h: &GradHistogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (lo, hi, c) in h.rows() {
        let _ = writeln!(s, "{},{},{}", fmt_edge(lo), fmt_edge(hi), c);
    }
    s
}

fn fmt_edge(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:e}")
    }
}

pub fn histogram_file_name(h: &GradHistogram) -> String {
    format!("hist_{}_{}.csv", h.layer, h.epoch)
}
