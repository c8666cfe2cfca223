//! First-order MAC and off-chip traffic accounting for one training step.
//!
//! Three phases per weighted layer: forward, error propagation (phase 2),
//! weight gradient (phase 3). All three cost the same MAC count. Pruned
//! (zeroed) errors skip their share of phase 2 and 3 MACs and are not
//! transferred. Counts are per mini-batch of `batch` samples.
//!
//! Traffic per layer, `b` bytes per value:
//!
//! | phase | bytes                                                   |
//! |-------|---------------------------------------------------------|
//! | 1     | `b*|W| + b*N*|out|`                                     |
//! | 2     | feedback fetch `+ b*N*|out|*(1-z)`                      |
//! | 3     | `b*N*|in| + b*N*|out|*(1-z) + b*|W|`                    |
//!
//! Feedback fetch in phase 2: `bp` re-reads `W` (`b*|W|`); `signsym` and
//! `binarysign` read packed signs (`ceil(|W|*sign_bits/8)`); `signsym` and
//! `fa` also read `B` unless it stays resident on chip, amortized over
//! `amortization_steps`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{FeedbackConfig, FeedbackMode};
use crate::network::{layer_shapes, LayerSpec, NetworkConfig};
use crate::prune::PruneStats;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostParams {
    pub bytes_per_value: f64,
    pub sign_bits: f64,
    /// Energy per off-chip byte, relative units.
    pub e_dram: f64,
    /// Energy per MAC, relative units.
    pub e_mac: f64,
    /// Fixed feedback stays on chip after its first fetch.
    pub feedback_resident: bool,
    /// Steps that share one fetch of non-resident fixed feedback.
    pub amortization_steps: u64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            bytes_per_value: 4.0,
            sign_bits: 1.0,
            e_dram: 1.0,
            e_mac: 1.0,
            feedback_resident: true,
            amortization_steps: 1,
        }
    }
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.bytes_per_value, self.sign_bits, self.e_dram, self.e_mac];
        if positive.iter().any(|v| v.is_nan() || *v <= 0.0 || !v.is_finite()) || self.amortization_steps == 0 {
            return Err(Error::Config(format!("cost parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Forward,
    Backward,
    WeightGrad,
}

/// What the cost model needs to know about one weighted layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerShape {
    pub layer: usize,
    pub kind: String,
    pub weight_count: u64,
    /// Elements of one sample's input and output.
    pub in_elems: u64,
    pub out_elems: u64,
    /// MACs for one sample's forward pass.
    pub macs_per_sample: u64,
}

/// Shapes of the weighted layers of `cfg`.
pub fn weighted_shapes(cfg: &NetworkConfig) -> Result<Vec<LayerShape>> {
    let mut out = Vec::new();
    for (i, (spec, ins, outs)) in layer_shapes(cfg)?.into_iter().enumerate() {
        let in_elems: usize = ins.iter().product();
        let out_elems: usize = outs.iter().product();
        let (weight_count, macs) = match spec {
            LayerSpec::Conv2d { out_channels, kernel, .. } => {
                let w = out_channels * ins[0] * kernel * kernel;
                // Cout*Ho*Wo * Cin*K^2
                (w, out_elems * ins[0] * kernel * kernel)
            }
            LayerSpec::Linear { out_features, .. } => (out_features * in_elems, out_features * in_elems),
            _ => continue,
        };
        out.push(LayerShape {
            layer: i,
            kind: spec.name().to_string(),
            weight_count: weight_count as u64,
            in_elems: in_elems as u64,
            out_elems: out_elems as u64,
            macs_per_sample: macs as u64,
        });
    }
    Ok(out)
}

/// MACs of `phase` for a batch of `batch`; identical for all three phases.
pub fn layer_macs(shape: &LayerShape, _phase: Phase, batch: usize) -> u64 {
    shape.macs_per_sample * batch as u64
}

/// Phase-2 bytes: feedback fetch plus surviving error values.
pub fn phase2_traffic(
    shape: &LayerShape,
    mode: FeedbackMode,
    params: &CostParams,
    batch: usize,
    zero_fraction: f64,
) -> f64 {
    feedback_fetch(shape, mode, params) + delta_bytes(shape, params, batch, zero_fraction)
}

fn feedback_fetch(shape: &LayerShape, mode: FeedbackMode, p: &CostParams) -> f64 {
    let w = shape.weight_count as f64;
    let full = w * p.bytes_per_value;
    let fixed = if p.feedback_resident { 0.0 } else { full / p.amortization_steps as f64 };
    let signs = (w * p.sign_bits / 8.0).ceil();
    match mode {
        FeedbackMode::Bp => full,
        FeedbackMode::Fa => fixed,
        FeedbackMode::SignSym => signs + fixed,
        FeedbackMode::BinarySign => signs,
    }
}

fn delta_bytes(shape: &LayerShape, p: &CostParams, batch: usize, zero_fraction: f64) -> f64 {
    shape.out_elems as f64 * batch as f64 * p.bytes_per_value * (1.0 - zero_fraction)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseCost {
    pub macs_total: u64,
    pub macs_effective: f64,
    pub dram_bytes: f64,
}

impl PhaseCost {
    fn add(&mut self, o: &PhaseCost) {
        self.macs_total += o.macs_total;
        self.macs_effective += o.macs_effective;
        self.dram_bytes += o.dram_bytes;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub shape: LayerShape,
    pub mode: FeedbackMode,
    pub zero_fraction: f64,
    pub forward: PhaseCost,
    pub backward: PhaseCost,
    pub weight_grad: PhaseCost,
}

impl LayerCost {
    fn new(shape: &LayerShape, mode: FeedbackMode, zero_fraction: f64, p: &CostParams, batch: usize) -> Self {
        let macs = layer_macs(shape, Phase::Forward, batch);
        let b = p.bytes_per_value;
        let n = batch as f64;
        let w = shape.weight_count as f64;
        let keep = 1.0 - zero_fraction;
        let forward = PhaseCost {
            macs_total: macs,
            macs_effective: macs as f64,
            dram_bytes: w * b + n * shape.out_elems as f64 * b,
        };
        let backward = PhaseCost {
            macs_total: layer_macs(shape, Phase::Backward, batch),
            macs_effective: macs as f64 * keep,
            dram_bytes: phase2_traffic(shape, mode, p, batch, zero_fraction),
        };
        let weight_grad = PhaseCost {
            macs_total: layer_macs(shape, Phase::WeightGrad, batch),
            macs_effective: macs as f64 * keep,
            dram_bytes: n * shape.in_elems as f64 * b + delta_bytes(shape, p, batch, zero_fraction) + w * b,
        };
        Self { shape: shape.clone(), mode, zero_fraction, forward, backward, weight_grad }
    }

    pub fn phase(&self, phase: Phase) -> &PhaseCost {
        match phase {
            Phase::Forward => &self.forward,
            Phase::Backward => &self.backward,
            Phase::WeightGrad => &self.weight_grad,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub macs_total: u64,
    pub macs_effective: f64,
    pub dram_bytes: f64,
    pub phase2_bytes: f64,
    /// `e_dram * dram_bytes + e_mac * macs_effective`.
    pub energy: f64,
}

/// Ratios of a mode against the exact-gradient, unpruned baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRatios {
    /// Baseline MACs over effective MACs.
    pub mac_speedup: f64,
    /// Baseline bytes over mode bytes.
    pub traffic_reduction: f64,
    /// Baseline phase-2 bytes over mode phase-2 bytes.
    pub phase2_traffic_reduction: f64,
    /// Mode energy over baseline energy.
    pub energy_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub batch: usize,
    pub params: CostParams,
    pub layers: Vec<LayerCost>,
    pub totals: CostTotals,
}

pub fn energy(params: &CostParams, dram_bytes: f64, macs_effective: f64) -> f64 {
    params.e_dram * dram_bytes + params.e_mac * macs_effective
}

impl CostReport {
    /// Cost of one step. `zero_fractions` maps layer index to the fraction
    /// of its output error that is zeroed; missing layers are unpruned.
    pub fn build(
        shapes: &[LayerShape],
        feedback: &FeedbackConfig,
        params: &CostParams,
        batch: usize,
        zero_fractions: &BTreeMap<usize, f64>,
    ) -> Result<Self> {
        params.validate()?;
        if let Some((l, z)) = zero_fractions.iter().find(|(_, z)| !(0.0..=1.0).contains(*z)) {
            return Err(Error::Contract(format!("zero fraction {z} for layer {l} is outside [0, 1]")));
        }
        let layers: Vec<LayerCost> = shapes
            .iter()
            .map(|s| {
                let z = zero_fractions.get(&s.layer).copied().unwrap_or(0.0);
                LayerCost::new(s, feedback.mode_for(s.layer), z, params, batch)
            })
            .collect();
        let mut all = PhaseCost::default();
        let mut phase2_bytes = 0.0;
        for l in &layers {
            all.add(&l.forward);
            all.add(&l.backward);
            all.add(&l.weight_grad);
            phase2_bytes += l.backward.dram_bytes;
        }
        let totals = CostTotals {
            macs_total: all.macs_total,
            macs_effective: all.macs_effective,
            dram_bytes: all.dram_bytes,
            phase2_bytes,
            energy: energy(params, all.dram_bytes, all.macs_effective),
        };
        Ok(Self { batch, params: *params, layers, totals })
    }

    /// The same network with exact feedback and no pruning.
    pub fn baseline(&self) -> Result<Self> {
        let shapes: Vec<LayerShape> = self.layers.iter().map(|l| l.shape.clone()).collect();
        Self::build(&shapes, &FeedbackConfig::new(FeedbackMode::Bp), &self.params, self.batch, &BTreeMap::new())
    }

    pub fn ratios_against(&self, base: &CostReport) -> CostRatios {
        CostRatios {
            mac_speedup: base.totals.macs_total as f64 / self.totals.macs_effective,
            traffic_reduction: base.totals.dram_bytes / self.totals.dram_bytes,
            phase2_traffic_reduction: base.totals.phase2_bytes / self.totals.phase2_bytes,
            energy_ratio: self.totals.energy / base.totals.energy,
        }
    }

    pub fn ratios(&self) -> Result<CostRatios> {
        Ok(self.ratios_against(&self.baseline()?))
    }
}

/// Rebuilds `cost` with the zero fractions measured in `stats`.
pub fn apply_sparsity(cost: &CostReport, stats: &BTreeMap<usize, PruneStats>) -> Result<CostReport> {
    let shapes: Vec<LayerShape> = cost.layers.iter().map(|l| l.shape.clone()).collect();
    let mut fb = FeedbackConfig::new(FeedbackMode::Bp);
    for l in &cost.layers {
        fb.overrides.insert(l.shape.layer, l.mode);
    }
    let z = stats.iter().map(|(&l, s)| (l, s.realized_zero_fraction)).collect();
    CostReport::build(&shapes, &fb, &cost.params, cost.batch, &z)
}

/// Zero fraction `z` for every weighted layer whose error gets pruned
/// (all but the topmost).
pub fn uniform_zero_fractions(shapes: &[LayerShape], z: f64) -> BTreeMap<usize, f64> {
    let n = shapes.len().saturating_sub(1);
    shapes[..n].iter().map(|s| (s.layer, z)).collect()
}

/// Mode report, baseline report and the ratios between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub mode: CostReport,
    pub baseline: CostReport,
    pub ratios: CostRatios,
}

impl CostSummary {
    pub fn new(mode: CostReport) -> Result<Self> {
        let baseline = mode.baseline()?;
        let ratios = mode.ratios_against(&baseline);
        Ok(Self { mode, baseline, ratios })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prune::expected_zero_fraction;
    use proptest::prelude::*;

    fn fc(m: u64, n: u64) -> LayerShape {
        LayerShape {
            layer: 0,
            kind: "linear".into(),
            weight_count: m * n,
            in_elems: n,
            out_elems: m,
            macs_per_sample: m * n,
        }
    }

    fn cnn() -> Vec<LayerShape> {
        weighted_shapes(&NetworkConfig::small_cnn([1, 28, 28], &[16, 32], 10)).unwrap()
    }

    #[test]
    fn mac_counts() {
        assert_eq!(layer_macs(&fc(10, 100), Phase::Forward, 1), 1000);
        assert_eq!(layer_macs(&fc(10, 100), Phase::Backward, 1), 1000);
        let cfg = NetworkConfig {
            input: vec![1, 6, 6],
            layers: vec![
                LayerSpec::Conv2d { out_channels: 1, kernel: 3, stride: 1, pad: 0, bias: false },
                LayerSpec::Linear { out_features: 2, bias: false },
                LayerSpec::MseOutput {},
            ],
        };
        let s = weighted_shapes(&cfg).unwrap();
        assert_eq!(layer_macs(&s[0], Phase::Forward, 1), 144);
        assert_eq!(cnn().len(), 3);
        assert_eq!(cnn()[0].macs_per_sample, 16 * 28 * 28 * 9);
    }

    #[test]
    fn phase2_fetches() {
        let p = CostParams::default();
        let s = LayerShape { weight_count: 1024, out_elems: 0, ..fc(0, 0) };
        assert_eq!(phase2_traffic(&s, FeedbackMode::Bp, &p, 1, 0.0), 4096.0);
        assert_eq!(phase2_traffic(&s, FeedbackMode::SignSym, &p, 1, 0.0), 128.0);
        let mut q = p;
        q.feedback_resident = false;
        q.amortization_steps = 4;
        assert_eq!(phase2_traffic(&s, FeedbackMode::SignSym, &q, 1, 0.0), 128.0 + 1024.0);
        let empty = LayerShape { weight_count: 0, out_elems: 0, ..fc(0, 0) };
        for m in [FeedbackMode::Bp, FeedbackMode::SignSym, FeedbackMode::Fa, FeedbackMode::BinarySign] {
            assert_eq!(phase2_traffic(&empty, m, &p, 8, 0.0), 0.0);
        }
    }

    #[test]
    fn baseline_ratios_are_exactly_one() {
        let r = CostReport::build(
            &cnn(),
            &FeedbackConfig::new(FeedbackMode::Bp),
            &CostParams::default(),
            64,
            &BTreeMap::new(),
        )
        .unwrap();
        let ratios = r.ratios().unwrap();
        assert_eq!(ratios.mac_speedup, 1.0);
        assert_eq!(ratios.traffic_reduction, 1.0);
        assert_eq!(ratios.phase2_traffic_reduction, 1.0);
        assert_eq!(ratios.energy_ratio, 1.0);
    }

    #[test]
    fn sparsity_scales_backward_phases_only() {
        let shapes = cnn();
        let fb = FeedbackConfig::new(FeedbackMode::SignSym);
        let p = CostParams::default();
        let dense = CostReport::build(&shapes, &fb, &p, 8, &BTreeMap::new()).unwrap();
        for l in &dense.layers {
            for ph in [Phase::Forward, Phase::Backward, Phase::WeightGrad] {
                assert_eq!(l.phase(ph).macs_effective, l.phase(ph).macs_total as f64);
            }
        }
        let mut stats = BTreeMap::new();
        stats.insert(0, PruneStats { realized_zero_fraction: 0.75, ..Default::default() });
        let sparse = apply_sparsity(&dense, &stats).unwrap();
        let (a, b) = (&dense.layers[0], &sparse.layers[0]);
        assert_eq!(b.backward.macs_effective, a.backward.macs_effective / 4.0);
        assert_eq!(b.weight_grad.macs_effective, a.weight_grad.macs_effective / 4.0);
        assert_eq!(b.forward, a.forward);
        assert_eq!(sparse.layers[1], dense.layers[1]);
    }

    #[test]
    fn signsym_phase2_below_bp_for_every_layer() {
        let shapes = cnn();
        let p = CostParams::default();
        let bp = CostReport::build(&shapes, &FeedbackConfig::new(FeedbackMode::Bp), &p, 16, &BTreeMap::new()).unwrap();
        let ss =
            CostReport::build(&shapes, &FeedbackConfig::new(FeedbackMode::SignSym), &p, 16, &BTreeMap::new()).unwrap();
        for (a, b) in ss.layers.iter().zip(&bp.layers) {
            assert!(a.backward.dram_bytes < b.backward.dram_bytes);
        }
        let r = ss.ratios().unwrap();
        assert_eq!(r.mac_speedup, 1.0);
        assert!(r.traffic_reduction > 1.0);
    }

    #[test]
    fn mac_ratio_grows_with_rate() {
        let shapes = cnn();
        let fb = FeedbackConfig::new(FeedbackMode::SignSym);
        let p = CostParams::default();
        let mut last = 0.0;
        for rate in [0.0, 0.5, 0.7, 0.9] {
            let z = uniform_zero_fractions(&shapes, expected_zero_fraction(rate));
            let r = CostReport::build(&shapes, &fb, &p, 32, &z).unwrap().ratios().unwrap();
            assert!(r.mac_speedup >= last);
            last = r.mac_speedup;
        }
    }

    #[test]
    fn json_round_trip() {
        let r = CostReport::build(
            &cnn(),
            &FeedbackConfig::new(FeedbackMode::SignSym),
            &CostParams::default(),
            4,
            &BTreeMap::new(),
        )
        .unwrap();
        let s = CostSummary::new(r).unwrap();
        let back: CostSummary = serde_json::from_str(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn energy_is_linear(b1 in 0.0f64..1e9, b2 in 0.0f64..1e9, m1 in 0.0f64..1e9, m2 in 0.0f64..1e9, ed in 0.01f64..10.0, em in 0.01f64..10.0) {
            let p = CostParams { e_dram: ed, e_mac: em, ..CostParams::default() };
            let lhs = energy(&p, b1 + b2, m1 + m2);
            let rhs = energy(&p, b1, m1) + energy(&p, b2, m2);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
        }

        #[test]
        fn effective_never_exceeds_total(z in 0.0f64..=1.0, batch in 1usize..64) {
            let shapes = cnn();
            let zf = uniform_zero_fractions(&shapes, z);
            let r = CostReport::build(&shapes, &FeedbackConfig::new(FeedbackMode::SignSym), &CostParams::default(), batch, &zf).unwrap();
            for l in &r.layers {
                for ph in [Phase::Forward, Phase::Backward, Phase::WeightGrad] {
                    prop_assert!(l.phase(ph).macs_effective <= l.phase(ph).macs_total as f64);
                }
            }
        }
    }
}
