//! Stochastic error-gradient pruning.
//!
//! Given a threshold `tau` and one uniform `r` per element:
//!
//! ```text
//! |d| >  tau          -> d
//! tau >= |d| >= r*tau -> tau * sign(d)
//! otherwise           -> 0
//! ```
//!
//! Inside the band the output is `±tau` with probability `|d|/tau`, so
//! `E[out] = d` for every element. The threshold comes from a target rate
//! `P`: for Gaussian errors with std `sigma`, a fraction `P` lies within
//! `±tau` when `tau = Q((1+P)/2) * sigma`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::rng::{CounterRng, UniformSource};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SigmaSource {
    /// Population std of the layer's whole error tensor for this batch.
    #[default]
    PerTensorBatch,
    /// Exponential moving average of the per-batch std, seeded by the first
    /// batch: `s <- decay * s + (1 - decay) * sigma`.
    RunningEma { decay: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub enabled: bool,
    /// Target fraction of errors inside the prune band, in `[0, 1)`.
    pub rate: f64,
    #[serde(default)]
    pub sigma_source: SigmaSource,
    /// Mixed into the run seed for the per-element draws.
    #[serde(default)]
    pub seed: u64,
}

impl PruneConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, rate: 0.0, sigma_source: SigmaSource::PerTensorBatch, seed: 0 }
    }

    pub fn with_rate(rate: f64) -> Self {
        Self { enabled: true, rate, ..Self::disabled() }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)?;
        if let SigmaSource::RunningEma { decay } = self.sigma_source {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::Config(format!("EMA decay must be in [0, 1), got {decay}")));
            }
        }
        Ok(())
    }
}

/// Counters for one pruned tensor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneStats {
    pub tau: f64,
    pub n_total: u64,
    pub n_passed: u64,
    pub n_clamped: u64,
    pub n_zeroed: u64,
    pub realized_zero_fraction: f64,
}

impl PruneStats {
    fn from_counts(tau: f64, n_passed: u64, n_clamped: u64, n_zeroed: u64) -> Self {
        let n_total = n_passed + n_clamped + n_zeroed;
        Self {
            tau,
            n_total,
            n_passed,
            n_clamped,
            n_zeroed,
            realized_zero_fraction: if n_total == 0 { 0.0 } else { n_zeroed as f64 / n_total as f64 },
        }
    }

    /// Pools counters; `tau` becomes the element-weighted mean threshold.
    pub fn merge(&self, other: &PruneStats) -> PruneStats {
        let n = self.n_total + other.n_total;
        let tau =
            if n == 0 { 0.0 } else { (self.tau * self.n_total as f64 + other.tau * other.n_total as f64) / n as f64 };
        PruneStats::from_counts(
            tau,
            self.n_passed + other.n_passed,
            self.n_clamped + other.n_clamped,
            self.n_zeroed + other.n_zeroed,
        )
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("pruning rate must be in [0, 1), got {p}")));
    }
    Ok(())
}

/// `tau = Q((1+P)/2) * sigma`.
pub fn compute_threshold(p: f64, sigma: f64) -> Result<f64> {
    check_rate(p)?;
    if sigma.is_nan() || sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Contract(format!("error std must be finite and non-negative, got {sigma}")));
    }
    Ok(normal::quantile((1.0 + p) / 2.0) * sigma)
}

const CHUNK: usize = 1 << 14;

/// Applies the three-case rule elementwise. Element `i` uses `rng.uniform(i)`.
pub fn stochastic_prune<T: Scalar, R: UniformSource + Sync + ?Sized>(
    delta: &Tensor<T>,
    tau: f64,
    rng: &R,
) -> Result<(Tensor<T>, PruneStats)> {
    if tau.is_nan() || tau < 0.0 {
        return Err(Error::Contract(format!("prune threshold must be non-negative, got {tau}")));
    }
    let mut out = delta.data().to_vec();
    let t = T::lit(tau);
    let counts = out
        .par_chunks_mut(CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let base = c * CHUNK;
            let (mut passed, mut clamped, mut zeroed) = (0u64, 0u64, 0u64);
            for (j, v) in chunk.iter_mut().enumerate() {
                let a = v.abs();
                if a > t || tau == 0.0 {
                    passed += 1;
                } else if a >= T::lit(rng.uniform(base + j)) * t {
                    *v = if *v < T::zero() { -t } else { t };
                    clamped += 1;
                } else {
                    *v = T::zero();
                    zeroed += 1;
                }
            }
            (passed, clamped, zeroed)
        })
        .collect::<Vec<_>>();
    let (p, c, z) = counts.into_iter().fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));
    Ok((Tensor::from_vec(delta.shape(), out)?, PruneStats::from_counts(tau, p, c, z)))
}

/// Expected fraction zeroed by the rule on standard normal errors at rate `P`:
/// `Z(P) = ∫_{|x|<=tau} phi(x) (1 - |x|/tau) dx`, `tau = Q((1+P)/2)`.
pub fn expected_zero_fraction(p: f64) -> f64 {
    if p.is_nan() || p <= 0.0 {
        return 0.0;
    }
    let tau = normal::quantile((1.0 + p) / 2.0);
    if !tau.is_finite() {
        return f64::NAN;
    }
    let f = |x: f64| 2.0 * normal::pdf(x) * (1.0 - x / tau);
    adaptive_simpson(&f, 0.0, tau, 1e-12, 50)
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_step(f, a, b, fa, fm, fb, whole, eps, depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson_step(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * eps {
        return left + right + diff / 15.0;
    }
    simpson_step(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
        + simpson_step(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
}

/// Per-run pruning state: the config plus any running std estimates.
#[derive(Clone, Debug)]
pub struct Pruner {
    pub config: PruneConfig,
    run_seed: u64,
    ema: BTreeMap<usize, f64>,
}

impl Pruner {
    pub fn new(config: PruneConfig, run_seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, run_seed, ema: BTreeMap::new() })
    }

    pub fn is_enabled(&self) -> bool {
        self.config.enabled
    }

    fn sigma(&mut self, layer: usize, batch_sigma: f64) -> f64 {
        match self.config.sigma_source {
            SigmaSource::PerTensorBatch => batch_sigma,
            SigmaSource::RunningEma { decay } => {
                let s = self
                    .ema
                    .entry(layer)
                    .and_modify(|s| *s = decay * *s + (1.0 - decay) * batch_sigma)
                    .or_insert(batch_sigma);
                *s
            }
        }
    }

    /// Prunes the error at the output of `layer` for global step `step`.
    pub fn prune<T: Scalar>(&mut self, layer: usize, step: u64, delta: &Tensor<T>) -> Result<(Tensor<T>, PruneStats)> {
        let sigma = self.sigma(layer, delta.std());
        let tau = compute_threshold(self.config.rate, sigma)?;
        let rng = CounterRng::new(self.run_seed ^ self.config.seed, layer, step);
        stochastic_prune(delta, tau, &rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::ConstUniform;
    use proptest::prelude::*;

    fn one(d: f64, tau: f64, r: f64) -> f64 {
        let t = Tensor::<f64>::from_f64(&[1], &[d]).unwrap();
        stochastic_prune(&t, tau, &ConstUniform(r)).unwrap().0.data()[0]
    }

    #[test]
    fn three_cases() {
        for r in [0.0, 0.5, 0.999] {
            assert_eq!(one(0.5, 0.2, r), 0.5);
        }
        assert_eq!(one(0.1, 0.2, 0.4), 0.2);
        assert_eq!(one(0.1, 0.2, 0.9), 0.0);
        assert_eq!(one(-0.1, 0.2, 0.4), -0.2);
        assert_eq!(one(0.2, 0.2, 0.999), 0.2);
    }

    #[test]
    fn zero_threshold_is_identity() {
        let t = Tensor::<f64>::from_f64(&[4], &[0.0, 1.0, -2.0, 0.0]).unwrap();
        let (out, s) = stochastic_prune(&t, 0.0, &ConstUniform(0.5)).unwrap();
        assert_eq!(out, t);
        assert_eq!((s.n_passed, s.n_clamped, s.n_zeroed), (4, 0, 0));
    }

    #[test]
    fn negative_threshold_rejected() {
        let t = Tensor::<f64>::zeros(&[2]);
        assert!(matches!(stochastic_prune(&t, -0.1, &ConstUniform(0.5)), Err(Error::Contract(_))));
    }

    #[test]
    fn thresholds() {
        assert_eq!(compute_threshold(0.0, 5.0).unwrap(), 0.0);
        assert!((compute_threshold(0.6827, 1.0).unwrap() - 1.0).abs() < 1e-3);
        assert!((compute_threshold(0.95, 2.0).unwrap() - 3.919_927_969).abs() < 1e-6);
        assert!(matches!(compute_threshold(1.0, 1.0), Err(Error::Config(_))));
        assert!(matches!(compute_threshold(-0.1, 1.0), Err(Error::Config(_))));
    }

    /// `P - (2/tau)(phi(0) - phi(tau))`, from integrating `x phi(x)` by hand.
    fn closed_form(p: f64) -> f64 {
        let tau = normal::quantile((1.0 + p) / 2.0);
        p - 2.0 / tau * (normal::pdf(0.0) - normal::pdf(tau))
    }

    #[test]
    fn zero_fraction_quadrature() {
        assert_eq!(expected_zero_fraction(0.0), 0.0);
        for p in [0.1, 0.5, 0.7, 0.9, 0.99] {
            assert!((expected_zero_fraction(p) - closed_form(p)).abs() < 1e-9, "P={p}");
        }
        assert!(expected_zero_fraction(0.5) < expected_zero_fraction(0.9));
    }

    #[test]
    fn zero_fraction_monte_carlo() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = Tensor::from_vec(&[n], data).unwrap();
        let tau = compute_threshold(0.9, 1.0).unwrap();
        let (_, s) = stochastic_prune(&t, tau, &CounterRng::new(1, 0, 0)).unwrap();
        assert!((s.realized_zero_fraction - expected_zero_fraction(0.9)).abs() < 0.005);
    }

    #[test]
    fn ema_tracks_batches() {
        let mut cfg = PruneConfig::with_rate(0.5);
        cfg.sigma_source = SigmaSource::RunningEma { decay: 0.5 };
        let mut p = Pruner::new(cfg, 0).unwrap();
        assert_eq!(p.sigma(3, 2.0), 2.0);
        assert_eq!(p.sigma(3, 4.0), 3.0);
        assert_eq!(p.sigma(4, 1.0), 1.0);
    }

    #[test]
    fn stats_merge() {
        let a = PruneStats::from_counts(1.0, 1, 1, 2);
        let b = PruneStats::from_counts(3.0, 0, 0, 4);
        let m = a.merge(&b);
        assert_eq!((m.n_total, m.n_zeroed), (8, 6));
        assert_eq!(m.tau, 2.0);
        assert_eq!(m.realized_zero_fraction, 0.75);
    }

    proptest! {
        #[test]
        fn outputs_and_counts(vals in prop::collection::vec(-3.0f64..3.0, 1..200), tau in 0.0f64..2.0, seed: u64) {
            let t = Tensor::<f64>::from_f64(&[vals.len()], &vals).unwrap();
            let (out, s) = stochastic_prune(&t, tau, &CounterRng::new(seed, 0, 0)).unwrap();
            prop_assert_eq!(s.n_passed + s.n_clamped + s.n_zeroed, s.n_total);
            prop_assert_eq!(s.n_total as usize, vals.len());
            prop_assert_eq!(s.realized_zero_fraction, s.n_zeroed as f64 / s.n_total as f64);
            for (&d, &o) in vals.iter().zip(out.data()) {
                if d.abs() > tau {
                    prop_assert_eq!(o.to_bits(), d.to_bits());
                } else {
                    prop_assert!(o == 0.0 || o == tau * d.signum() || o == d);
                }
            }
        }

        #[test]
        fn order_independent(vals in prop::collection::vec(-1.0f64..1.0, 2..100), seed: u64) {
            let rng = CounterRng::new(seed, 1, 2);
            let t = Tensor::<f64>::from_f64(&[vals.len()], &vals).unwrap();
            let (out, _) = stochastic_prune(&t, 0.5, &rng).unwrap();
            // Element i's fate depends only on (d_i, r_i).
            for (i, &d) in vals.iter().enumerate() {
                let single = Tensor::<f64>::from_f64(&[1], &[d]).unwrap();
                let (o, _) = stochastic_prune(&single, 0.5, &ConstUniform(rng.uniform(i))).unwrap();
                prop_assert_eq!(o.data()[0], out.data()[i]);
            }
        }

        #[test]
        fn threshold_scales_with_sigma(p in 0.0f64..0.99, sigma in 0.0f64..10.0) {
            let t1 = compute_threshold(p, 1.0).unwrap();
            let ts = compute_threshold(p, sigma).unwrap();
            prop_assert!((ts - t1 * sigma).abs() <= 1e-12 * (1.0 + ts.abs()));
            prop_assert!(ts >= 0.0);
        }
    }
}
