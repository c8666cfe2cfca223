//! Modulatory matrices for the error pass.
//!
//! Every weighted layer gets a fixed random matrix `B` at init, drawn from
//! the same distribution as the forward weights. The feedback mode decides
//! what carries the error downward through that layer:
//!
//! | mode         | matrix                        |
//! |--------------|-------------------------------|
//! | `bp`         | `W` (exact gradient)          |
//! | `fa`         | signed `B`                    |
//! | `signsym`    | `sign(W) * abs(B)`            |
//! | `binarysign` | `sign(W) * scale`             |
//!
//! `sign(0)` is `0`, so a zero weight closes its feedback path.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{kaiming_bound, Network};
use crate::rng::{self, Domain};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FeedbackMode {
    #[serde(rename = "bp")]
    Bp,
    #[serde(rename = "fa")]
    Fa,
    #[serde(rename = "signsym")]
    SignSym,
    #[serde(rename = "binarysign")]
    BinarySign,
}

impl FeedbackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackMode::Bp => "bp",
            FeedbackMode::Fa => "fa",
            FeedbackMode::SignSym => "signsym",
            FeedbackMode::BinarySign => "binarysign",
        }
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bp" => Ok(FeedbackMode::Bp),
            "fa" => Ok(FeedbackMode::Fa),
            "signsym" => Ok(FeedbackMode::SignSym),
            "binarysign" => Ok(FeedbackMode::BinarySign),
            other => Err(Error::Config(format!("unknown feedback mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackConfig {
    pub mode: FeedbackMode,
    /// Per-layer mode overrides keyed by layer index (weighted layers only).
    #[serde(default)]
    pub overrides: BTreeMap<usize, FeedbackMode>,
    /// Use the signs of the initial weights instead of the current ones.
    #[serde(default)]
    pub freeze_signs: bool,
}

impl FeedbackConfig {
    pub fn new(mode: FeedbackMode) -> Self {
        Self { mode, overrides: BTreeMap::new(), freeze_signs: false }
    }

    pub fn mode_for(&self, layer: usize) -> FeedbackMode {
        self.overrides.get(&layer).copied().unwrap_or(self.mode)
    }

    /// True when every layer runs exact back propagation.
    pub fn is_pure_bp(&self) -> bool {
        self.mode == FeedbackMode::Bp && self.overrides.values().all(|&m| m == FeedbackMode::Bp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeedback<T> {
    pub mode: FeedbackMode,
    /// Signed random matrix, used as-is in `fa` mode.
    pub signed: Tensor<T>,
    /// `abs(signed)`; the magnitudes used by `signsym`.
    pub magnitude: Tensor<T>,
    /// Mean of `magnitude`; the constant used by `binarysign`.
    pub binary_scale: f64,
    /// Signs of the weights at init, kept when `freeze_signs` is set.
    pub frozen_signs: Option<Tensor<T>>,
}

/// Per-layer fixed feedback, immutable after [`FeedbackState::init`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackState<T> {
    pub config: FeedbackConfig,
    pub seed: u64,
    layers: BTreeMap<usize, LayerFeedback<T>>,
}

fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

impl<T: Scalar> FeedbackState<T> {
    /// Draws `B` for every weighted layer of `net`. The draw depends only on
    /// `seed` and the layer shapes, never on the network's weights or on the
    /// mode.
    pub fn init(net: &Network<T>, config: &FeedbackConfig, seed: u64) -> Result<Self> {
        let weighted = net.weighted_layers();
        if let Some(bad) = config.overrides.keys().find(|i| !weighted.contains(i)) {
            return Err(Error::Config(format!(
                "feedback override for layer {bad}, which has no weights (weighted layers: {weighted:?})"
            )));
        }
        let mut rng = rng::stream(seed, Domain::Feedback);
        let mut layers = BTreeMap::new();
        for &i in &weighted {
            let layer = &net.layers[i];
            let w = layer.weight().expect("weighted layer");
            let bound = kaiming_bound(layer.fan_in());
            let signed: Vec<T> = (0..w.len()).map(|_| T::lit((2.0 * rng.random::<f64>() - 1.0) * bound)).collect();
            let signed = Tensor::from_vec(w.shape(), signed)?;
            let magnitude = signed.map(|v| v.abs());
            let binary_scale = magnitude.mean();
            let frozen_signs = config.freeze_signs.then(|| w.map(sign));
            layers.insert(i, LayerFeedback { mode: config.mode_for(i), signed, magnitude, binary_scale, frozen_signs });
        }
        Ok(Self { config: config.clone(), seed, layers })
    }

    pub fn layer(&self, index: usize) -> Option<&LayerFeedback<T>> {
        self.layers.get(&index)
    }

    pub fn mode_for(&self, index: usize) -> FeedbackMode {
        self.config.mode_for(index)
    }

    /// The matrix that replaces the forward weights of layer `index` in the
    /// error pass, given the layer's current weights.
    pub fn modulatory_matrix<'a>(&'a self, index: usize, w_current: &'a Tensor<T>) -> Result<Cow<'a, Tensor<T>>> {
        let fb = self
            .layers
            .get(&index)
            .ok_or_else(|| Error::Contract(format!("layer {index} has no weights, so no feedback matrix")))?;
        if fb.signed.shape() != w_current.shape() {
            return Err(Error::dim(
                "weights",
                format!("feedback {:?} vs weights {:?}", fb.signed.shape(), w_current.shape()),
            ));
        }
        let signs = |w: &Tensor<T>| -> Tensor<T> {
            match &fb.frozen_signs {
                Some(s) => s.clone(),
                None => w.map(sign),
            }
        };
        Ok(match fb.mode {
            FeedbackMode::Bp => Cow::Borrowed(w_current),
            FeedbackMode::Fa => Cow::Borrowed(&fb.signed),
            FeedbackMode::SignSym => Cow::Owned(signs(w_current).mul(&fb.magnitude)?),
            FeedbackMode::BinarySign => {
                let scale = T::lit(fb.binary_scale);
                Cow::Owned(signs(w_current).scale(scale))
            }
        })
    }

    /// Hash of every feedback tensor's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = rng::mix64(self.seed);
        for (i, fb) in &self.layers {
            h = rng::mix64(h ^ *i as u64);
            for v in fb.signed.data().iter().chain(fb.magnitude.data()) {
                h = rng::mix64(h ^ v.as_f64().to_bits());
            }
        }
        h
    }
}

/// Angle in degrees between two flattened error tensors, clamped to
/// `[0, 180]`. Undefined (an error, not zero) when either has zero norm.
pub fn angle_to_bp<T: Scalar>(delta: &Tensor<T>, delta_bp: &Tensor<T>) -> Result<f64> {
    if delta.shape() != delta_bp.shape() {
        return Err(Error::dim("angle", format!("{:?} vs {:?}", delta.shape(), delta_bp.shape())));
    }
    let na = delta.norm();
    let nb = delta_bp.norm();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::UndefinedAngle("zero-norm error signal"));
    }
    // 2*atan2(|a-b|, |a+b|) on unit vectors; exact at 0 and 180, unlike acos.
    let (mut diff, mut sum) = (0.0f64, 0.0f64);
    for (x, y) in delta.data().iter().zip(delta_bp.data()) {
        let (u, v) = (x.as_f64() / na, y.as_f64() / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    Ok((2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees().clamp(0.0, 180.0))
}
