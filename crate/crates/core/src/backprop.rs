//! The error pass: from the loss error down to the first layer.
//!
//! One routine serves training (feedback matrices plus pruning) and the
//! exact-gradient shadow pass used by diagnostics and gradient checks.

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::Result;
use crate::feedback::FeedbackState;
use crate::network::{ForwardTrace, Network};
use crate::prune::{PruneStats, Pruner};
use crate::tensor::{Scalar, Tensor};

/// Supplies the matrix that carries the error down through a weighted layer.
pub trait Modulator<T: Clone> {
    fn matrix<'a>(&'a self, layer: usize, w: &'a Tensor<T>) -> Result<Cow<'a, Tensor<T>>>;
}

/// Exact back propagation: every layer uses its own forward weights.
#[derive(Clone, Copy, Debug, Default)]
pub struct ExactTranspose;

impl<T: Scalar> Modulator<T> for ExactTranspose {
    fn matrix<'a>(&'a self, _layer: usize, w: &'a Tensor<T>) -> Result<Cow<'a, Tensor<T>>> {
        Ok(Cow::Borrowed(w))
    }
}

impl<T: Scalar> Modulator<T> for FeedbackState<T> {
    fn matrix<'a>(&'a self, layer: usize, w: &'a Tensor<T>) -> Result<Cow<'a, Tensor<T>>> {
        self.modulatory_matrix(layer, w)
    }
}

#[derive(Clone, Debug)]
pub struct BackwardPass<T> {
    /// `deltas[i]` is the error at the output of layer `i` as it was passed
    /// on (after pruning where pruning applies). Length = loss index.
    pub deltas: Vec<Tensor<T>>,
    /// Pre-pruning error for the layers that were pruned.
    pub raw: BTreeMap<usize, Tensor<T>>,
    /// Batch-norm `[d_gamma, d_beta]`, produced during the error pass.
    pub bn_grads: BTreeMap<usize, Vec<Tensor<T>>>,
    pub prune_stats: BTreeMap<usize, PruneStats>,
}

impl<T: Scalar> BackwardPass<T> {
    /// The error a weight-gradient computation for `layer` must consume.
    pub fn delta(&self, layer: usize) -> Option<&Tensor<T>> {
        self.deltas.get(layer)
    }
}

/// Pruning hook for [`backward`]: the pruner plus the global step number.
pub struct PruneHook<'a> {
    pub pruner: &'a mut Pruner,
    pub step: u64,
}

/// Runs the error pass for `trace`.
///
/// The error at the output of every weighted layer except the topmost one
/// is pruned when `prune` is given and enabled; the topmost one receives the
/// loss error directly and is never pruned. The pruned tensor is what
/// continues downward.
pub fn backward<T: Scalar, M: Modulator<T> + ?Sized>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    modulator: &M,
    mut prune: Option<PruneHook<'_>>,
) -> Result<BackwardPass<T>> {
    let top = net.loss_index();
    let top_weighted = net.weighted_layers().last().copied();
    let mut deltas: Vec<Option<Tensor<T>>> = vec![None; top];
    let mut raw = BTreeMap::new();
    let mut bn_grads = BTreeMap::new();
    let mut prune_stats = BTreeMap::new();

    let mut current = net.loss_error(trace)?;
    for i in (0..top).rev() {
        let layer = &net.layers[i];
        let weighted = layer.spec.is_weighted();
        if weighted && Some(i) != top_weighted {
            if let Some(hook) = prune.as_mut().filter(|h| h.pruner.is_enabled()) {
                let (pruned, stats) = hook.pruner.prune(i, hook.step, &current)?;
                prune_stats.insert(i, stats);
                raw.insert(i, std::mem::replace(&mut current, pruned));
            }
        }
        let needs_pass = i > 0 || (layer.spec.is_trainable() && !weighted);
        let next = if needs_pass {
            let m = match layer.weight() {
                Some(w) if weighted => Some(modulator.matrix(i, w)?),
                _ => None,
            };
            let out = net.backward_error(i, &current, trace, m.as_deref())?;
            if !out.param_grads.is_empty() {
                bn_grads.insert(i, out.param_grads);
            }
            Some(out.delta)
        } else {
            None
        };
        deltas[i] = Some(current);
        match next {
            Some(d) => current = d,
            None => break,
        }
    }
    Ok(BackwardPass {
        deltas: deltas.into_iter().map(|d| d.expect("every layer visited")).collect(),
        raw,
        bn_grads,
        prune_stats,
    })
}

/// Full parameter gradient for every layer, in `sgd_step` layout: weight
/// and bias gradients for weighted layers, BN gradients for BN layers and
/// nothing for the rest.
pub fn parameter_grads<T: Scalar>(
    net: &Network<T>,
    trace: &ForwardTrace<T>,
    pass: &BackwardPass<T>,
) -> Result<Vec<Vec<Tensor<T>>>> {
    let mut grads = Vec::with_capacity(net.layers.len());
    for (i, layer) in net.layers.iter().enumerate() {
        let g = if layer.spec.is_weighted() {
            net.weight_grad(i, &pass.deltas[i], trace)?
        } else if let Some(bn) = pass.bn_grads.get(&i) {
            bn.clone()
        } else {
            Vec::new()
        };
        grads.push(g);
    }
    Ok(grads)
}
