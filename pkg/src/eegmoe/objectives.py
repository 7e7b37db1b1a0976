"""Pretraining and fine-tuning losses.

The pretraining stack combines time-domain MSE with a phase-blind spectral
magnitude penalty, applied to the two full-resolution reconstructions plus
two intermediate decoder outputs compared against linearly downsampled
targets. Fine-tuning uses weighted cross-entropy (classification) or RMSE
(regression).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .signal import StftConfig, stft_magnitude


@dataclass(frozen=True)
class LossWeights:
    w_spec: float = 0.02
    alpha1: float = 0.2
    alpha2: float = 0.3

    def __post_init__(self):
        if min(self.w_spec, self.alpha1, self.alpha2) < 0:
            raise ValueError("loss weights must be non-negative")


def _match(target, pred: T.DiffTensor) -> T.DiffTensor:
    """Target as a constant of the prediction's dtype."""
    target = T.as_tensor(target)
    if target.dtype != pred.dtype and not target.requires_grad:
        target = T.constant(target.values.astype(pred.dtype))
    return target


def mse_loss(pred: T.DiffTensor, target) -> T.DiffTensor:
    target = _match(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return T.reduce_mean(T.square(T.sub(pred, target)))


def spectral_loss(pred: T.DiffTensor, target,
                  cfg: StftConfig = StftConfig()) -> T.DiffTensor:
    """Mean squared difference of STFT magnitudes, averaged over all cells.

    Magnitudes are phase-blind, so a global sign flip of either argument
    leaves the loss unchanged.
    """
    target = _match(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    mp = stft_magnitude(pred, cfg)
    mt = stft_magnitude(target.detach() if target.requires_grad else target, cfg)
    return T.reduce_mean(T.square(T.sub(mp, mt)))


def base_loss(pred: T.DiffTensor, target, weights: LossWeights = LossWeights(),
              cfg: StftConfig = StftConfig()) -> T.DiffTensor:
    """Time-domain MSE plus the weighted spectral magnitude penalty."""
    out = mse_loss(pred, target)
    if weights.w_spec > 0.0:
        out = T.add(out, T.mul(spectral_loss(pred, target, cfg),
                               T.constant(np.float64(weights.w_spec))))
    return out


def total_loss(out, x, weights: LossWeights = LossWeights(),
               cfg: StftConfig = StftConfig()) -> T.DiffTensor:
    """Full reconstruction objective over a backbone output bundle.

    ``out`` carries final_short / final_long at input resolution and
    interm1 / interm2 at coarser decoder resolutions; the target is
    linearly resampled to match the intermediates.
    """
    x = _match(x, out.final_short)
    if out.final_short.shape != x.shape or out.final_long.shape != x.shape:
        raise ValueError("final reconstruction lengths must match the target")
    down1 = T.linear_resample(x, out.interm1.shape[-1])
    down2 = T.linear_resample(x, out.interm2.shape[-1])
    loss = T.add(base_loss(out.final_short, x, weights, cfg),
                 base_loss(out.final_long, x, weights, cfg))
    loss = T.add(loss, T.mul(base_loss(out.interm1, down1, weights, cfg),
                             T.constant(np.float64(weights.alpha1))))
    loss = T.add(loss, T.mul(base_loss(out.interm2, down2, weights, cfg),
                             T.constant(np.float64(weights.alpha2))))
    return loss


def weighted_cross_entropy(logits: T.DiffTensor, labels,
                           class_weights=None) -> T.DiffTensor:
    """Per-sample weighted NLL, normalized by the batch's mean weight.

    logits: (N, num_classes); labels: (N,) ints. Uniform weights reduce this
    to plain cross-entropy.
    """
    labels = np.asarray(labels, dtype=int)
    n, k = logits.shape
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels out of range for {k} classes")
    if class_weights is None:
        class_weights = np.ones(k)
    class_weights = np.asarray(class_weights, dtype=np.float64)
    if np.any(class_weights <= 0):
        raise ValueError("class weights must be positive")
    w = class_weights[labels]                       # (N,)
    # stable log-softmax; the max shift is a constant w.r.t. the gradient
    shift = T.constant(logits.values.max(axis=1, keepdims=True))
    z = T.sub(logits, shift)
    lse = T.log(T.reduce_sum(T.exp(z), axes=1, keepdims=True))
    logp = T.sub(z, lse)
    sel = np.zeros((n, k), dtype=logits.dtype)
    sel[np.arange(n), labels] = w
    nll = T.neg(T.reduce_sum(T.mul(logp, T.constant(sel))))
    return T.div(nll, T.constant(np.asarray(w.sum(), dtype=logits.dtype)))


def rmse_loss(pred: T.DiffTensor, target) -> T.DiffTensor:
    target = _match(target, pred)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    return T.sqrt(T.reduce_mean(T.square(T.sub(pred, target))))
