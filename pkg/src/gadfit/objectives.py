"""Differentiable training objectives and the Adam optimizer.

Three objectives over the extractor's tapped levels:

* ``mahalanobis_loss`` -- mean over images and levels of an aggregated
  per-level distance map against fixed Gaussians (max or mean
  aggregation); distribution parameters receive no gradient;
* ``svdd_loss``        -- distance of pooled per-level embeddings to a
  fixed center, plus Frobenius weight decay on the conv kernels;
* ``hsc_loss``         -- hypersphere classifier on labeled batches,
  optionally applied per spatial position.

All three are non-negative scalars; levels enter with equal weight.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gaussian as G
from . import tensor as T
from .errors import ParameterError, StateError

_HSC_LOG_FLOOR = 1e-12


@dataclass
class SvddParams:
    """Per-level hypersphere centers with weight decay settings.

    Centers are the arithmetic mean of globally average-pooled frozen
    features and stay fixed during training.
    """

    centers: dict  # level index -> [C] float64
    weight_decay: float = 1e-4
    norm: str = "l2"

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ParameterError("weight decay must be >= 0")
        if self.norm not in ("l1", "l2"):
            raise ParameterError(f"norm must be 'l1' or 'l2', got {self.norm!r}")


def init_svdd_params(model, images, weight_decay: float = 1e-4, norm: str = "l2") -> SvddParams:
    """Centers from the frozen model's pooled features over normal images."""
    feats = model.forward_levels(images)
    centers = {lf.level: lf.data.mean(axis=(0, 2, 3), dtype=np.float64) for lf in feats}
    return SvddParams(centers=centers, weight_decay=weight_decay, norm=norm)


def init_hsc_centers(model, images) -> dict:
    """Per-level per-channel means of frozen features, used to center HSC embeddings."""
    feats = model.forward_levels(images)
    return {lf.level: lf.data.mean(axis=(0, 2, 3), dtype=np.float64) for lf in feats}


def _mean_over(levels_losses) -> T.Tensor:
    total = levels_losses[0]
    for item in levels_losses[1:]:
        total = T.add(total, item)
    return T.scale(total, 1.0 / len(levels_losses))


def mahalanobis_loss(model, gaussians: G.GaussianModel, images, aggregation: str = "max") -> T.Tensor:
    """Mean aggregated Mahalanobis distance of a normal batch."""
    if aggregation not in ("max", "mean"):
        raise ParameterError(f"aggregation must be 'max' or 'mean', got {aggregation!r}")
    if not gaussians.levels:
        raise StateError("Gaussian model has no fitted levels")
    agg = T.reduce_max_spatial if aggregation == "max" else T.spatial_mean
    feats = model.forward_levels(images)
    per_level = []
    for lf in feats:
        maps = G.mahalanobis_batch(lf.tensor, gaussians.level(lf.level))
        per_level.append(T.reduce_mean(agg(maps)))
    return _mean_over(per_level)


def svdd_loss(model, params: SvddParams, images) -> T.Tensor:
    """Hypersphere compactness of pooled features plus weight decay."""
    feats = model.forward_levels(images)
    per_level = []
    for lf in feats:
        pooled = T.spatial_mean(lf.tensor)  # [N, C]
        centered = T.add_const(pooled, -params.centers[lf.level].astype(np.float32))
        if params.norm == "l2":
            dist = T.sqrt(T.reduce_sum(T.mul(centered, centered), axis=1))
        else:
            dist = T.reduce_sum(T.absolute(centered), axis=1)
        per_level.append(T.reduce_mean(dist))
    loss = _mean_over(per_level)
    if params.weight_decay > 0:
        reg = None
        for lv in model.levels:
            sq = T.reduce_sum(T.mul(lv.w, lv.w))
            reg = sq if reg is None else T.add(reg, sq)
        loss = T.add(loss, T.scale(reg, 0.5 * params.weight_decay))
    return loss


def hsc_loss(model, batch, centers: dict, spatial: bool = True) -> T.Tensor:
    """Hypersphere classifier loss on a labeled batch.

    ``batch.labels`` follow the 1 = normal / 0 = anomalous convention.
    The anomalous log term is clamped so its argument never drops below
    1e-12, keeping the loss finite as the embedding norm approaches 0.
    """
    labels = np.asarray(batch.labels, dtype=np.float32)
    feats = model.forward_levels(batch.images)
    per_level = []
    for lf in feats:
        center = centers[lf.level].astype(np.float32)
        if spatial:
            centered = T.add_const(lf.tensor, -center[None, :, None, None])
            sq_norm = T.reduce_sum(T.mul(centered, centered), axis=1)  # [N, H, W]
            y = labels[:, None, None]
        else:
            pooled = T.spatial_mean(lf.tensor)
            centered = T.add_const(pooled, -center)
            sq_norm = T.reduce_sum(T.mul(centered, centered), axis=1)  # [N]
            y = labels
        normal_term = T.mul_const(sq_norm, y)
        one_minus = T.clamp_min(T.add_const(T.scale(T.exp(T.scale(sq_norm, -1.0)), -1.0), 1.0), _HSC_LOG_FLOOR)
        anomalous_term = T.mul_const(T.log(one_minus), -(1.0 - y))
        per_level.append(T.reduce_mean(T.add(normal_term, anomalous_term)))
    return _mean_over(per_level)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(
            step=0,
            m=[np.zeros_like(p.data, dtype=np.float64) for p in params],
            v=[np.zeros_like(p.data, dtype=np.float64) for p in params],
        )


def adam_step(
    weights,
    grads,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, applied to the weights in place."""
    if lr <= 0:
        raise ParameterError("learning rate must be > 0")
    if len(weights) != len(grads) or len(weights) != len(state.m):
        raise ParameterError("weights/grads/state length mismatch")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for w, g, m, v in zip(weights, grads, state.m, state.v):
        g64 = np.asarray(g, dtype=np.float64)
        m *= beta1
        m += (1.0 - beta1) * g64
        v *= beta2
        v += (1.0 - beta2) * g64**2
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        w.data = (w.data.astype(np.float64) - update).astype(np.float32)
    return state
