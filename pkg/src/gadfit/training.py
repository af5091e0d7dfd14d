"""Fine-tuning loop with vicinal-variation early stopping.

Protocol: split the normal images 80/20, fit the per-level Gaussians on
the frozen features of the training split once, then run Adam epochs at
a small learning rate.  After every epoch a stopping criterion is
evaluated; training stops when it fails to improve for ``patience``
epochs (or at ``max_epochs``), and the weights of the best epoch are
restored.  Distribution parameters and normalization statistics are
never touched by the loop.

Criteria:

* ``vrm_auroc``     -- AUROC separating augmented from unaugmented
  validation samples, scored with the current weights;
* ``val_loss``      -- the training objective on the unaugmented
  validation split (negated internally so higher is better);
* ``fixed_epochs``  -- no early stopping, best = final epoch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import augment as A
from . import gaussian as G
from . import metrics as M
from . import objectives as O
from . import scoring as S
from .errors import ConfigurationError, ParameterError, StateError
from .tensor import zero_grads

OBJECTIVES = ("mahalanobis", "svdd", "hsc")
CRITERIA = ("vrm_auroc", "val_loss", "fixed_epochs")
_IMPROVEMENT_EPS = 1e-6
_HSC_TRAIN_ANOMALOUS_FRACTION = 0.5  # balanced surrogate-anomaly exposure


@dataclass
class TrainConfig:
    objective: str = "mahalanobis"
    aggregation: str = "max"
    gaussian_mode: str = "tied"
    lr: float = 1e-6
    batch_size: int = 8
    patience: int = 20
    max_epochs: int = 250
    train_fraction: float = 0.8
    stopping: str = "vrm_auroc"
    augment: A.AugmentSpec = field(default_factory=A.AugmentSpec)
    anomalous_fraction: float = 0.7
    oversample: int = 10
    svdd_weight_decay: float = 1e-4
    svdd_norm: str = "l2"
    hsc_spatial: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"objective must be one of {OBJECTIVES}")
        if self.stopping not in CRITERIA:
            raise ConfigurationError(f"stopping must be one of {CRITERIA}")
        if self.aggregation not in ("max", "mean"):
            raise ConfigurationError("aggregation must be 'max' or 'mean'")
        if self.gaussian_mode not in G.MODES:
            raise ConfigurationError(f"gaussian_mode must be one of {G.MODES}")
        if self.lr <= 0:
            raise ParameterError("lr must be > 0")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise ParameterError("batch_size/max_epochs must be >= 1 and patience >= 0")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigurationError("train_fraction must be in (0, 1)")


@dataclass
class TrainReport:
    criterion_values: list
    best_epoch: int
    stopped_epoch: int
    stopping_reason: str
    wall_seconds: float
    objective: str
    stopping: str

    def to_json(self) -> dict:
        return {
            "criterion_values": [float(v) for v in self.criterion_values],
            "best_epoch": self.best_epoch,
            "stopped_epoch": self.stopped_epoch,
            "stopping_reason": self.stopping_reason,
            "wall_seconds": self.wall_seconds,
            "objective": self.objective,
            "stopping": self.stopping,
        }


def split_dataset(images: np.ndarray, ratio: float = 0.8, seed: int = 0):
    """Disjoint, exhaustive, seed-deterministic shuffle split."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"ratio must be in (0, 1), got {ratio}")
    n = images.shape[0]
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(n * ratio)
    return images[order[:n_train]], images[order[n_train:]]


def vrm_auroc(model, scorer: G.GaussianModel, batch: A.LabeledBatch, aggregation: str = "max") -> float:
    """AUROC of image scores with the augmented (label 0) class positive."""
    if not scorer.levels:
        raise StateError("scorer has no fitted levels")
    results = S.score_dataset(model, scorer, batch.images, aggregation)
    scores = np.array([r.score for r in results])
    return M.auroc(scores, np.asarray(batch.labels) == 0)


def val_loss_criterion(model, gaussians: G.GaussianModel, val_images: np.ndarray, aggregation: str = "max") -> float:
    """Objective value over the unaugmented validation split (lower is better)."""
    return O.mahalanobis_loss(model, gaussians, val_images, aggregation).item()


def _build_scorer(model, cfg: TrainConfig, gaussians, svdd_params, hsc_centers) -> G.GaussianModel:
    """Scoring distribution matching the objective.

    Center-based objectives are scored as unit-covariance Gaussians
    around their center, so the same Mahalanobis machinery serves all
    three objectives.
    """
    if cfg.objective == "mahalanobis":
        return gaussians
    centers = svdd_params.centers if cfg.objective == "svdd" else hsc_centers
    spatial = {idx: gaussians.level(idx).spatial for idx in gaussians.levels}
    return G.identity_model(centers, spatial)


def finetune(model, config: TrainConfig, images: np.ndarray, epoch_callback=None):
    """Fine-tune the extractor on normal images.

    Returns ``(model, scorer, report)`` where ``scorer`` is the fitted
    scoring distribution (the Gaussian model itself for the Mahalanobis
    objective).  The model's weights are those of the best epoch under
    the configured criterion.
    """
    config.validate()
    if images.shape[0] == 0:
        raise ConfigurationError("no training images")
    if not model.frozen:
        raise StateError("model statistics must be frozen before fine-tuning")
    t0 = time.perf_counter()
    train_imgs, val_imgs = split_dataset(images, config.train_fraction, config.seed)
    if train_imgs.shape[0] == 0 or (config.stopping != "fixed_epochs" and val_imgs.shape[0] == 0):
        raise ConfigurationError(f"split of {images.shape[0]} images leaves an empty partition")

    # statistics from frozen features, fitted once and never updated
    frozen_feats = model.forward_levels(train_imgs)
    gaussians = G.fit_gaussian(frozen_feats, config.gaussian_mode)
    svdd_params = None
    hsc_centers = None
    if config.objective == "svdd":
        svdd_params = O.SvddParams(
            centers={lf.level: lf.data.mean(axis=(0, 2, 3), dtype=np.float64) for lf in frozen_feats},
            weight_decay=config.svdd_weight_decay,
            norm=config.svdd_norm,
        )
    elif config.objective == "hsc":
        hsc_centers = {lf.level: lf.data.mean(axis=(0, 2, 3), dtype=np.float64) for lf in frozen_feats}
    scorer = _build_scorer(model, config, gaussians, svdd_params, hsc_centers)

    val_batch = None
    if config.stopping == "vrm_auroc":
        val_batch = A.make_validation_set(
            val_imgs,
            config.augment,
            anomalous_fraction=config.anomalous_fraction,
            oversample=config.oversample,
            seed=config.seed + 1,
        )

    params = model.trainable_parameters()
    model.set_requires_grad(True)
    state = O.AdamState.for_params(params)
    best_value = -np.inf
    best_epoch = 0
    best_weights = None
    criterion_values = []
    stopping_reason = "max_epochs"
    epoch = 0

    def epoch_criterion(train_loss: float) -> float:
        if config.stopping == "vrm_auroc":
            return vrm_auroc(model, scorer, val_batch, config.aggregation)
        if config.stopping == "val_loss":
            return -_objective_value(model, config, gaussians, svdd_params, hsc_centers, val_imgs)
        return train_loss  # fixed_epochs: recorded but not used for stopping

    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(train_imgs.shape[0])
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, order.size, config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = _batch_loss(model, config, gaussians, svdd_params, hsc_centers, train_imgs[idx], rng)
            zero_grads(params)
            loss.backward()
            O.adam_step(params, [p.grad for p in params], state, config.lr)
            epoch_loss += loss.item()
            n_batches += 1
        value = epoch_criterion(epoch_loss / max(n_batches, 1))
        criterion_values.append(value)
        if epoch_callback is not None:
            epoch_callback(epoch, model, value)
        if config.stopping == "fixed_epochs":
            best_epoch = epoch
            continue
        if value > best_value + _IMPROVEMENT_EPS:
            best_value = value
            best_epoch = epoch
            best_weights = model.copy_weights()
        if epoch - best_epoch >= config.patience:
            stopping_reason = "early_stop"
            break

    if best_weights is not None:
        model.load_weight_arrays(best_weights)
    model.set_requires_grad(False)
    report = TrainReport(
        criterion_values=criterion_values,
        best_epoch=best_epoch,
        stopped_epoch=epoch,
        stopping_reason=stopping_reason,
        wall_seconds=time.perf_counter() - t0,
        objective=config.objective,
        stopping=config.stopping,
    )
    return model, scorer, report


def _objective_value(model, config, gaussians, svdd_params, hsc_centers, images) -> float:
    if config.objective == "mahalanobis":
        return O.mahalanobis_loss(model, gaussians, images, config.aggregation).item()
    if config.objective == "svdd":
        return O.svdd_loss(model, svdd_params, images).item()
    batch = A.LabeledBatch(images=images, labels=np.ones(images.shape[0], dtype=np.int64))
    return O.hsc_loss(model, batch, hsc_centers, config.hsc_spatial).item()


def _batch_loss(model, config, gaussians, svdd_params, hsc_centers, batch_images, rng):
    if config.objective == "mahalanobis":
        return O.mahalanobis_loss(model, gaussians, batch_images, config.aggregation)
    if config.objective == "svdd":
        return O.svdd_loss(model, svdd_params, batch_images)
    # hsc consumes surrogate anomalies: augment a balanced share of the batch
    n = batch_images.shape[0]
    images = batch_images.copy()
    labels = np.ones(n, dtype=np.int64)
    for i in range(n):
        if rng.random() < _HSC_TRAIN_ANOMALOUS_FRACTION:
            sample = A.augment_sample(batch_images[i], config.augment, seed=int(rng.integers(2**31 - 1)))
            images[i] = sample.image
            labels[i] = 0
    return O.hsc_loss(model, A.LabeledBatch(images=images, labels=labels), hsc_centers, config.hsc_spatial)
