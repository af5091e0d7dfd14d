"""Vicinal augmentations: AugMix-lite, CutOut and Confetti noise.

These synthesize subtle variations of normal images.  They back the
early-stopping criterion (augmented = anomalous surrogate) and serve as
labeled surrogate anomalies for the hypersphere-classifier baseline.
All functions are pure given an explicit seed; images are [3, H, W]
float32 in [0, 1] and keep their shape and range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ParameterError

KINDS = ("augmix", "cutout", "confetti", "all")

# AugMix-lite magnitude units per severity step.
ROTATE_DEG_PER_SEV = 3.0
TRANSLATE_FRAC_PER_SEV = 0.02
SHEAR_PER_SEV = 0.02
BRIGHTNESS_PER_SEV = 0.03
CONTRAST_PER_SEV = 0.04


@dataclass
class AugmentSpec:
    kind: str = "all"
    severity: int = 3
    depth_range: tuple = (1, 3)
    cutout_fraction: float = 0.25
    confetti_count: tuple = (1, 6)
    confetti_side: tuple = (0.02, 0.10)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not 1 <= int(self.severity) <= 10:
            raise ParameterError(f"severity must be in [1, 10], got {self.severity}")


@dataclass
class AugmentedSample:
    image: np.ndarray
    kind: str
    mask: np.ndarray  # boolean [H, W]; empty (all False) for augmix


@dataclass
class LabeledBatch:
    """Images with 1 = normal / 0 = anomalous labels and per-image masks."""

    images: np.ndarray  # [N, 3, H, W] float32
    labels: np.ndarray  # [N] int
    masks: np.ndarray = None  # [N, H, W] bool, optional
    kinds: list = field(default_factory=list)


def _affine_warp(image: np.ndarray, matrix: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """Bilinear warp around the image center with edge clamping.

    For output pixel p the source is ``matrix @ (p - c) + c + shift``
    (x, y order).  A zero-parameter warp reproduces the input exactly.
    """
    _, h, w = image.shape
    if np.allclose(matrix, np.eye(2)) and np.allclose(shift, 0.0):
        return image.copy()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sx = matrix[0, 0] * (xs - cx) + matrix[0, 1] * (ys - cy) + cx + shift[0]
    sy = matrix[1, 0] * (xs - cx) + matrix[1, 1] * (ys - cy) + cy + shift[1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    img = image.astype(np.float64)
    top = img[:, y0c, x0c] * (1 - fx) + img[:, y0c, x1c] * fx
    bot = img[:, y1c, x0c] * (1 - fx) + img[:, y1c, x1c] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _chain_op(image: np.ndarray, op: str, magnitude: float, rng) -> np.ndarray:
    if op == "rotate":
        theta = np.deg2rad(rng.uniform(-magnitude, magnitude))
        mat = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        return _affine_warp(image, mat, np.zeros(2))
    if op == "translate":
        side = min(image.shape[1], image.shape[2])
        shift = rng.uniform(-magnitude, magnitude, size=2) * side
        return _affine_warp(image, np.eye(2), shift)
    if op == "shear":
        s = rng.uniform(-magnitude, magnitude)
        mat = np.array([[1.0, s], [0.0, 1.0]]) if rng.random() < 0.5 else np.array([[1.0, 0.0], [s, 1.0]])
        return _affine_warp(image, mat, np.zeros(2))
    if op == "brightness":
        return image + rng.uniform(-magnitude, magnitude)
    if op == "contrast":
        c = 1.0 + rng.uniform(-magnitude, magnitude)
        mean = image.mean()
        return (image - mean) * c + mean
    raise ParameterError(f"unknown augmix op {op!r}")


_AUGMIX_OPS = ("rotate", "translate", "shear", "brightness", "contrast")


def augmix_lite(
    image: np.ndarray,
    severity: int = 3,
    depth_range=(1, 3),
    seed: int = 0,
    magnitude_scale: float = 1.0,
) -> np.ndarray:
    """Convex mix of the original with two short chains of geometric and
    photometric perturbations; magnitudes grow linearly with severity."""
    severity = int(severity)
    if not 1 <= severity <= 10:
        raise ParameterError(f"severity must be in [1, 10], got {severity}")
    rng = np.random.default_rng(seed)
    mags = {
        "rotate": severity * ROTATE_DEG_PER_SEV * magnitude_scale,
        "translate": severity * TRANSLATE_FRAC_PER_SEV * magnitude_scale,
        "shear": severity * SHEAR_PER_SEV * magnitude_scale,
        "brightness": severity * BRIGHTNESS_PER_SEV * magnitude_scale,
        "contrast": severity * CONTRAST_PER_SEV * magnitude_scale,
    }
    chains = []
    for _ in range(2):
        depth = int(rng.integers(depth_range[0], depth_range[1] + 1))
        out = image
        for _ in range(depth):
            op = _AUGMIX_OPS[rng.integers(len(_AUGMIX_OPS))]
            out = _chain_op(out, op, mags[op], rng)
        chains.append(out)
    weights = rng.dirichlet(np.ones(3))
    mixed = weights[0] * image + weights[1] * chains[0] + weights[2] * chains[1]
    return np.clip(mixed, 0.0, 1.0).astype(np.float32)


def cutout(image: np.ndarray, fraction: float = 0.25, seed: int = 0) -> AugmentedSample:
    """Fill one random square (side = fraction of the short side) with the
    per-channel mean color."""
    if not 0.0 <= fraction <= 1.0:
        raise ParameterError(f"fraction must be in [0, 1], got {fraction}")
    _, h, w = image.shape
    mask = np.zeros((h, w), dtype=bool)
    side = int(round(fraction * min(h, w)))
    if side == 0:
        return AugmentedSample(image.copy(), "cutout", mask)
    rng = np.random.default_rng(seed)
    side = min(side, h, w)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = image.copy()
    mean_color = image.mean(axis=(1, 2))
    out[:, top : top + side, left : left + side] = mean_color[:, None, None]
    mask[top : top + side, left : left + side] = True
    return AugmentedSample(out, "cutout", mask)


def confetti(
    image: np.ndarray,
    count_range=(1, 6),
    side_range=(0.02, 0.10),
    seed: int = 0,
) -> AugmentedSample:
    """Paste uniformly colored small rectangles at random positions."""
    if count_range[0] < 0 or count_range[1] < count_range[0]:
        raise ParameterError(f"bad count range {count_range}")
    _, h, w = image.shape
    rng = np.random.default_rng(seed)
    k = int(rng.integers(count_range[0], count_range[1] + 1))
    out = image.copy()
    mask = np.zeros((h, w), dtype=bool)
    side = min(h, w)
    for _ in range(k):
        bh = max(1, int(round(rng.uniform(*side_range) * side)))
        bw = max(1, int(round(rng.uniform(*side_range) * side)))
        top = int(rng.integers(0, h - bh + 1))
        left = int(rng.integers(0, w - bw + 1))
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        out[:, top : top + bh, left : left + bw] = color[:, None, None]
        mask[top : top + bh, left : left + bw] = True
    return AugmentedSample(out, "confetti", mask)


def augment_sample(image: np.ndarray, spec: AugmentSpec, seed: int) -> AugmentedSample:
    """Apply the configured scheme; kind='all' picks one uniformly."""
    kind = spec.kind
    if kind == "all":
        kind = ("augmix", "cutout", "confetti")[np.random.default_rng([seed, 911]).integers(3)]
    if kind == "augmix":
        out = augmix_lite(image, spec.severity, spec.depth_range, seed)
        return AugmentedSample(out, "augmix", np.zeros(image.shape[1:], dtype=bool))
    if kind == "cutout":
        return cutout(image, spec.cutout_fraction, seed)
    return confetti(image, spec.confetti_count, spec.confetti_side, seed)


def make_validation_set(
    val_images: np.ndarray,
    spec: AugmentSpec,
    anomalous_fraction: float = 0.7,
    oversample: int = 10,
    seed: int = 0,
) -> LabeledBatch:
    """Oversampled validation split with a fixed share of augmented samples.

    Draws ``oversample * len(val_images)`` samples with replacement; each
    draw is independently augmented (label 0) with probability
    ``anomalous_fraction``, else passed through unchanged (label 1).
    Whenever the batch has at least two samples and the random draws came
    out single-class, the first draw is flipped to the missing class so
    the AUROC criterion stays defined.
    """
    if val_images.shape[0] == 0:
        raise ConfigurationError("validation split is empty")
    if not 0.0 <= anomalous_fraction <= 1.0:
        raise ParameterError(f"anomalous fraction must be in [0, 1], got {anomalous_fraction}")
    rng = np.random.default_rng(seed)
    n = int(oversample) * val_images.shape[0]
    images = np.empty((n,) + val_images.shape[1:], dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    masks = np.zeros((n,) + val_images.shape[2:], dtype=bool)
    kinds = []
    for i in range(n):
        src = val_images[int(rng.integers(val_images.shape[0]))]
        if rng.random() < anomalous_fraction:
            sample = augment_sample(src, spec, seed=int(rng.integers(2**31 - 1)))
            images[i] = sample.image
            labels[i] = 0
            masks[i] = sample.mask
            kinds.append(sample.kind)
        else:
            images[i] = src
            labels[i] = 1
            kinds.append("none")
    if n >= 2 and 0.0 < anomalous_fraction < 1.0 and labels.min() == labels.max():
        src = val_images[0]
        if labels[0] == 1:
            sample = augment_sample(src, spec, seed=int(np.random.default_rng([seed, 424242]).integers(2**31 - 1)))
            images[0], labels[0], masks[0], kinds[0] = sample.image, 0, sample.mask, sample.kind
        else:
            images[0], labels[0], kinds[0] = src, 1, "none"
            masks[0] = False
    return LabeledBatch(images=images, labels=labels, masks=masks, kinds=kinds)
