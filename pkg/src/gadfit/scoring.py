"""Image-level anomaly scores and fused full-resolution heatmaps.

Per-level distance maps are upsampled with align-corners=false bilinear
interpolation (documented bit-exactly in ``tensor.bilinear_resize``) and
averaged pixel-wise; the image score is the mean over levels of the
aggregated map value.  Everything here is read-only inference.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import gaussian as G
from .errors import ConfigurationError, ParameterError
from .tensor import bilinear_resize

HEATMAP_MAGIC = b"GADH"


@dataclass
class AnomalyResult:
    level_maps: list  # list of AnomalyMapLevel
    heatmap: np.ndarray  # [H, W] float64 at input resolution
    score: float


def image_score(maps, aggregation: str = "max") -> float:
    """Mean over levels of the aggregated per-level map value."""
    if aggregation not in ("max", "mean"):
        raise ParameterError(f"aggregation must be 'max' or 'mean', got {aggregation!r}")
    if not maps:
        raise ConfigurationError("no anomaly maps given")
    agg = np.max if aggregation == "max" else np.mean
    return float(np.mean([agg(m.values) for m in maps]))


def segment(maps, target_hw) -> np.ndarray:
    """Fuse per-level maps into one heatmap at the target resolution."""
    if not maps:
        raise ConfigurationError("no anomaly maps given")
    acc = np.zeros((int(target_hw[0]), int(target_hw[1])), dtype=np.float64)
    for m in maps:
        acc += bilinear_resize(m.values, target_hw)
    return acc / len(maps)


def score_dataset(model, scorer: G.GaussianModel, images: np.ndarray, aggregation: str = "max", batch_size: int = 16):
    """Score a stack of images, returning one AnomalyResult per image.

    Deterministic and order-independent: each image's result depends
    only on that image.
    """
    if aggregation not in ("max", "mean"):
        raise ParameterError(f"aggregation must be 'max' or 'mean', got {aggregation!r}")
    n = images.shape[0]
    target = images.shape[2:]
    results = []
    for start in range(0, n, batch_size):
        batch = images[start : start + batch_size]
        feats = model.forward_levels(batch)
        per_level = [
            (lf.level, G.mahalanobis_maps_numpy(lf.data, scorer.level(lf.level))) for lf in feats
        ]
        for i in range(batch.shape[0]):
            maps = [G.AnomalyMapLevel(level=lvl, values=vals[i]) for lvl, vals in per_level]
            results.append(
                AnomalyResult(
                    level_maps=maps,
                    heatmap=segment(maps, target),
                    score=image_score(maps, aggregation),
                )
            )
    return results


def export_heatmap_pngs(results, paths) -> None:
    """Write 8-bit grayscale PNGs with a shared min-max scaling.

    The value range across *all* given heatmaps is mapped to [0, 255] so
    images of one dataset are comparable.
    """
    if len(results) != len(paths):
        raise ParameterError("results/paths length mismatch")
    if not results:
        return
    lo = min(float(r.heatmap.min()) for r in results)
    hi = max(float(r.heatmap.max()) for r in results)
    span = hi - lo if hi > lo else 1.0
    for r, path in zip(results, paths):
        scaled = np.clip((r.heatmap - lo) / span * 255.0, 0.0, 255.0)
        Image.fromarray(np.round(scaled).astype(np.uint8), mode="L").save(path)


def write_heatmap_raw(heatmap: np.ndarray, path) -> None:
    """Raw float32 dump: 'GADH' magic, u32 height, u32 width, then
    row-major little-endian float32 values."""
    hm = np.asarray(heatmap, dtype="<f4")
    if hm.ndim != 2:
        raise ParameterError(f"heatmap must be 2-D, got {hm.shape}")
    with open(path, "wb") as fh:
        fh.write(HEATMAP_MAGIC)
        fh.write(struct.pack("<II", hm.shape[0], hm.shape[1]))
        fh.write(hm.tobytes())


def read_heatmap_raw(path) -> np.ndarray:
    from .errors import FormatError

    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != HEATMAP_MAGIC:
            raise FormatError(f"bad heatmap magic {magic!r}")
        h, w = struct.unpack("<II", fh.read(8))
        raw = fh.read(h * w * 4)
        if len(raw) != h * w * 4:
            raise FormatError("truncated heatmap file")
        return np.frombuffer(raw, dtype="<f4").reshape(h, w).copy()
