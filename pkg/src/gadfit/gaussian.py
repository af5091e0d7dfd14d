"""Per-level Gaussian models of normal features and Mahalanobis maps.

Covariances are estimated with Ledoit-Wolf shrinkage and are never
inverted: every quadratic form goes through triangular solves against a
cached Cholesky factor.  A fitted model is immutable; the anomaly-map
computation differentiates with respect to the features only, holding
means and covariances constant.

Parametrization modes:

* ``global`` -- one mean and one covariance shared by all locations;
* ``tied``   -- one mean per location, covariance pooled across locations;
* ``local``  -- one mean and one covariance per location.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import tensor as T
from .errors import DimensionError, EstimationError, FormatError, StateError

GAUSS_MAGIC = b"GADG"
MODES = ("global", "tied", "local")

_DEGENERATE_EPS = 1e-6
_RHO_FLOOR = 1e-8


def ledoit_wolf(samples: np.ndarray):
    """Shrinkage covariance estimate from an [N, D] sample matrix.

    Returns ``(sigma, rho, degenerate)`` where
    ``sigma = (1 - rho) * S + rho * (trace(S)/D) * I`` for the biased
    sample covariance S and the closed-form shrinkage intensity rho
    clamped to [0, 1].  When S is identically zero (a single sample or
    all-identical rows) the estimate degenerates to ``eps * I`` with
    rho = 1 and the flag set.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise DimensionError(f"ledoit_wolf expects a non-empty [N, D] matrix, got {x.shape}")
    n, d = x.shape
    xc = x - x.mean(axis=0, keepdims=True)
    s = xc.T @ xc / n
    mu = np.trace(s) / d
    if not np.any(np.abs(s) > 0):
        return _DEGENERATE_EPS * np.eye(d), 1.0, True
    delta = np.sum((s - mu * np.eye(d)) ** 2) / d
    x2 = xc**2
    beta_bar = np.sum(x2.T @ x2 / n - s**2) / (d * n)
    beta = min(beta_bar, delta)
    rho = float(min(1.0, max(0.0, beta / delta))) if delta > 0 else 1.0
    # The closed-form intensity can be exactly 0 (e.g. N=2, where every
    # sample outer product equals S) while S is rank deficient; a tiny
    # floor keeps the estimate positive definite without measurably
    # moving it (relative perturbation <= _RHO_FLOOR).
    rho = max(rho, _RHO_FLOOR)
    sigma = (1.0 - rho) * s + rho * mu * np.eye(d)
    sigma = 0.5 * (sigma + sigma.T)
    return sigma, rho, False


def _cholesky_safe(sigma: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, retrying once with a diagonal jitter."""
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        eps = max(1e-6 * float(np.mean(np.diag(sigma))), 1e-9)
        return np.linalg.cholesky(sigma + eps * np.eye(sigma.shape[0]))


@dataclass
class GaussianLevel:
    """Fitted distribution for one feature level."""

    level: int
    mode: str
    dim: int
    spatial: tuple  # (H, W)
    mean: np.ndarray  # [C] for global, [H, W, C] otherwise
    covariance: np.ndarray  # [C, C] or [H, W, C, C]
    cholesky: np.ndarray  # matching lower factor(s)
    shrinkage: np.ndarray  # scalar or [H, W]
    degenerate: bool = False

    def mean_at(self, h=None, w=None) -> np.ndarray:
        if self.mode == "global":
            return self.mean
        if h is None or w is None:
            raise DimensionError(f"mode {self.mode!r} needs a location")
        return self.mean[h, w]

    def chol_at(self, h=None, w=None) -> np.ndarray:
        if self.mode != "local":
            return self.cholesky
        if h is None or w is None:
            raise DimensionError("local mode needs a location")
        return self.cholesky[h, w]


@dataclass
class GaussianModel:
    mode: str
    levels: dict = field(default_factory=dict)  # level index -> GaussianLevel

    def level(self, idx: int) -> GaussianLevel:
        if idx not in self.levels:
            raise StateError(f"no Gaussian fitted for level {idx}")
        return self.levels[idx]


@dataclass
class AnomalyMapLevel:
    """Non-negative Mahalanobis distances on one level's [H_m, W_m] grid."""

    level: int
    values: np.ndarray


def _fit_level(level: int, feats: np.ndarray, mode: str) -> GaussianLevel:
    n, c, h, w = feats.shape
    x = feats.astype(np.float64).transpose(0, 2, 3, 1)  # [N, H, W, C]
    if mode == "global":
        flat = x.reshape(n * h * w, c)
        mean = flat.mean(axis=0)
        sigma, rho, degen = ledoit_wolf(flat)
        chol = _cholesky_safe(sigma)
        return GaussianLevel(level, mode, c, (h, w), mean, sigma, chol, np.float64(rho), degen)
    if mode == "tied":
        mean = x.mean(axis=0)  # [H, W, C]
        pooled = (x - mean[None]).reshape(n * h * w, c)
        sigma, rho, degen = ledoit_wolf(pooled)
        chol = _cholesky_safe(sigma)
        return GaussianLevel(level, mode, c, (h, w), mean, sigma, chol, np.float64(rho), degen)
    if mode == "local":
        if n < 2:
            raise EstimationError("local mode needs at least 2 training images")
        mean = x.mean(axis=0)
        sigma = np.empty((h, w, c, c))
        chol = np.empty((h, w, c, c))
        rho = np.empty((h, w))
        degen = False
        for i in range(h):
            for j in range(w):
                s_ij, r_ij, d_ij = ledoit_wolf(x[:, i, j, :])
                sigma[i, j] = s_ij
                chol[i, j] = _cholesky_safe(s_ij)
                rho[i, j] = r_ij
                degen = degen or d_ij
        return GaussianLevel(level, mode, c, (h, w), mean, sigma, chol, rho, degen)
    raise DimensionError(f"unknown mode {mode!r}")


def fit_gaussian(features, mode: str = "tied") -> GaussianModel:
    """Fit one Gaussian per tapped level from frozen normal features.

    ``features`` is the list of LevelFeatures returned by
    ``FeatureExtractor.forward_levels`` over the training split.
    """
    if mode not in MODES:
        raise DimensionError(f"mode must be one of {MODES}, got {mode!r}")
    model = GaussianModel(mode=mode)
    for lf in features:
        model.levels[lf.level] = _fit_level(lf.level, np.asarray(lf.data), mode)
    return model


def _check_features(level: GaussianLevel, feats_shape) -> None:
    n, c, h, w = feats_shape
    if c != level.dim or (h, w) != level.spatial:
        raise DimensionError(
            f"features [{c},{h},{w}] do not match level {level.level} model [{level.dim},{level.spatial}]"
        )


def _whiten_forward(level: GaussianLevel, centered: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Solve L y = (x - mu) per location; centered is [N, C, H, W]."""
    n, c, h, w = centered.shape
    centered = centered.astype(dtype, copy=False)
    chol = level.cholesky.astype(dtype, copy=False)
    if level.mode != "local":
        cols = centered.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        sol = solve_triangular(chol, cols, lower=True, check_finite=False)
        return sol.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    out = np.empty_like(centered)
    for i in range(h):
        for j in range(w):
            out[:, :, i, j] = solve_triangular(
                chol[i, j], centered[:, :, i, j].T, lower=True, check_finite=False
            ).T
    return out


def _whiten_backward(level: GaussianLevel, grad: np.ndarray) -> np.ndarray:
    """Transposed solve L^T g = grad, the adjoint of the forward solve."""
    n, c, h, w = grad.shape
    chol = level.cholesky.astype(np.float32, copy=False)
    if level.mode != "local":
        cols = grad.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        sol = solve_triangular(chol, cols, lower=True, trans="T", check_finite=False)
        return sol.reshape(c, n, h, w).transpose(1, 0, 2, 3)
    out = np.empty((n, c, h, w), dtype=np.float32)
    for i in range(h):
        for j in range(w):
            out[:, :, i, j] = solve_triangular(
                chol[i, j], grad[:, :, i, j].T, lower=True, trans="T", check_finite=False
            ).T
    return out


def _broadcast_mean(level: GaussianLevel, shape) -> np.ndarray:
    n, c, h, w = shape
    if level.mode == "global":
        return np.broadcast_to(level.mean[None, :, None, None], shape)
    return np.broadcast_to(level.mean.transpose(2, 0, 1)[None], shape)


def whiten_batch(features: T.Tensor, level: GaussianLevel) -> T.Tensor:
    """Differentiable decorrelation: L^{-1}(x - mu) per spatial location.

    The training path solves in float32 (well within gradient-check
    tolerance); the float64 inference path is ``whiten`` /
    ``mahalanobis_maps_numpy``.
    """
    _check_features(level, features.shape)
    mean = _broadcast_mean(level, features.shape).astype(np.float32)
    centered = features.data - mean
    out = _whiten_forward(level, centered, dtype=np.float32)
    return T._from_op(out, (features,), lambda g: (_whiten_backward(level, g).astype(np.float32),))


def mahalanobis_batch(features: T.Tensor, level: GaussianLevel) -> T.Tensor:
    """Differentiable per-location Mahalanobis distances: [N,C,H,W] -> [N,H,W]."""
    white = whiten_batch(features, level)
    sq = T.reduce_sum(T.mul(white, white), axis=1)
    return T.sqrt(sq)


def mahalanobis_map(features, model: GaussianModel) -> AnomalyMapLevel:
    """Distance map of a single image's LevelFeatures (inference path)."""
    feats = np.asarray(features.data)
    if feats.ndim == 3:
        feats = feats[None]
    if feats.shape[0] != 1:
        raise DimensionError("mahalanobis_map expects a single image; use mahalanobis_maps_numpy")
    values = mahalanobis_maps_numpy(feats, model.level(features.level))[0]
    return AnomalyMapLevel(level=features.level, values=values)


def mahalanobis_maps_numpy(feats: np.ndarray, level: GaussianLevel) -> np.ndarray:
    """Float64 fast path: [N,C,H,W] features -> [N,H,W] distance maps."""
    _check_features(level, feats.shape)
    centered = feats.astype(np.float64) - _broadcast_mean(level, feats.shape)
    white = _whiten_forward(level, centered)
    return np.sqrt(np.einsum("nchw,nchw->nhw", white, white))


def whiten(features, model: GaussianModel) -> np.ndarray:
    """Inference-path decorrelated features, same shape as the input."""
    feats = np.asarray(features.data, dtype=np.float64)
    squeeze = feats.ndim == 3
    if squeeze:
        feats = feats[None]
    level = model.level(features.level)
    _check_features(level, feats.shape)
    centered = feats - _broadcast_mean(level, feats.shape)
    out = _whiten_forward(level, centered)
    return out[0] if squeeze else out


def gaussian_log_density(x: np.ndarray, model: GaussianModel, level_idx: int, location=None) -> float:
    """Log of the multivariate normal density at vector ``x``."""
    level = model.level(level_idx)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (level.dim,):
        raise DimensionError(f"expected vector of dim {level.dim}, got {x.shape}")
    if level.mode == "global":
        mean, chol = level.mean, level.cholesky
    else:
        if location is None:
            raise DimensionError(f"mode {level.mode!r} needs a location")
        h, w = location
        mean = level.mean[h, w]
        chol = level.chol_at(h, w)
    y = solve_triangular(chol, x - mean, lower=True, check_finite=False)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    m2 = float(y @ y)
    return -0.5 * (level.dim * np.log(2.0 * np.pi) + log_det + m2)


def identity_model(centers: dict, spatial: dict) -> GaussianModel:
    """Unit-covariance Gaussian scorer with a constant per-level mean.

    Used to score models trained with center-based objectives: the
    Mahalanobis machinery then reduces to plain L2 distance to the
    center at every location.
    """
    model = GaussianModel(mode="global")
    for idx, c in centers.items():
        c = np.asarray(c, dtype=np.float64)
        d = c.shape[0]
        eye = np.eye(d)
        model.levels[idx] = GaussianLevel(
            level=idx,
            mode="global",
            dim=d,
            spatial=tuple(spatial[idx]),
            mean=c,
            covariance=eye.copy(),
            cholesky=eye.copy(),
            shrinkage=np.float64(0.0),
        )
    return model


# ---------------------------------------------------------------------------
# serialization: "GADG" block appended to the weight file
#
#   "GADG" | header length u32 LE | header JSON
#   | per level, in header order: mean then cholesky, raw little-endian
#     float64.  Covariance is reconstructed as L L^T on load.


def write_gaussian_block(fh, model: GaussianModel) -> None:
    levels = []
    for idx in sorted(model.levels):
        lv = model.levels[idx]
        levels.append(
            {
                "level": idx,
                "mode": lv.mode,
                "dim": lv.dim,
                "spatial": list(lv.spatial),
                "mean_shape": list(lv.mean.shape),
                "chol_shape": list(lv.cholesky.shape),
                "degenerate": bool(lv.degenerate),
            }
        )
    header = json.dumps({"mode": model.mode, "levels": levels}, sort_keys=True).encode()
    fh.write(GAUSS_MAGIC)
    fh.write(struct.pack("<I", len(header)))
    fh.write(header)
    for idx in sorted(model.levels):
        lv = model.levels[idx]
        fh.write(np.ascontiguousarray(lv.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(lv.cholesky, dtype="<f8").tobytes())


def read_gaussian_block(buf) -> GaussianModel:
    raw_len = buf.read(4)
    if len(raw_len) != 4:
        raise FormatError("truncated Gaussian block header")
    (hlen,) = struct.unpack("<I", raw_len)
    raw = buf.read(hlen)
    if len(raw) != hlen:
        raise FormatError("truncated Gaussian block header")
    header = json.loads(raw.decode())
    if header["mode"] not in MODES:
        raise FormatError(f"bad Gaussian mode {header['mode']!r}")
    model = GaussianModel(mode=header["mode"])
    for entry in header["levels"]:
        mean_shape = tuple(entry["mean_shape"])
        chol_shape = tuple(entry["chol_shape"])
        nbytes = int(np.prod(mean_shape)) * 8
        raw = buf.read(nbytes)
        if len(raw) != nbytes:
            raise FormatError("truncated Gaussian mean")
        mean = np.frombuffer(raw, dtype="<f8").reshape(mean_shape).copy()
        nbytes = int(np.prod(chol_shape)) * 8
        raw = buf.read(nbytes)
        if len(raw) != nbytes:
            raise FormatError("truncated Gaussian Cholesky factor")
        chol = np.frombuffer(raw, dtype="<f8").reshape(chol_shape).copy()
        if entry["mode"] == "local":
            cov = np.einsum("hwab,hwcb->hwac", chol, chol)
        else:
            cov = chol @ chol.T
        model.levels[int(entry["level"])] = GaussianLevel(
            level=int(entry["level"]),
            mode=entry["mode"],
            dim=int(entry["dim"]),
            spatial=tuple(entry["spatial"]),
            mean=mean,
            covariance=cov,
            cholesky=chol,
            shrinkage=np.float64(0.0),
            degenerate=bool(entry["degenerate"]),
        )
    return model


def snapshot_parameters(model: GaussianModel) -> list:
    """Bit-exact copies of all means and Cholesky factors, for invariants."""
    out = []
    for idx in sorted(model.levels):
        lv = model.levels[idx]
        out.append((idx, lv.mean.copy(), lv.cholesky.copy()))
    return out
