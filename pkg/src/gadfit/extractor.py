"""Multi-level convolutional feature extractor with frozen normalization.

Each level is conv(3x3, pad 1) -> per-channel normalization -> smooth
activation -> 2x2 average pooling, so level m halves the spatial size m
times.  Levels are tapped after pooling.  Normalization statistics are
estimated from batch statistics during the classification pretraining
phase and frozen afterwards; fine-tuning only ever touches conv weights,
biases and the normalization scale/shift.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, FormatError, StateError

WEIGHT_MAGIC = b"GADW"
WEIGHT_VERSION = 1

DEFAULT_CHANNELS = (16, 32, 64, 128)
NORM_EPS = 1e-5


@dataclass
class LevelFeatures:
    """Output of one tapped level: a [N, C_m, H_m, W_m] tensor."""

    level: int
    tensor: T.Tensor

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data


@dataclass
class _Level:
    w: T.Tensor
    b: T.Tensor
    scale: T.Tensor
    shift: T.Tensor
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass
class FeatureExtractor:
    channels: tuple = DEFAULT_CHANNELS
    in_channels: int = 3
    kernel: int = 3
    tap_levels: tuple = ()
    activation: str = "silu"
    frozen: bool = False
    levels: list = field(default_factory=list)

    @property
    def num_levels(self) -> int:
        return len(self.channels)

    def trainable_parameters(self) -> list:
        params = []
        for lv in self.levels:
            params.extend([lv.w, lv.b, lv.scale, lv.shift])
        return params

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.trainable_parameters():
            p.requires_grad = flag

    def copy_weights(self) -> list:
        return [p.data.copy() for p in self.trainable_parameters()]

    def load_weight_arrays(self, arrays) -> None:
        params = self.trainable_parameters()
        if len(arrays) != len(params):
            raise DimensionError("weight array count mismatch")
        for p, a in zip(params, arrays):
            if p.data.shape != a.shape:
                raise DimensionError(f"weight shape {a.shape} != {p.data.shape}")
            p.data = np.ascontiguousarray(a, dtype=np.float32)

    def norm_statistics(self) -> list:
        return [(lv.running_mean.copy(), lv.running_var.copy()) for lv in self.levels]

    def freeze_statistics(self) -> None:
        self.frozen = True

    def forward_levels(self, images, batch_stats: bool = False, taps=None) -> list:
        """Run all levels, returning one LevelFeatures per tapped level.

        ``batch_stats=True`` is the pretraining mode: normalization uses
        the current batch's per-channel statistics (as constants, so
        gradients do not flow through them) and updates the running
        estimates.  Refused once statistics are frozen.  ``taps``
        overrides the configured tap set for this call.
        """
        if batch_stats and self.frozen:
            raise StateError("statistics are frozen; batch_stats forward not allowed")
        tap_set = set(self.tap_levels if taps is None else taps)
        x = images if isinstance(images, T.Tensor) else T.Tensor(images)
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(f"expected [N,{self.in_channels},H,W], got {x.shape}")
        div = 2 ** self.num_levels
        if x.shape[2] % div or x.shape[3] % div:
            raise DimensionError(f"spatial size {x.shape[2:]} not divisible by 2^{self.num_levels}")
        act = T.activation if self.activation == "silu" else T.relu
        out = []
        for idx, lv in enumerate(self.levels, start=1):
            x = T.conv2d(x, lv.w, lv.b, stride=1, padding=self.kernel // 2)
            if batch_stats:
                mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
                var = x.data.var(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
                x = T.frozen_norm(x, mean, var, lv.scale, lv.shift, NORM_EPS)
            else:
                x = T.frozen_norm(
                    x,
                    lv.running_mean.astype(np.float32),
                    lv.running_var.astype(np.float32),
                    lv.scale,
                    lv.shift,
                    NORM_EPS,
                )
            x = act(x)
            x = T.avg_pool2d(x)
            if idx in tap_set:
                out.append(LevelFeatures(level=idx, tensor=x))
        return out

    def estimate_statistics(self, images: np.ndarray, batch_size: int = 64) -> None:
        """Set running statistics from the population, level by level.

        Each level's statistics are the full-dataset moments of its conv
        output when earlier levels already normalize with their final
        statistics, so frozen-mode activations are self-consistent.
        """
        if self.frozen:
            raise StateError("statistics are frozen")
        act = T.activation if self.activation == "silu" else T.relu
        current = images
        for lv in self.levels:
            total = None
            total_sq = None
            count = 0
            outs = []
            for start in range(0, current.shape[0], batch_size):
                xb = T.Tensor(current[start : start + batch_size])
                conv = T.conv2d(xb, lv.w, lv.b, stride=1, padding=self.kernel // 2).data
                s = conv.sum(axis=(0, 2, 3), dtype=np.float64)
                sq = (conv.astype(np.float64) ** 2).sum(axis=(0, 2, 3))
                total = s if total is None else total + s
                total_sq = sq if total_sq is None else total_sq + sq
                count += conv.shape[0] * conv.shape[2] * conv.shape[3]
                outs.append(conv)
            mean = total / count
            var = np.maximum(total_sq / count - mean**2, 0.0)
            lv.running_mean = mean
            lv.running_var = var
            next_batches = []
            for conv in outs:
                t = T.frozen_norm(
                    T.Tensor(conv), mean.astype(np.float32), var.astype(np.float32), lv.scale, lv.shift, NORM_EPS
                )
                next_batches.append(T.avg_pool2d(act(t)).data)
            current = np.concatenate(next_batches, axis=0)


def build_extractor(
    channels=DEFAULT_CHANNELS,
    in_channels: int = 3,
    kernel: int = 3,
    tap_levels=None,
    activation: str = "silu",
    seed: int = 0,
) -> FeatureExtractor:
    """Fan-in-scaled uniform initialization, deterministic in the seed."""
    channels = tuple(int(c) for c in channels)
    if not channels:
        raise ConfigurationError("at least one level required")
    if activation not in ("silu", "relu"):
        raise ConfigurationError(f"unknown activation {activation!r}")
    tap_levels = tuple(range(1, len(channels) + 1)) if tap_levels is None else tuple(sorted(tap_levels))
    if any(t < 1 or t > len(channels) for t in tap_levels):
        raise ConfigurationError(f"tap levels {tap_levels} out of range")
    rng = np.random.default_rng(seed)
    model = FeatureExtractor(
        channels=channels,
        in_channels=in_channels,
        kernel=kernel,
        tap_levels=tap_levels,
        activation=activation,
    )
    cin = in_channels
    for cout in channels:
        fan_in = cin * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, kernel, kernel)).astype(np.float32)
        model.levels.append(
            _Level(
                w=T.Tensor(w),
                b=T.Tensor(np.zeros(cout, dtype=np.float32)),
                scale=T.Tensor(np.ones(cout, dtype=np.float32)),
                shift=T.Tensor(np.zeros(cout, dtype=np.float32)),
                running_mean=np.zeros(cout, dtype=np.float64),
                running_var=np.ones(cout, dtype=np.float64),
            )
        )
        cin = cout
    return model


@dataclass
class PretrainReport:
    epochs: int
    holdout_accuracy: float
    train_losses: list


def pretrain_classifier(
    model: FeatureExtractor,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    holdout_fraction: float = 0.2,
):
    """Train the extractor as a texture classifier, then freeze statistics.

    A global-average-pool + linear head provides the supervision signal
    and is discarded afterwards.  Training normalizes with per-batch
    statistics; the running statistics are then estimated over the full
    training split with the final weights (so the frozen forward is
    self-consistent) and frozen.  Returns ``(model, PretrainReport)``;
    the report carries held-out accuracy measured with frozen statistics.
    """
    from .objectives import AdamState, adam_step  # deferred: objectives imports this module's types

    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ConfigurationError("pretraining corpus must contain at least 2 classes")
    if images.shape[0] != labels.shape[0]:
        raise DimensionError("image/label count mismatch")
    rng = np.random.default_rng(seed)
    n = images.shape[0]
    order = rng.permutation(n)
    n_hold = max(1, int(round(n * holdout_fraction))) if epochs > 0 else 0
    hold_idx = order[:n_hold]
    train_idx = order[n_hold:]

    k = int(classes.max()) + 1
    c_last = model.channels[-1]
    head_w = T.Tensor(rng.normal(scale=1.0 / np.sqrt(c_last), size=(c_last, k)).astype(np.float32), requires_grad=True)
    head_b = T.Tensor(np.zeros(k, dtype=np.float32), requires_grad=True)
    params = model.trainable_parameters() + [head_w, head_b]
    state = AdamState.for_params(params)
    model.set_requires_grad(True)

    def logits_for(batch, batch_stats):
        feats = model.forward_levels(batch, batch_stats=batch_stats, taps=(model.num_levels,))
        pooled = T.spatial_mean(feats[-1].tensor)
        return T.linear(pooled, head_w, head_b)

    losses = []
    for epoch in range(int(epochs)):
        perm = np.random.default_rng([seed, epoch + 1]).permutation(train_idx)
        epoch_loss = 0.0
        nb = 0
        for s in range(0, perm.size, batch_size):
            idx = perm[s : s + batch_size]
            if idx.size < 2:
                continue  # batch statistics need >= 2 samples
            out = logits_for(images[idx], batch_stats=True)
            loss = T.softmax_cross_entropy(out, labels[idx])
            T.zero_grads(params)
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr)
            epoch_loss += loss.item()
            nb += 1
        losses.append(epoch_loss / max(nb, 1))
    model.set_requires_grad(False)
    if epochs > 0:
        model.estimate_statistics(images[train_idx], batch_size=max(batch_size, 32))
    model.freeze_statistics()

    accuracy = float("nan")
    if n_hold:
        correct = 0
        for s in range(0, hold_idx.size, batch_size):
            idx = hold_idx[s : s + batch_size]
            out = logits_for(images[idx], batch_stats=False)
            correct += int((out.data.argmax(axis=1) == labels[idx]).sum())
        accuracy = correct / hold_idx.size
    return model, PretrainReport(epochs=int(epochs), holdout_accuracy=accuracy, train_losses=losses)


# ---------------------------------------------------------------------------
# weight file format
#
#   "GADW" | version u8 | header length u32 LE | header JSON (utf-8)
#   | per level, in order: w, b, scale, shift, running_mean, running_var
#     as raw little-endian float32
#   optionally followed by one "GADG" Gaussian block (see gaussian module).


def _write_array(buf, arr, dtype="<f4"):
    buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(buf, count, shape, dtype="<f4", what="array"):
    nbytes = count * np.dtype(dtype).itemsize
    raw = buf.read(nbytes)
    if len(raw) != nbytes:
        raise FormatError(f"truncated file while reading {what}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_weights(model: FeatureExtractor, path, gaussians=None) -> None:
    from .gaussian import write_gaussian_block

    header = {
        "channels": list(model.channels),
        "in_channels": model.in_channels,
        "kernel": model.kernel,
        "tap_levels": list(model.tap_levels),
        "activation": model.activation,
        "frozen": model.frozen,
    }
    payload = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<B", WEIGHT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for lv in model.levels:
            for arr in (lv.w.data, lv.b.data, lv.scale.data, lv.shift.data):
                _write_array(fh, arr)
            _write_array(fh, lv.running_mean, "<f8")
            _write_array(fh, lv.running_var, "<f8")
        if gaussians is not None:
            write_gaussian_block(fh, gaussians)


def load_weights(path, expected_channels=None):
    """Read a weight file back into a FeatureExtractor.

    Returns ``(model, gaussians)`` where ``gaussians`` is None when the
    file carries no Gaussian block.
    """
    from .gaussian import GAUSS_MAGIC, read_gaussian_block

    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    magic = buf.read(4)
    if magic != WEIGHT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    (version,) = struct.unpack("<B", buf.read(1))
    if version != WEIGHT_VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    raw_len = buf.read(4)
    if len(raw_len) != 4:
        raise FormatError("truncated header")
    (hlen,) = struct.unpack("<I", raw_len)
    raw_header = buf.read(hlen)
    if len(raw_header) != hlen:
        raise FormatError("truncated header")
    header = json.loads(raw_header.decode())
    channels = tuple(header["channels"])
    if expected_channels is not None and tuple(expected_channels) != channels:
        raise DimensionError(f"weight file channels {channels} != expected {tuple(expected_channels)}")
    model = build_extractor(
        channels=channels,
        in_channels=header["in_channels"],
        kernel=header["kernel"],
        tap_levels=header["tap_levels"],
        activation=header["activation"],
    )
    cin = model.in_channels
    kk = model.kernel
    for lv, cout in zip(model.levels, channels):
        lv.w = T.Tensor(_read_array(buf, cout * cin * kk * kk, (cout, cin, kk, kk), what="conv weight"))
        lv.b = T.Tensor(_read_array(buf, cout, (cout,), what="conv bias"))
        lv.scale = T.Tensor(_read_array(buf, cout, (cout,), what="norm scale"))
        lv.shift = T.Tensor(_read_array(buf, cout, (cout,), what="norm shift"))
        lv.running_mean = _read_array(buf, cout, (cout,), "<f8", "running mean")
        lv.running_var = _read_array(buf, cout, (cout,), "<f8", "running var")
        cin = cout
    model.frozen = bool(header["frozen"])
    gaussians = None
    nxt = buf.read(4)
    if nxt == GAUSS_MAGIC:
        gaussians = read_gaussian_block(buf)
    elif nxt:
        raise FormatError(f"unexpected trailing block {nxt!r}")
    return model, gaussians
