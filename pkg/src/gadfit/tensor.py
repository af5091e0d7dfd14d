"""Float32 tensors with reverse-mode automatic differentiation.

The computation graph is implicit: every tensor produced by an operation
keeps references to its parents, a backward closure, and a monotonically
increasing sequence number.  ``Tensor.backward`` replays the closures in
reverse creation order, which is always a valid topological order because
an operation can only consume tensors that already exist.

Conventions:

* storage is contiguous float32, row-major; reductions and the softmax
  cross-entropy accumulate in float64 before rounding back;
* gradients accumulate across backward calls into the ``grad`` buffer of
  leaf tensors that have ``requires_grad``; callers reset with
  ``zero_grad`` (intermediate tensors never retain gradients);
* elementwise binary ops require identical shapes -- the only implicit
  broadcasts are the bias/channel ones built into ``conv2d``, ``linear``
  and ``frozen_norm``.
"""

from __future__ import annotations

import itertools

import numpy as np
from scipy.special import expit

from .errors import DimensionError, ParameterError

_SEQ = itertools.count()


def _as_const(x) -> np.ndarray:
    """Coerce a Tensor or array-like into a plain float32 ndarray constant."""
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float32)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None
        self._seq = next(_SEQ)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Small sugar for scalar/elementwise arithmetic; heavy ops stay functions.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -np.asarray(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad leaf.

        ``self`` must hold a single element.  Gradients of intermediate
        nodes live only for the duration of this call, so repeated calls
        add another full pass worth of gradient to the leaves (the
        documented accumulate contract).
        """
        if self.data.size != 1:
            raise DimensionError(f"backward root must be scalar, got shape {self.shape}")
        # Gather reachable nodes once; dict preserves first-visit identity.
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if id(t) in nodes:
                continue
            nodes[id(t)] = t
            stack.extend(t._parents)
        transient: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in sorted(nodes.values(), key=lambda n: n._seq, reverse=True):
            g = transient.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    t.grad += g.astype(np.float32, copy=False)
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None:
                    continue
                acc = transient.get(id(parent))
                if acc is None:
                    transient[id(parent)] = np.ascontiguousarray(pg, dtype=np.float32)
                else:
                    acc += pg


def _from_op(out_data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(out_data, dtype=np.float32)
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    out._seq = next(_SEQ)
    return out


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} vs {b.shape}")
    return _from_op(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} vs {b.shape}")
    return _from_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _from_op(a.data * s, (a,), lambda g: (g * s,))


def add_const(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float32)
    return _from_op(a.data + c, (a,), lambda g: (g,))


def mul_const(a: Tensor, c) -> Tensor:
    """Elementwise product with a constant array (broadcast against ``a``)."""
    c = np.asarray(c, dtype=np.float32)
    out = a.data * c
    if out.shape != a.shape:
        raise DimensionError(f"mul_const: constant of shape {c.shape} broadcasts {a.shape} to {out.shape}")
    return _from_op(out, (a,), lambda g: (g * c,))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    in_shape = a.shape
    return _from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(in_shape),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _from_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    lo = float(lo)
    mask = (a.data > lo).astype(np.float32)
    return _from_op(np.maximum(a.data, lo), (a,), lambda g: (g * mask,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ParameterError("sqrt of negative values")
    y = np.sqrt(a.data)
    # Guard the derivative at 0 (exact zeros stay zero in forward).
    denom = 2.0 * np.maximum(y, 1e-12)
    return _from_op(y, (a,), lambda g: (g / denom,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ParameterError("log of non-positive values")
    ad = a.data
    return _from_op(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _from_op(y, (a,), lambda g: (g * y,))


def activation(a: Tensor) -> Tensor:
    """Sigmoid-weighted linear unit x * sigmoid(x)."""
    s = expit(a.data)
    y = a.data * s
    ad = a.data

    def bwd(g):
        return (g * (s * (1.0 + ad * (1.0 - s))),)

    return _from_op(y, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = (a.data > 0).astype(np.float32)
    return _from_op(a.data * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions (float64 accumulation)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
    in_shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), in_shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, in_shape).copy(),)

    return _from_op(out, (a,), bwd)


def reduce_mean(a: Tensor) -> Tensor:
    n = a.data.size
    out = a.data.mean(dtype=np.float64)
    in_shape = a.shape
    return _from_op(out, (a,), lambda g: (np.broadcast_to(g.reshape(()) / n, in_shape).copy(),))


def spatial_mean(a: Tensor) -> Tensor:
    """Mean over the trailing two (spatial) axes: [..., H, W] -> [...]."""
    if a.data.ndim < 2:
        raise DimensionError("spatial_mean needs at least 2 dimensions")
    h, w = a.shape[-2], a.shape[-1]
    out = a.data.mean(axis=(-2, -1), dtype=np.float64)
    return _from_op(out, (a,), lambda g: (np.broadcast_to(g[..., None, None] / (h * w), a.shape).copy(),))


def reduce_max_spatial(a: Tensor) -> Tensor:
    """Max over the trailing two axes, routing the gradient to the argmax.

    Ties resolve to the first occurrence in row-major order, so the routed
    gradients always sum to the incoming gradient.
    """
    if a.data.ndim < 2:
        raise DimensionError("reduce_max_spatial needs at least 2 dimensions")
    lead = a.shape[:-2]
    hw = a.shape[-2] * a.shape[-1]
    flat = a.data.reshape(-1, hw)
    idx = flat.argmax(axis=1)
    out = flat[np.arange(flat.shape[0]), idx].reshape(lead)

    def bwd(g):
        gx = np.zeros_like(flat)
        gx[np.arange(flat.shape[0]), idx] = g.reshape(-1)
        return (gx.reshape(a.shape),)

    return _from_op(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and layers


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _from_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Row-wise affine map: x[N,D] @ w[D,K] + b[K]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise DimensionError(f"linear: shapes {x.shape}, {w.shape}, {b.shape}")
    xd, wd = x.data, w.data
    return _from_op(xd @ wd + b.data[None, :], (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, ho, wo, c, kh, kw),
        strides=(sn, sh * stride, sw * stride, sc, sh, sw),
        writeable=False,
    )
    return view.reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of x[N,C,H,W] with w[K,C,kh,kw] plus bias[K]."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and weight")
    n, c, h, wdt = x.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d: input channels {c} != weight channels {cw}")
    if b.shape != (k,):
        raise DimensionError(f"conv2d: bias shape {b.shape} != ({k},)")
    stride = int(stride)
    padding = int(padding)
    if stride < 1:
        raise ParameterError("conv2d: stride must be >= 1")
    if padding < 0:
        raise ParameterError("conv2d: padding must be >= 0")
    hp, wp = h + 2 * padding, wdt + 2 * padding
    if kh > hp or kw > wp:
        raise DimensionError("conv2d: kernel larger than padded input")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(k, c * kh * kw)
    out = cols @ wmat.T + b.data[None, :]
    out = out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)

    def bwd(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, k)
        gw = (gmat.T @ cols).reshape(k, c, kh, kw)
        gb = gmat.sum(axis=0, dtype=np.float64).astype(np.float32)
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros((n, c, hp, wp), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho * stride : stride, j : j + wo * stride : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding : padding + h, padding : padding + wdt] if padding else gxp
        return (gx, gw, gb)

    return _from_op(out, (x, w, b), bwd)


def frozen_norm(x: Tensor, running_mean, running_var, scale_t: Tensor, shift_t: Tensor, eps: float) -> Tensor:
    """Per-channel affine normalization with fixed statistics.

    ``running_mean``/``running_var`` are treated as constants: this op
    never updates them and never routes gradient into them; gradients
    reach the input, scale and shift only.
    """
    if eps <= 0:
        raise ParameterError("frozen_norm: eps must be > 0")
    m = _as_const(running_mean)
    v = _as_const(running_var)
    if np.any(v < 0):
        raise ParameterError("frozen_norm: negative running variance")
    if x.data.ndim != 4:
        raise DimensionError("frozen_norm expects [N,C,H,W]")
    c = x.shape[1]
    if m.shape != (c,) or v.shape != (c,) or scale_t.shape != (c,) or shift_t.shape != (c,):
        raise DimensionError("frozen_norm: per-channel parameter shape mismatch")
    inv = (1.0 / np.sqrt(v.astype(np.float64) + eps)).astype(np.float32)
    xc = x.data - m[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    out = xhat * scale_t.data[None, :, None, None] + shift_t.data[None, :, None, None]
    sdata = scale_t.data

    def bwd(g):
        gx = g * (sdata * inv)[None, :, None, None]
        gs = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        return (gx, gs, gb)

    return _from_op(out, (x, scale_t, shift_t), bwd)


def avg_pool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2."""
    if x.data.ndim != 4:
        raise DimensionError("avg_pool2d expects [N,C,H,W]")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2d: spatial size ({h},{w}) not divisible by 2")
    d = x.data
    out = (d[:, :, 0::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 0::2] + d[:, :, 1::2, 1::2]) * np.float32(0.25)

    def bwd(g):
        gx = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25
        return (gx,)

    return _from_op(out, (x,), bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer labels."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: shapes {logits.shape}, {labels.shape}")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    nll = -(z[np.arange(n), labels] - np.log(ez.sum(axis=1)))
    out = nll.mean()

    def bwd(g):
        gl = p.copy()
        gl[np.arange(n), labels] -= 1.0
        return ((gl * (float(g.reshape(())) / n)).astype(np.float32),)

    return _from_op(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# plain-array helper (not differentiable; scoring only)


def bilinear_resize(arr: np.ndarray, out_hw) -> np.ndarray:
    """Resize the trailing two axes with the align-corners=false convention.

    Output pixel centers map to input coordinates
    ``src = (dst + 0.5) * (in_size / out_size) - 0.5``; out-of-range
    neighbours are clamped to the edge.  Constant inputs stay constant.
    """
    arr = np.asarray(arr, dtype=np.float64)
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ParameterError(f"bilinear_resize: bad target size {(oh, ow)}")
    h, w = arr.shape[-2], arr.shape[-1]
    if (h, w) == (oh, ow):
        return arr.copy()
    ys = (np.arange(oh) + 0.5) * (h / oh) - 0.5
    xs = (np.arange(ow) + 0.5) * (w / ow) - 0.5
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = arr[..., y0c, :][..., :, x0c] * (1 - fx) + arr[..., y0c, :][..., :, x1c] * fx
    bot = arr[..., y1c, :][..., :, x0c] * (1 - fx) + arr[..., y1c, :][..., :, x1c] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]
