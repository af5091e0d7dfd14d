import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gadfit import tensor as T
from gadfit.errors import DimensionError, ParameterError

from oracles import bilinear_scalar, finite_difference, gradcheck, naive_conv2d, silu_scalar


def rand(rng, *shape):
    return rng.normal(size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
# conv2d


def test_conv_ones_sums_to_nine():
    x = T.Tensor(np.ones((1, 1, 3, 3)))
    w = T.Tensor(np.ones((1, 1, 3, 3)))
    b = T.Tensor(np.zeros(1))
    out = T.conv2d(x, w, b)
    assert out.shape == (1, 1, 1, 1)
    assert out.item() == pytest.approx(9.0)


def test_conv_identity_kernel_preserves_input():
    rng = np.random.default_rng(0)
    x = rand(rng, 2, 3, 5, 5)
    w = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(3)), stride=1, padding=1)
    np.testing.assert_allclose(out.data, x, rtol=0, atol=0)


def test_conv_matches_naive_oracle():
    rng = np.random.default_rng(1)
    x = rand(rng, 2, 3, 8, 8)
    w = rand(rng, 4, 3, 3, 3)
    b = rand(rng, 4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
    ref = naive_conv2d(x, w, b)
    assert np.abs(out - ref).max() <= 1e-6 * max(np.abs(ref).max(), 1.0)


def test_conv_random_shapes_match_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 4))
        k = int(rng.integers(1, 5))
        kh = int(rng.integers(1, 4))
        kw = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        h = int(rng.integers(kh, kh + 5))
        w = int(rng.integers(kw, kw + 5))
        x = rand(rng, n, c, h, w)
        wt = rand(rng, k, c, kh, kw)
        b = rand(rng, k)
        out = T.conv2d(T.Tensor(x), T.Tensor(wt), T.Tensor(b), stride, padding).data
        ref = naive_conv2d(x, wt, b, stride, padding)
        assert out.shape == ref.shape
        assert np.abs(out - ref).max() <= 1e-5 * max(np.abs(ref).max(), 1.0)


def test_conv_channel_mismatch_raises():
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))), T.Tensor(np.zeros(1)))


def test_conv_kernel_too_large_raises():
    with pytest.raises(DimensionError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 5, 5))), T.Tensor(np.zeros(1)))


# ---------------------------------------------------------------------------
# frozen_norm


def test_frozen_norm_identity():
    rng = np.random.default_rng(3)
    x = rand(rng, 2, 4, 3, 3)
    c = np.zeros(4, dtype=np.float32)
    out = T.frozen_norm(T.Tensor(x), c, np.ones(4), T.Tensor(np.ones(4)), T.Tensor(c), eps=1e-5)
    np.testing.assert_allclose(out.data, x, atol=1e-4)


def test_frozen_norm_centered_input_gives_shift():
    mean = np.array([1.0, -2.0], dtype=np.float32)
    x = np.broadcast_to(mean[None, :, None, None], (3, 2, 4, 4)).copy()
    shift = np.array([0.5, 0.25], dtype=np.float32)
    out = T.frozen_norm(T.Tensor(x), mean, np.ones(2), T.Tensor(np.ones(2)), T.Tensor(shift), eps=1e-5)
    np.testing.assert_allclose(out.data, np.broadcast_to(shift[None, :, None, None], x.shape), atol=1e-6)


def test_frozen_norm_matches_scalar_formula():
    rng = np.random.default_rng(4)
    x = rand(rng, 2, 3, 4, 4)
    m = rand(rng, 3)
    v = np.abs(rand(rng, 3)) + 0.1
    s = rand(rng, 3)
    b = rand(rng, 3)
    eps = 1e-5
    out = T.frozen_norm(T.Tensor(x), m, v, T.Tensor(s), T.Tensor(b), eps).data
    ref = np.zeros_like(x, dtype=np.float64)
    for n in range(2):
        for c in range(3):
            for i in range(4):
                for j in range(4):
                    ref[n, c, i, j] = (x[n, c, i, j] - m[c]) / np.sqrt(v[c] + eps) * s[c] + b[c]
    np.testing.assert_allclose(out, ref, rtol=1e-5, atol=1e-6)


def test_frozen_norm_bad_eps():
    x = T.Tensor(np.zeros((1, 1, 2, 2)))
    one = T.Tensor(np.ones(1))
    with pytest.raises(ParameterError):
        T.frozen_norm(x, np.zeros(1), np.ones(1), one, one, eps=0.0)


# ---------------------------------------------------------------------------
# activation


def test_activation_values():
    out = T.activation(T.Tensor(np.array([0.0, 10.0])))
    assert out.data[0] == pytest.approx(0.0, abs=1e-8)
    assert out.data[1] == pytest.approx(silu_scalar(10.0), abs=1e-4)
    assert out.data[1] == pytest.approx(9.99955, abs=1e-4)


def test_activation_gradient_at_zero():
    x = T.Tensor(np.zeros(1), requires_grad=True)
    T.reduce_sum(T.activation(x)).backward()
    assert x.grad[0] == pytest.approx(0.5, abs=1e-6)


# ---------------------------------------------------------------------------
# backward contract


def test_backward_linear_case():
    rng = np.random.default_rng(5)
    xv = rand(rng, 6)
    w = T.Tensor(rand(rng, 6), requires_grad=True)
    loss = T.reduce_sum(T.mul_const(w, xv))
    loss.backward()
    np.testing.assert_allclose(w.grad, xv, rtol=1e-6)


def test_backward_accumulates_across_calls():
    w = T.Tensor(np.array([2.0]), requires_grad=True)
    x = T.Tensor(np.array([3.0]))

    def loss():
        return T.reduce_sum(T.mul(w, x))

    l1 = loss()
    l1.backward()
    first = w.grad.copy()
    l2 = loss()
    l2.backward()
    np.testing.assert_allclose(w.grad, 2 * first)
    w.zero_grad()
    loss().backward()
    np.testing.assert_allclose(w.grad, first)


def test_backward_same_graph_twice_doubles():
    w = T.Tensor(np.array([2.0]), requires_grad=True)
    loss = T.reduce_sum(T.mul(w, w))
    loss.backward()
    g1 = w.grad.copy()
    loss.backward()
    np.testing.assert_allclose(w.grad, 2 * g1)


def test_backward_non_scalar_raises():
    w = T.Tensor(np.zeros((2, 2)), requires_grad=True)
    with pytest.raises(DimensionError):
        T.scale(w, 2.0).backward()


def test_gradients_of_unused_leaves_stay_zero():
    used = T.Tensor(np.ones(3), requires_grad=True)
    unused = T.Tensor(np.ones(3), requires_grad=True)
    unused.zero_grad()
    T.reduce_mean(used).backward()
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


# ---------------------------------------------------------------------------
# op-by-op gradient checks against finite differences


def _project_loss(op, arrays, rng, requires=None):
    """Build a scalar loss out = mean(R * op(tensors)) for gradcheck."""
    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    proj = rng.normal(size=out.shape).astype(np.float32)

    def build():
        ts = [T.Tensor(a, requires_grad=True) for a in arrays]
        o = op(*ts)
        loss = T.reduce_mean(T.mul_const(o, proj))
        pick = requires if requires is not None else range(len(ts))
        return loss, [(arrays[i], ts[i]) for i in pick]

    return build


OP_CASES = [
    ("add", lambda a, b: T.add(a, b), [(3, 4), (3, 4)], {}),
    ("sub", lambda a, b: T.sub(a, b), [(3, 4), (3, 4)], {}),
    ("mul", lambda a, b: T.mul(a, b), [(3, 4), (3, 4)], {}),
    ("scale", lambda a: T.scale(a, -1.7), [(2, 5)], {}),
    ("matmul", lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)], {}),
    ("linear", lambda x, w, b: T.linear(x, w, b), [(5, 3), (3, 2), (2,)], {}),
    ("conv", lambda x, w, b: T.conv2d(x, w, b, 1, 1), [(2, 2, 4, 4), (3, 2, 3, 3), (3,)], {}),
    ("conv_s2", lambda x, w, b: T.conv2d(x, w, b, 2, 0), [(1, 2, 6, 6), (2, 2, 3, 3), (2,)], {}),
    ("activation", lambda a: T.activation(a), [(4, 4)], {}),
    ("relu", lambda a: T.relu(a), [(4, 4)], {"shift": 0.3}),
    ("exp", lambda a: T.exp(a), [(3, 3)], {}),
    ("log", lambda a: T.log(a), [(3, 3)], {"positive": True}),
    ("sqrt", lambda a: T.sqrt(a), [(3, 3)], {"positive": True}),
    ("absolute", lambda a: T.absolute(a), [(3, 3)], {"shift": 0.4}),
    ("clamp", lambda a: T.clamp_min(a, 0.25), [(3, 3)], {"positive": True}),
    ("avg_pool", lambda a: T.avg_pool2d(a), [(2, 3, 4, 4)], {}),
    ("reshape", lambda a: T.reshape(a, (6, 2)), [(3, 4)], {}),
    ("permute", lambda a: T.permute(a, (1, 0, 2)), [(2, 3, 4)], {}),
    ("reduce_sum_ax", lambda a: T.reduce_sum(a, axis=1), [(3, 4, 2)], {}),
    ("spatial_mean", lambda a: T.spatial_mean(a), [(2, 3, 4, 4)], {}),
]


@pytest.mark.parametrize("name,op,shapes,opts", OP_CASES, ids=[c[0] for c in OP_CASES])
@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_op_gradients_match_finite_differences(name, op, shapes, opts, seed):
    rng = np.random.default_rng([seed, hash(name) % (2**31)])
    arrays = []
    for s in shapes:
        a = rng.normal(size=s).astype(np.float32)
        if opts.get("positive"):
            a = np.abs(a) + 0.5
        if opts.get("shift"):
            # keep points away from the kink so finite differences are valid
            a = np.where(np.abs(a) < opts["shift"], a + np.sign(a + 0.01), a).astype(np.float32)
        arrays.append(a)
    gradcheck(_project_loss(op, arrays, rng))


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_reduce_ops_gradients(seed):
    rng = np.random.default_rng([10, seed])
    a = rng.normal(size=(3, 5)).astype(np.float32)

    def build_mean():
        t = T.Tensor(a, requires_grad=True)
        return T.reduce_mean(t), [(a, t)]

    gradcheck(build_mean)

    b = rng.normal(size=(2, 4, 4)).astype(np.float32)

    def build_max():
        t = T.Tensor(b, requires_grad=True)
        return T.reduce_mean(T.reduce_max_spatial(t)), [(b, t)]

    gradcheck(build_max)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_softmax_cross_entropy_gradient(seed):
    rng = np.random.default_rng([11, seed])
    logits = rng.normal(size=(5, 4)).astype(np.float32)
    labels = rng.integers(0, 4, size=5)

    def build():
        t = T.Tensor(logits, requires_grad=True)
        return T.softmax_cross_entropy(t, labels), [(logits, t)]

    gradcheck(build)


def test_reduce_max_routes_gradient_to_argmax_only():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    t = T.Tensor(a, requires_grad=True)
    out = T.reduce_max_spatial(t)
    loss = T.reduce_sum(out)
    loss.backward()
    # exactly one nonzero per (n, c) slice, each equal to the incoming gradient
    g = t.grad.reshape(6, 16)
    assert np.count_nonzero(g) == 6
    np.testing.assert_allclose(g.sum(axis=1), np.ones(6))
    flat_idx = g.argmax(axis=1)
    np.testing.assert_array_equal(flat_idx, a.reshape(6, 16).argmax(axis=1))


# ---------------------------------------------------------------------------
# determinism and NaN hygiene


def test_ops_deterministic():
    rng = np.random.default_rng(13)
    x = rand(rng, 2, 3, 8, 8)
    w = rand(rng, 4, 3, 3, 3)
    b = rand(rng, 4)
    r1 = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1, 1).data
    r2 = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), 1, 1).data
    np.testing.assert_array_equal(r1, r2)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_forward_chain_produces_no_nan(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 4, 4)).astype(np.float32)
    w = rng.normal(size=(2, 2, 3, 3)).astype(np.float32)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(np.zeros(2, dtype=np.float32)), 1, 1)
    out = T.activation(out)
    out = T.avg_pool2d(out)
    val = T.reduce_mean(out)
    assert np.isfinite(val.data).all()
    assert not np.isnan(out.data).any()


# ---------------------------------------------------------------------------
# bilinear resize


def test_bilinear_identity_and_constant():
    rng = np.random.default_rng(14)
    a = rng.random((5, 7))
    np.testing.assert_array_equal(T.bilinear_resize(a, (5, 7)), a)
    const = np.full((3, 3), 2.5)
    np.testing.assert_allclose(T.bilinear_resize(const, (9, 13)), np.full((9, 13), 2.5), rtol=1e-12)


def test_bilinear_matches_scalar_oracle():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    out = T.bilinear_resize(a, (4, 4))
    ref = bilinear_scalar(a, (4, 4))
    np.testing.assert_allclose(out, ref, atol=1e-12)
    rng = np.random.default_rng(15)
    for _ in range(10):
        h, w = rng.integers(1, 7, size=2)
        oh, ow = rng.integers(1, 9, size=2)
        arr = rng.random((h, w))
        np.testing.assert_allclose(T.bilinear_resize(arr, (oh, ow)), bilinear_scalar(arr, (oh, ow)), atol=1e-12)


def test_bilinear_preserves_bounds():
    rng = np.random.default_rng(16)
    a = rng.random((4, 6))
    out = T.bilinear_resize(a, (13, 5))
    assert out.max() <= a.max() + 1e-12
    assert out.min() >= a.min() - 1e-12
