"""Central-difference gradient checks for every primitive op (float64 graphs)."""

import numpy as np
import pytest

from statetrack.errors import OracleFailure
from statetrack.numerics import Tensor, functional as F
from statetrack.numerics.gradcheck import check_gradients, finite_diff_grad, rel_error

TOL = 1e-6  # float64 + central differences: anything worse means a wrong formula


def check_op(build, params, tol=TOL, eps=1e-5):
    report = check_gradients(build, params, eps=eps, max_per_tensor=64)
    worst = max(report.values())
    assert worst < tol, report


def p64(rng, shape, lo=None, scale=1.0):
    data = rng.normal(0.0, scale, size=shape)
    if lo is not None:
        data = np.abs(data) + lo
    return Tensor(data, requires_grad=True, dtype=np.float64)


def test_finite_diff_grad_known_function():
    x = np.array([1.0, -2.0, 3.0])
    g = finite_diff_grad(lambda v: float((v ** 2).sum()), x)
    assert rel_error(g, 2 * x) < 1e-8


def test_finite_diff_grad_nonfinite_raises():
    with np.errstate(invalid="ignore"), pytest.raises(OracleFailure):
        finite_diff_grad(lambda v: float(np.log(v).sum()), np.array([1e-9]), eps=1e-5)


def test_grad_arithmetic(rng):
    a, b = p64(rng, (3, 4)), p64(rng, (3, 4), lo=0.5)
    check_op(lambda: F.sum(F.mul(F.add(a, b), F.sub(a, b))), [("a", a), ("b", b)])
    check_op(lambda: F.sum(F.div(a, b)), [("a", a), ("b", b)])
    check_op(lambda: F.sum(F.pow_const(b, 1.7)), [("b", b)])


def test_grad_broadcast_within_rank(rng):
    a, b = p64(rng, (3, 4)), p64(rng, (3, 1))
    check_op(lambda: F.sum(F.mul(a, b)), [("a", a), ("b", b)])


def test_grad_activations(rng):
    x = p64(rng, (4, 5))
    for op in (F.exp, F.tanh, F.sigmoid, F.softplus, F.gelu):
        check_op(lambda op=op: F.sum(op(x)), [("x", x)])
    xp = p64(rng, (4, 5), lo=0.5)
    check_op(lambda: F.sum(F.log(xp)), [("xp", xp)])
    check_op(lambda: F.sum(F.sqrt(xp)), [("xp", xp)])
    check_op(lambda: F.sum(F.abs_(xp)), [("xp", xp)])


def test_grad_minmax_clamp(rng):
    a, b = p64(rng, (6,)), p64(rng, (6,))
    check_op(lambda: F.sum(F.maximum(a, b)), [("a", a), ("b", b)])
    check_op(lambda: F.sum(F.minimum(a, b)), [("a", a), ("b", b)])
    # keep probes away from the clamp kinks
    c = Tensor(np.array([-3.0, 0.5, 3.0]), requires_grad=True, dtype=np.float64)
    check_op(lambda: F.sum(F.clamp(c, 0.0, 1.0)), [("c", c)], eps=1e-4)


def test_grad_reductions_softmax(rng):
    x = p64(rng, (3, 4, 5))
    check_op(lambda: F.sum(F.mul(F.mean(x, axis=(0, 2)), F.mean(x, axis=(0, 2)))), [("x", x)])
    check_op(lambda: F.sum(F.pow_const(F.softmax(x, axis=-1), 2.0)), [("x", x)])


def test_grad_matmul(rng):
    a, b = p64(rng, (2, 3, 4)), p64(rng, (4, 5))
    w = p64(rng, (2, 3, 5))
    check_op(lambda: F.sum(F.mul(F.matmul(a, b), w)), [("a", a), ("b", b)])
    c = p64(rng, (2, 5, 3))
    check_op(lambda: F.sum(F.matmul(c, a)), [("c", c), ("a", a)])


def test_grad_attention(rng):
    q, k, v = p64(rng, (2, 3, 4)), p64(rng, (2, 5, 4)), p64(rng, (2, 5, 4))
    w = p64(rng, (2, 3, 4))
    check_op(lambda: F.sum(F.mul(F.attention(q, k, v), w)), [("q", q), ("k", k), ("v", v)])


def test_grad_shape_ops(rng):
    x = p64(rng, (2, 3, 4))
    check_op(lambda: F.sum(F.pow_const(F.reshape(x, (6, 4)), 2.0)), [("x", x)])
    check_op(lambda: F.sum(F.pow_const(F.transpose(x, (2, 0, 1)), 2.0)), [("x", x)])
    check_op(lambda: F.sum(F.pow_const(F.flip(x, 1), 3.0)), [("x", x)])
    check_op(lambda: F.sum(F.pow_const(F.narrow(x, 2, 1, 2), 2.0)), [("x", x)])
    y = p64(rng, (2, 1, 4))
    check_op(lambda: F.sum(F.pow_const(F.broadcast_to(y, (2, 3, 4)), 2.0)), [("y", y)])
    a, b = p64(rng, (2, 2, 4)), p64(rng, (2, 1, 4))
    check_op(lambda: F.sum(F.pow_const(F.concat([a, b], axis=1), 2.0)), [("a", a), ("b", b)])


def test_grad_norms(rng):
    x = p64(rng, (2, 3, 6))
    g, b = p64(rng, (6,)), p64(rng, (6,))
    check_op(lambda: F.sum(F.pow_const(F.layer_norm(x, g, b), 2.0)), [("x", x), ("g", g), ("b", b)])
    xc = p64(rng, (2, 8, 3, 3))
    gc, bc = p64(rng, (8,)), p64(rng, (8,))
    check_op(
        lambda: F.sum(F.pow_const(F.group_norm(xc, 4, gc, bc), 2.0)),
        [("x", xc), ("g", gc), ("b", bc)],
    )


def test_grad_pool_conv(rng):
    x = p64(rng, (2, 3, 8, 8))
    check_op(lambda: F.sum(F.pow_const(F.avg_pool2d(x, 4), 2.0)), [("x", x)])
    w = p64(rng, (4, 3, 3, 3), scale=0.5)
    check_op(lambda: F.sum(F.pow_const(F.conv2d(x, w, stride=2, pad=1), 2.0)), [("x", x), ("w", w)])
    w2 = p64(rng, (4, 3, 2, 2), scale=0.5)
    check_op(lambda: F.sum(F.pow_const(F.conv2d(x, w2, stride=2, pad=0), 2.0)), [("x", x), ("w", w2)])


def test_grad_depthwise_xcorr(rng):
    x = p64(rng, (2, 3, 5, 5))
    k = p64(rng, (2, 3, 3, 3), scale=0.5)
    check_op(lambda: F.sum(F.pow_const(F.depthwise_xcorr(x, k), 2.0)), [("x", x), ("k", k)])


def test_grad_selective_scan(rng):
    b, t, d, n = 2, 5, 3, 4
    u = p64(rng, (b, t, d))
    delta = p64(rng, (b, t, d), lo=0.05)
    A = Tensor(-(np.abs(rng.normal(size=(d, n))) + 0.1), requires_grad=True, dtype=np.float64)
    Bm, Cm = p64(rng, (b, t, n)), p64(rng, (b, t, n))
    D = p64(rng, (d,))
    wt = p64(rng, (b, t, d))
    check_op(
        lambda: F.sum(F.mul(F.selective_scan(u, delta, A, Bm, Cm, D), wt)),
        [("u", u), ("delta", delta), ("A", A), ("B", Bm), ("C", Cm), ("D", D)],
        tol=5e-6,
    )
