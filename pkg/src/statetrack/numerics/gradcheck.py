"""Finite-difference gradient oracle and checking harness.

``finite_diff_grad`` is the independent reference: central differences per
element of a scalar-valued function of one ndarray. ``check_gradients`` runs
analytic backward once and compares sampled elements of every parameter
against the oracle, reporting the worst relative error per parameter.
"""

import numpy as np

from ..errors import OracleFailure


def finite_diff_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at x, elementwise.

    f: callable(ndarray) -> float. x: ndarray (not mutated). Non-finite
    function values raise OracleFailure naming the element index.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            idx = np.unravel_index(i, x.shape)
            raise OracleFailure(f"non-finite value probing element {idx}: f+={fp} f-={fm}")
        gf[i] = (fp - fm) / (2 * eps)
    return g


def rel_error(a, b, floor=1e-6):
    """|a-b| / max(|a|, |b|, floor), elementwise max over arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_gradients(build_fn, named_params, eps=1e-5, max_per_tensor=12, rng=None):
    """Compare analytic grads of a scalar graph against central differences.

    build_fn: rebuilds the forward graph from current parameter .data and
    returns the scalar loss Tensor. named_params: iterable of (name, Tensor).
    Samples up to max_per_tensor elements per parameter (all, if fewer).
    Returns {name: max relative error}.
    """
    named_params = list(named_params)
    if rng is None:
        rng = np.random.default_rng(0)
    for _, p in named_params:
        p.grad = None
    loss = build_fn()
    loss.backward()
    analytic = {}
    for name, p in named_params:
        if p.grad is None:
            raise OracleFailure(f"parameter {name} received no gradient")
        analytic[name] = np.asarray(p.grad, dtype=np.float64).copy()

    report = {}
    for name, p in named_params:
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_per_tensor else rng.choice(n, max_per_tensor, replace=False)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = build_fn().item()
            flat[i] = orig - eps
            fm = build_fn().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleFailure(f"non-finite loss probing {name}[{i}]")
            num = (fp - fm) / (2 * eps)
            worst = max(worst, rel_error(analytic[name].reshape(-1)[i], num))
        report[name] = worst
    return report
