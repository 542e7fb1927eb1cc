"""Central finite-difference checking for taped gradients.

The checker builds float64 inputs, runs the function under a fresh tape,
and compares every analytic input gradient against a two-sided difference
quotient coordinate by coordinate. Functions with kinks (relu, hard
sigmoid boundaries, max ties) accept a guard that rejects sample points
whose difference stencil would straddle a kink.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward

DEFAULT_STEP = 1e-5


def relative_error(a, n):
    return np.abs(a - n) / np.maximum.reduce([np.abs(a), np.abs(n), np.ones_like(a)])


def numeric_gradient(fn, tensors, which, step=DEFAULT_STEP):
    """Central differences of scalar fn w.r.t. tensors[which], elementwise."""
    t = tensors[which]
    grad = np.zeros_like(t.data)
    flat = t.data.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(fn(*tensors).data)
        flat[i] = orig - step
        f_minus = float(fn(*tensors).data)
        flat[i] = orig
        gflat[i] = (f_plus - f_minus) / (2.0 * step)
    return grad


def check_gradients(fn, tensors, rtol=1e-6, step=DEFAULT_STEP):
    """Compare taped gradients of scalar ``fn(*tensors)`` with central differences.

    Returns (ok, worst_relative_error). Tensors must be float64 for the
    stated tolerance to be meaningful.
    """
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn(*tensors)
    backward(tape, loss)
    worst = 0.0
    for i, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_gradient(fn, tensors, i, step=step)
        err = relative_error(analytic, numeric)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst <= rtol, worst


def run_point_suite(make_case, n_points, seed, rtol=1e-6, step=DEFAULT_STEP,
                    max_retries=50):
    """Run ``n_points`` independent gradient checks.

    ``make_case(rng)`` returns ``(fn, tensors)`` or ``None`` to reject the
    sampled point (kink guard); rejected points are re-drawn. Returns
    (n_failures, worst_error).
    """
    rng = np.random.default_rng(seed)
    failures = 0
    worst = 0.0
    for _ in range(n_points):
        case = None
        for _ in range(max_retries):
            case = make_case(rng)
            if case is not None:
                break
        if case is None:
            raise RuntimeError("kink guard rejected every sampled point")
        fn, tensors = case
        ok, err = check_gradients(fn, tensors, rtol=rtol, step=step)
        worst = max(worst, err)
        if not ok:
            failures += 1
    return failures, worst


def uniform_tensors(rng, shapes, scale=1.0, dtype=np.float64):
    return [
        Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype))
        for shape in shapes
    ]
