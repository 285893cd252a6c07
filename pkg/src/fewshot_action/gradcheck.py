"""Central finite-difference gradient checking.

The numerical side never touches the tape: it re-runs the forward function on
perturbed copies of the raw parameter buffer, so it stays an independent
oracle for the analytic gradients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued f at x, elementwise."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-case elementwise relative error with a scale floor.

    Entries tiny relative to the gradient's overall magnitude are compared
    against a floor of 1e-3 * max|grad| so finite-difference noise on
    near-zero entries does not dominate the metric.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3 * scale)
    return float((np.abs(a - n) / denom).max())


def check_gradients(build_loss, params: dict[str, T.Tensor], h: float = 1e-5) -> float:
    """Compare analytic grads of `build_loss()` against finite differences.

    `build_loss` must re-read `params` each call (their .data buffers are
    perturbed in place for the numerical side). Returns the max relative
    error over every parameter element.
    """
    for p in params.values():
        p.zero_grad()
    loss = build_loss()
    T.backward(loss)
    worst = 0.0
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)

        def f(x, _p=p):
            saved = _p.data
            _p.data = x
            try:
                with T.no_grad():
                    return float(build_loss().data)
            finally:
                _p.data = saved

        numeric = numerical_gradient(f, p.data, h)
        worst = max(worst, max_rel_error(analytic, numeric))
    return worst
