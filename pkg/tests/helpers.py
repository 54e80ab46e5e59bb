"""Independent oracles shared by the test modules."""

from __future__ import annotations

import numpy as np


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        up = f()
        flat[i] = old - step
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * step)
    return grad


def assert_grad_close(analytic, numeric, rel=1e-3, abs_floor=1e-5, name=""):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    diff = np.abs(analytic - numeric)
    bound = np.maximum(rel * np.maximum(np.abs(analytic), np.abs(numeric)), abs_floor)
    bad = diff > bound
    assert not bad.any(), f"{name}: {bad.sum()} entries off, worst diff {diff.max():.3g}"


def scalar_gru(x_seq, W, U, b, h0=None):
    """Step-by-step GRU using plain Python floats.

    ``W[g]`` is a list of rows indexed [input][hidden], ``U[g]`` [hidden][hidden].
    """
    import math

    hidden = len(b["z"])
    h = [0.0] * hidden if h0 is None else list(h0)
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    for x in x_seq:
        def pre(g, hv):
            return [
                b[g][j] + sum(x[i] * W[g][i][j] for i in range(len(x))) + sum(hv[i] * U[g][i][j] for i in range(hidden))
                for j in range(hidden)
            ]

        z = [sig(v) for v in pre("z", h)]
        r = [sig(v) for v in pre("r", h)]
        rh = [r[j] * h[j] for j in range(hidden)]
        n = [math.tanh(v) for v in pre("n", rh)]
        h = [z[j] * h[j] + (1 - z[j]) * n[j] for j in range(hidden)]
    return h
