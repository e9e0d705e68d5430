"""Independent numerical oracles shared by the test suite.

These deliberately avoid the library's reverse-mode machinery: gradients are
checked against central finite differences computed by re-running a plain
forward function, and statistical values against closed forms.
"""

from __future__ import annotations

import numpy as np

FD_STEP = 1e-5


def central_difference(f, x, step=FD_STEP):
    """∂f/∂x for scalar-valued f via central differences, one coordinate at a time.

    `f` maps a float64 array to a python float and must not mutate its input.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.copy().reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = f(xf.reshape(x.shape))
        xf[i] = orig - step
        lo = f(xf.reshape(x.shape))
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * step)
    return grad


def max_relative_error(a, b, floor=1e-9):
    """max |a-b| / max(|a|, |b|, floor), elementwise; the floor guards near-zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def gini_pairwise(values):
    """O(n²) mean-absolute-difference Gini, straight from the definition."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    total = np.abs(v.reshape(-1, 1) - v.reshape(1, -1)).sum()
    return total / (2 * n * n * v.mean())


def linf_distance_to_hyperplane(w, b, x):
    """Exact L∞ distance from x to {z : w·z + b = 0}: |w·x+b| / ||w||₁."""
    w = np.asarray(w, dtype=np.float64)
    return abs(float(w @ x + b)) / np.abs(w).sum()
