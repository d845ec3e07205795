"""Central finite differences, the inexact baseline."""

from __future__ import annotations

import numpy as np

from diffbench.errors import DimensionError

# cbrt(eps) balances O(h^2) truncation against O(eps/h) round-off.
STEP_SCALE = np.cbrt(np.finfo(float).eps)


def fd_steps(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return STEP_SCALE * np.maximum(1.0, np.abs(x))


def grad_fd(f, x) -> np.ndarray:
    """Central-difference derivative of ``f`` at ``x``.

    Costs ``2n`` evaluations plus one reference evaluation that fixes the
    output shape.  Returns a flat gradient for scalar ``f`` and an ``(m, n)``
    Jacobian otherwise.
    """
    x = np.array(x, dtype=float)
    n = x.size
    f0 = np.asarray(f(x), dtype=float)
    h = fd_steps(x).reshape(-1)
    cols = np.empty((f0.size, n))
    for j in range(n):
        xp = x.copy()
        xm = x.copy()
        xp.flat[j] += h[j]
        xm.flat[j] -= h[j]
        # use the representable step actually taken
        step = xp.flat[j] - xm.flat[j]
        cols[:, j] = (np.asarray(f(xp), dtype=float) - np.asarray(f(xm), dtype=float)).reshape(-1) / step
    return cols[0] if f0.ndim == 0 else cols


def fd_directional(f, x, seed) -> np.ndarray:
    """Central differences along the columns of ``seed`` (n x s); returns ``(m, s)``."""
    x = np.array(x, dtype=float)
    seed = np.asarray(seed, dtype=float)
    if seed.ndim == 1:
        seed = seed.reshape(-1, 1)
    if seed.shape[0] != x.size:
        raise DimensionError(f"seed has {seed.shape[0]} rows, x has {x.size} entries")
    flat = x.reshape(-1)
    out = []
    for j in range(seed.shape[1]):
        d = seed[:, j]
        support = d != 0
        h = STEP_SCALE * max(1.0, float(np.max(np.abs(flat[support]), initial=0.0)))
        fp = np.asarray(f((flat + h * d).reshape(x.shape)), dtype=float)
        fm = np.asarray(f((flat - h * d).reshape(x.shape)), dtype=float)
        out.append(((fp - fm) / (2.0 * h)).reshape(-1))
    return np.array(out).T
