"""Numerical building blocks shared by the objectives.

Everything here is written against the numpy array API only, so the same
code runs on float arrays, :class:`~diffbench.ad.Dual` and
:class:`~diffbench.ad.Var`.  Vectors are stored along axis 0; extra trailing
axes batch independent columns (e.g. one column per observation).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from diffbench.ad import primal
from diffbench.errors import DimensionError, SingularProjectionError

# theta^2 below this switches Rodrigues to its second-order Taylor form
SMALL_ANGLE_SQ = np.sqrt(np.finfo(float).eps)


def logsumexp(x, axis=None):
    """Stable ``log(sum(exp(x)))`` along ``axis`` (all entries if None)."""
    if np.size(primal(x)) == 0:
        raise DimensionError("logsumexp of an empty array")
    mx = np.max(x, axis=axis, keepdims=True)
    s = np.sum(np.exp(x - mx), axis=axis, keepdims=True)
    out = np.log(s) + mx
    if axis is None:
        return np.reshape(out, ())
    return np.sum(out, axis=axis)


def n_lower(d: int) -> int:
    return d * (d - 1) // 2


@lru_cache(maxsize=None)
def _lower_fill(d: int) -> np.ndarray:
    """0/1 map from ``l`` to the row-major flattened strictly-lower part."""
    fill = np.zeros((d * d, n_lower(d)))
    k = 0
    for col in range(d):
        for row in range(col + 1, d):
            fill[row * d + col, k] = 1.0
            k += 1
    fill.setflags(write=False)
    return fill


def lower_indices(d: int):
    """(rows, cols) of the strictly-lower entries in the order ``l`` fills them."""
    rows, cols = _lower_rc(d)
    return rows.copy(), cols.copy()


@lru_cache(maxsize=None)
def _lower_rc(d: int):
    rows, cols = [], []
    for col in range(d):
        for row in range(col + 1, d):
            rows.append(row)
            cols.append(col)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def assemble_Q(q, l):
    """Lower-triangular factor with ``exp(q)`` on the diagonal and ``l`` below.

    ``l`` fills the strictly-lower part column by column.  With ``q`` of shape
    ``(D, K)`` and ``l`` of shape ``(D(D-1)/2, K)`` this returns ``K`` stacked
    factors of shape ``(K, D, D)``.
    """
    d = np.shape(q)[0]
    if np.shape(l)[0] != n_lower(d) or np.shape(l)[1:] != np.shape(q)[1:]:
        raise DimensionError(f"l has shape {np.shape(l)}, expected ({n_lower(d)},) + {np.shape(q)[1:]}")
    if type(q) is np.ndarray and type(l) is np.ndarray and q.ndim == 1:
        Q = np.diag(np.exp(q))
        Q[_lower_rc(d)] = l
        return Q
    eye = np.eye(d)
    fill = _lower_fill(d)
    if np.ndim(q) == 1:
        return eye * np.exp(q) + np.reshape(fill @ l, (d, d))
    k = np.shape(q)[1]
    diag = np.reshape(np.transpose(np.exp(q)), (k, 1, d)) * eye
    return diag + np.reshape(np.transpose(fill @ l), (k, d, d))


def cross(a, b):
    """Cross product of 3-vectors stored along axis 0."""
    return np.stack(
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    )


def rodrigues_rotate(r, x):
    """Rotate ``x`` by angle ``|r|`` about axis ``r/|r|``.

    Near ``r = 0`` the second-order expansion ``x + r*x + r*(r*x)/2`` is used
    instead, which keeps the result smooth and differentiable there.
    """
    theta_sq = np.sum(r * r, axis=0)
    small = primal(theta_sq) < SMALL_ANGLE_SQ
    rxx = cross(r, x)
    taylor = x + rxx + 0.5 * cross(r, rxx)
    if np.all(small):
        return taylor
    # keep the unused branch finite so its adjoints stay zero, not NaN
    safe_sq = np.where(small, 1.0, theta_sq)
    theta = np.sqrt(safe_sq)
    v = r / theta
    c = np.cos(theta)
    s = np.sin(theta)
    vx = cross(v, x)
    vdotx = np.sum(v * x, axis=0)
    full = x * c + vx * s + v * (vdotx * (1.0 - c))
    if not np.any(small):
        return full
    return np.where(small, taylor, full)


def angle_axis_to_matrix(r):
    """3x3 rotation matrix of an angle-axis vector (columns are rotated basis vectors)."""
    r_col = np.reshape(r, (3, 1))
    return rodrigues_rotate(r_col, np.eye(3))


def radial_distort(kappa, u):
    """Scale ``u`` by ``1 + k1*|u|^2 + k2*|u|^4``."""
    rsq = np.sum(u * u, axis=0)
    return u * (1.0 + kappa[0] * rsq + kappa[1] * rsq * rsq)


def p2e(x):
    """Perspective division of the first two coordinates by the third."""
    if np.any(np.asarray(primal(x))[2] == 0.0):
        raise SingularProjectionError("point has zero depth")
    return x[0:2] / x[2]


# camera parameter layout: r(3) c(3) f(1) x0(2) kappa(2)
CAM_R = slice(0, 3)
CAM_C = slice(3, 6)
CAM_F = 6
CAM_X0 = slice(7, 9)
CAM_KAPPA = slice(9, 11)
N_CAM_PARAMS = 11


def project(cam, x):
    """Pixel position of world point ``x`` seen by camera ``cam`` (11 params on axis 0)."""
    xr = rodrigues_rotate(cam[CAM_R], x - cam[CAM_C])
    u = radial_distort(cam[CAM_KAPPA], p2e(xr))
    return u * cam[CAM_F] + cam[CAM_X0]
