"""Bundle adjustment residuals and their sparse Jacobian.

Each observation ``j`` of point ``b`` by camera ``a`` contributes the residual
``[w (m - project(cam_a, x_b)); 1 - w^2]``.  Its 3x15 block depends on
``[r, c, f, x0, kappa]`` (11), the point (3) and the weight (1), in that
column order.  Blocks are computed for all observations at once by
batching along a trailing axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffbench.ad import Dual, fd_steps, grad_reverse, record
from diffbench.errors import DimensionError, SingularProjectionError
from diffbench.kernels import (
    N_CAM_PARAMS,
    SMALL_ANGLE_SQ,
    project,
    rodrigues_rotate,
)
from diffbench.sparsity import SparseJacobian

BLOCK_COLS = 15
ENGINES = ("manual", "forward", "reverse", "fd")


@dataclass(frozen=True)
class CameraParams:
    r: np.ndarray
    c: np.ndarray
    f: float
    x0: np.ndarray
    kappa: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.r, self.c, [self.f], self.x0, self.kappa]).astype(float)

    @classmethod
    def from_array(cls, p) -> "CameraParams":
        p = np.asarray(p, dtype=float)
        if p.shape != (N_CAM_PARAMS,):
            raise DimensionError(f"camera needs {N_CAM_PARAMS} values, got shape {p.shape}")
        return cls(p[0:3], p[3:6], float(p[6]), p[7:9], p[9:11])


@dataclass(frozen=True)
class BaInstance:
    cams: np.ndarray  # (11, n_cams)
    points: np.ndarray  # (3, n_pts)
    weights: np.ndarray  # (n_obs,)
    obs: np.ndarray  # (n_obs, 2) camera index, point index
    measurements: np.ndarray  # (2, n_obs)

    def __post_init__(self):
        n = self.n_obs
        if n < 1:
            raise DimensionError("need at least one observation")
        if self.cams.shape[0] != N_CAM_PARAMS or self.points.shape[0] != 3:
            raise DimensionError("cams must be (11, n_cams) and points (3, n_pts)")
        if self.weights.shape != (n,) or self.measurements.shape != (2, n) or self.obs.shape != (n, 2):
            raise DimensionError("weights, obs and measurements disagree on n_obs")
        if self.obs.min() < 0 or self.obs[:, 0].max() >= self.n_cams or self.obs[:, 1].max() >= self.n_pts:
            raise DimensionError("observation index out of range")

    @property
    def n_cams(self) -> int:
        return self.cams.shape[1]

    @property
    def n_pts(self) -> int:
        return self.points.shape[1]

    @property
    def n_obs(self) -> int:
        return self.obs.shape[0]

    @property
    def n_cols(self) -> int:
        return N_CAM_PARAMS * self.n_cams + 3 * self.n_pts + self.n_obs

    def block_params(self) -> np.ndarray:
        """Per-observation inputs stacked as (15, n_obs)."""
        return np.concatenate(
            [self.cams[:, self.obs[:, 0]], self.points[:, self.obs[:, 1]], self.weights[None, :]]
        )


def ba_residual(cam, x, w, m):
    """``[w (m - project(cam, x)); 1 - w^2]`` (columns batch observations)."""
    proj = project(cam, x)
    return np.stack([w * (m[0] - proj[0]), w * (m[1] - proj[1]), 1.0 - w * w])


def _packed_residual(P, m):
    return ba_residual(P[0:11], P[11:14], P[14], m)


def residuals(inst: BaInstance) -> np.ndarray:
    """All residuals, shape (3, n_obs)."""
    return _packed_residual(inst.block_params(), inst.measurements)


def residual_vector(inst: BaInstance) -> np.ndarray:
    """Residuals in Jacobian row order: reprojection rows, then weight rows."""
    e = residuals(inst)
    return np.concatenate([e[:2].T.reshape(-1), e[2]])


# block engines: P (15, n), m (2, n) -> blocks (n, 3, 15)


def blocks_forward(P, m) -> np.ndarray:
    n = P.shape[1]
    seed = np.broadcast_to(np.eye(BLOCK_COLS)[:, :, None], (BLOCK_COLS, BLOCK_COLS, n))
    e = _packed_residual(Dual(P, seed), m)
    return np.transpose(e.derivs, (2, 1, 0))


def blocks_reverse_prepare(P, m):
    """Record once; the returned callable replays at new inputs and sweeps 3 times."""
    tape, _ = record(lambda p: _packed_residual(p, m), P)

    def run(P_new=None):
        t = tape if P_new is None else tape.replay(P_new)
        n = P.shape[1]
        rows = []
        for i in range(3):
            seed = np.zeros((3, n))
            seed[i] = 1.0
            rows.append(grad_reverse(t, seed).reshape(BLOCK_COLS, n))
        return np.transpose(np.stack(rows), (2, 0, 1))

    return run


def blocks_reverse(P, m) -> np.ndarray:
    return blocks_reverse_prepare(P, m)()


def blocks_fd(P, m) -> np.ndarray:
    h = fd_steps(P)
    cols = []
    for j in range(BLOCK_COLS):
        Pp = P.copy()
        Pm = P.copy()
        Pp[j] += h[j]
        Pm[j] -= h[j]
        step = Pp[j] - Pm[j]
        cols.append((_packed_residual(Pp, m) - _packed_residual(Pm, m)) / step)
    return np.transpose(np.stack(cols), (2, 1, 0))


def _skew(v):
    """Batched cross-product matrices: v (3, n) -> (n, 3, 3)."""
    z = np.zeros(v.shape[1])
    return np.stack(
        [
            np.stack([z, -v[2], v[1]], axis=-1),
            np.stack([v[2], z, -v[0]], axis=-1),
            np.stack([-v[1], v[0], z], axis=-1),
        ],
        axis=1,
    )


def blocks_manual(P, m) -> np.ndarray:
    """Hand-derived 3x15 blocks."""
    n = P.shape[1]
    r, c, f, x0, kap, X, w = P[0:3], P[3:6], P[6], P[7:9], P[9:11], P[11:14], P[14]
    xc = X - c
    eye = np.eye(3)
    theta_sq = np.sum(r * r, axis=0)
    small = theta_sq < SMALL_ANGLE_SQ
    Kr = _skew(r)
    Kp = _skew(xc)

    # small-angle branch: R = I + K + K^2/2
    R = eye + Kr + 0.5 * Kr @ Kr
    rp = np.sum(r * xc, axis=0)
    dR_small = (
        -Kp
        + 0.5 * (rp[:, None, None] * eye + np.einsum("in,jn->nij", r, xc) - 2.0 * np.einsum("in,jn->nij", xc, r))
    )
    dxr_dr = dR_small
    if not small.all():
        big = ~small
        th = np.sqrt(theta_sq[big])
        v = r[:, big] / th
        cth, sth = np.cos(th), np.sin(th)
        Kv = _skew(v)
        Rb = cth[:, None, None] * eye + sth[:, None, None] * Kv + (1 - cth)[:, None, None] * np.einsum("in,jn->nij", v, v)
        R = R.copy()
        R[big] = Rb
        rrT = np.einsum("in,jn->nij", r[:, big], r[:, big])
        inner = rrT + (np.transpose(Rb, (0, 2, 1)) - eye) @ Kr[big]
        dxr_dr = dxr_dr.copy()
        dxr_dr[big] = -Rb @ Kp[big] @ inner / theta_sq[big][:, None, None]

    xr = np.einsum("nij,jn->in", R, xc)
    z = xr[2]
    u = xr[:2] / z
    du_dxr = np.zeros((n, 2, 3))
    du_dxr[:, 0, 0] = 1.0 / z
    du_dxr[:, 1, 1] = 1.0 / z
    du_dxr[:, :, 2] = -(u / z).T
    s = np.sum(u * u, axis=0)
    fac = 1.0 + kap[0] * s + kap[1] * s * s
    ud = u * fac
    dfac_du = 2.0 * (kap[0] + 2.0 * kap[1] * s) * u  # (2, n)
    dud_du = fac[:, None, None] * np.eye(2) + np.einsum("in,jn->nij", u, dfac_du)
    proj = f * ud + x0

    A = f[:, None, None] * (dud_du @ du_dxr)  # d proj / d xr, (n, 2, 3)
    J = np.zeros((n, 3, BLOCK_COLS))
    top = np.empty((n, 2, 14))
    top[:, :, 0:3] = A @ dxr_dr
    top[:, :, 3:6] = -(A @ R)
    top[:, :, 6] = ud.T
    top[:, :, 7:9] = np.eye(2)
    top[:, :, 9] = (f * u * s).T
    top[:, :, 10] = (f * u * s * s).T
    top[:, :, 11:14] = A @ R
    J[:, :2, :14] = -w[:, None, None] * top
    J[:, :2, 14] = (m - proj).T
    J[:, 2, 14] = -2.0 * w
    return J


BLOCK_ENGINES = {
    "manual": blocks_manual,
    "forward": blocks_forward,
    "reverse": blocks_reverse,
    "fd": blocks_fd,
}


def ba_block_jacobian(cam, x, w, m, engine: str = "forward") -> np.ndarray:
    """3x15 Jacobian of one residual."""
    cam = cam.as_array() if isinstance(cam, CameraParams) else np.asarray(cam, dtype=float)
    P = np.concatenate([cam, np.asarray(x, dtype=float), [float(w)]])[:, None]
    return BLOCK_ENGINES[engine](P, np.asarray(m, dtype=float).reshape(2, 1))[0]


def ba_blocks(inst: BaInstance, engine: str = "manual") -> np.ndarray:
    P = inst.block_params()
    depth = rodrigues_rotate(P[0:3], P[11:14] - P[3:6])[2]
    bad = np.flatnonzero(depth == 0.0)
    if bad.size:
        raise SingularProjectionError(f"observation {bad[0]} has a point at zero depth")
    return BLOCK_ENGINES[engine](P, inst.measurements)


def sparse_layout(inst: BaInstance):
    """(rows, cols) of all structural nonzeros, 31 per observation.

    Per observation ``j``: 15 entries on each of rows ``2j`` and ``2j+1``,
    then one entry on row ``2 n_obs + j``.
    """
    n = inst.n_obs
    j = np.arange(n)
    block_cols = block_columns(inst)
    rows = np.concatenate(
        [np.repeat(2 * j, BLOCK_COLS), np.repeat(2 * j + 1, BLOCK_COLS), 2 * n + j]
    )
    cols = np.concatenate([block_cols.reshape(-1), block_cols.reshape(-1), block_cols[:, -1]])
    return rows, cols


def block_columns(inst: BaInstance) -> np.ndarray:
    """(n_obs, 15) global column of each block column: camera, point, weight."""
    cam_cols = N_CAM_PARAMS * inst.obs[:, 0][:, None] + np.arange(N_CAM_PARAMS)
    pt_cols = N_CAM_PARAMS * inst.n_cams + 3 * inst.obs[:, 1][:, None] + np.arange(3)
    w_cols = (N_CAM_PARAMS * inst.n_cams + 3 * inst.n_pts + np.arange(inst.n_obs))[:, None]
    return np.concatenate([cam_cols, pt_cols, w_cols], axis=1)


def assemble(inst: BaInstance, blocks: np.ndarray) -> SparseJacobian:
    """Scatter (n_obs, 3, 15) blocks into the global sparse Jacobian."""
    rows, cols = sparse_layout(inst)
    vals = np.concatenate([blocks[:, 0, :].reshape(-1), blocks[:, 1, :].reshape(-1), blocks[:, 2, 14]])
    return SparseJacobian(2 * inst.n_obs + inst.n_obs, inst.n_cols, rows, cols, vals, layout="ba")


def ba_jacobian(inst: BaInstance, engine: str = "manual") -> SparseJacobian:
    return assemble(inst, ba_blocks(inst, engine))


def full_parameter_vector(inst: BaInstance) -> np.ndarray:
    """Cameras, then points, then weights: the Jacobian's column order."""
    return np.concatenate([inst.cams.T.reshape(-1), inst.points.T.reshape(-1), inst.weights])


def residual_function(inst: BaInstance):
    """Stacked residual vector as a function of the full parameter vector."""
    nc, npt, n = inst.n_cams, inst.n_pts, inst.n_obs
    ci, pi = inst.obs[:, 0], inst.obs[:, 1]
    m = inst.measurements

    def f(theta):
        cams = np.transpose(np.reshape(theta[: 11 * nc], (nc, 11)))
        pts = np.transpose(np.reshape(theta[11 * nc : 11 * nc + 3 * npt], (npt, 3)))
        w = theta[11 * nc + 3 * npt :]
        e = ba_residual(cams[:, ci], pts[:, pi], w, m)
        return np.concatenate([np.reshape(np.transpose(e[0:2]), (2 * n,)), e[2]])

    return f


def write_ba(inst: BaInstance, path) -> None:
    lines = [f"{inst.n_cams} {inst.n_pts} {inst.n_obs}"]
    lines += [_row(inst.cams[:, a]) for a in range(inst.n_cams)]
    lines += [_row(inst.points[:, b]) for b in range(inst.n_pts)]
    for j in range(inst.n_obs):
        a, b = inst.obs[j]
        lines.append(f"{a} {b} {_row([inst.weights[j], *inst.measurements[:, j]])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ba(path) -> BaInstance:
    with open(path) as fh:
        n_cams, n_pts, n_obs = (int(t) for t in fh.readline().split())
        rest = np.array(fh.read().split(), dtype=float)
    pos = 11 * n_cams
    cams = rest[:pos].reshape(n_cams, 11).T.copy()
    points = rest[pos : pos + 3 * n_pts].reshape(n_pts, 3).T.copy()
    pos += 3 * n_pts
    tail = rest[pos:]
    if tail.size != 5 * n_obs:
        raise DimensionError(f"{path}: expected {5 * n_obs} observation values, found {tail.size}")
    tail = tail.reshape(n_obs, 5)
    return BaInstance(cams, points, tail[:, 2].copy(), tail[:, :2].astype(int), tail[:, 3:5].T.copy())


def _row(v) -> str:
    return " ".join(repr(float(x)) for x in v)
