"""Hand-tracking residuals via linear blend skinning.

Pose vector (26): global translation (3), global angle-axis rotation (3),
then four angles per finger (20).  The kinematic tree is the repo's
canonical 22-bone skeleton: wrist, palm, and five four-bone fingers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from diffbench.ad import Dual, fd_directional, grad_forward
from diffbench.errors import DimensionError
from diffbench.kernels import angle_axis_to_matrix
from diffbench.sparsity import N_POSE, SparseJacobian, build_ht_seed, decompress

N_BONES = 22
N_FINGER_ANGLES = 20
N_SEEDS = N_POSE + 2


def _rotation_parts(axis: int):
    """Constant 4x4 matrices with ``R(a) = A + cos(a) B + sin(a) C`` about ``axis``."""
    i, j = [k for k in range(3) if k != axis]
    A = np.zeros((4, 4))
    A[axis, axis] = 1.0
    A[3, 3] = 1.0
    B = np.zeros((4, 4))
    B[i, i] = B[j, j] = 1.0
    C = np.zeros((4, 4))
    C[j, i] = 1.0
    C[i, j] = -1.0
    return A, B, C


_ROT_PARTS = [_rotation_parts(a) for a in range(3)]
# intrinsic order: z, then y, then x
_EULER_ORDER = (2, 1, 0)


def axis_rotation(axis: int, angle):
    A, B, C = _ROT_PARTS[axis]
    return A + np.cos(angle) * B + np.sin(angle) * C


@dataclass(frozen=True)
class HandModel:
    base_points: np.ndarray  # (3, M)
    triangles: np.ndarray  # (T, 3)
    skin_weights: np.ndarray  # (22, M)
    parents: np.ndarray  # (22,), -1 for the root
    rest_local: np.ndarray  # (22, 4, 4)
    angle_axes: np.ndarray  # (22, 3): finger-angle index driving x/y/z rotation, -1 if none
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        m = self.n_vertices
        if self.skin_weights.shape != (N_BONES, m):
            raise DimensionError(f"skin weights must be (22, {m})")
        if m and np.max(np.abs(self.skin_weights.sum(axis=0) - 1.0)) > 1e-10:
            raise DimensionError("skin weights of every vertex must sum to 1")
        if self.parents.shape != (N_BONES,) or np.any(self.parents >= np.arange(N_BONES)):
            raise DimensionError("bone parents must precede their children")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= m):
            raise DimensionError("triangle vertex index out of range")

    @property
    def n_vertices(self) -> int:
        return self.base_points.shape[1]

    @cached_property
    def rest_absolute(self) -> np.ndarray:
        out = np.empty((N_BONES, 4, 4))
        for b in range(N_BONES):
            p = self.parents[b]
            out[b] = self.rest_local[b] if p < 0 else out[p] @ self.rest_local[b]
        return out

    @cached_property
    def inverse_rest_absolute(self) -> np.ndarray:
        return np.linalg.inv(self.rest_absolute)

    @cached_property
    def weighted_points(self) -> np.ndarray:
        """(88, M) constant with row ``4b + c`` equal to ``W[b] * [x; 1][c]``."""
        xh = np.vstack([self.base_points, np.ones((1, self.n_vertices))])
        return (self.skin_weights[:, None, :] * xh[None, :, :]).reshape(4 * N_BONES, self.n_vertices)


@dataclass(frozen=True)
class HtInstance:
    model: HandModel
    pose: np.ndarray  # (26,)
    correspondences: np.ndarray  # (N,) triangle indices
    us: np.ndarray  # (2, N)
    targets: np.ndarray  # (3, N)

    def __post_init__(self):
        n = self.n_corr
        if self.pose.shape != (N_POSE,):
            raise DimensionError(f"pose must have {N_POSE} entries")
        if self.us.shape != (2, n) or self.targets.shape != (3, n):
            raise DimensionError("us and targets must match the correspondence count")
        if n and (self.correspondences.min() < 0 or self.correspondences.max() >= len(self.model.triangles)):
            raise DimensionError("correspondence refers to a missing triangle")

    @property
    def n_corr(self) -> int:
        return self.correspondences.shape[0]

    @property
    def n_vars(self) -> int:
        return N_POSE + 2 * self.n_corr

    def theta(self) -> np.ndarray:
        """Pose, then ``(u_q1, u_q2)`` pairs per correspondence."""
        return np.concatenate([self.pose, self.us.T.reshape(-1)])


def ht_assemble_transforms(model: HandModel, finger_angles):
    """Absolute bone transforms (22, 4, 4) for the given finger angles."""
    absolute = []
    for b in range(N_BONES):
        local = model.rest_local[b]
        for axis in _EULER_ORDER:
            code = model.angle_axes[b, axis]
            if code >= 0:
                local = local @ axis_rotation(axis, finger_angles[code])
        p = model.parents[b]
        absolute.append(local if p < 0 else absolute[p] @ local)
    return np.stack(absolute)


def skinning_transforms(model: HandModel, absolute):
    """Bone transforms relative to the rest pose, so zero angles leave vertices in place."""
    return absolute @ model.inverse_rest_absolute


def ht_skin(model: HandModel, transforms):
    """``Z = sum_b T_b (w_b [x; 1])``, shape (4, M)."""
    tcat = np.reshape(np.transpose(transforms, (1, 0, 2)), (4, 4 * N_BONES))
    return tcat @ model.weighted_points


def ht_apply_global(Z, rot, t):
    """``[R | t] Z`` with ``R`` from the angle-axis vector ``rot``."""
    R = angle_axis_to_matrix(rot)
    return R @ Z[0:3] + np.reshape(t, (3, 1))


def ht_correspond(V, triangles, corr_idx, us):
    """Barycentric spots ``u1 v_i + u2 v_j + (1 - u1 - u2) v_k`` per correspondence."""
    corr_idx = np.asarray(corr_idx, dtype=int)
    if corr_idx.size and (corr_idx.min() < 0 or corr_idx.max() >= len(triangles)):
        raise DimensionError("correspondence refers to a missing triangle")
    tri = np.asarray(triangles)[corr_idx]
    m = np.shape(V)[1]
    if tri.size and tri.max() >= m:
        raise DimensionError("triangle vertex index out of range")
    u1 = us[0]
    u2 = us[1]
    return u1 * V[:, tri[:, 0]] + u2 * V[:, tri[:, 1]] + (1.0 - u1 - u2) * V[:, tri[:, 2]]


def predicted_spots(model: HandModel, pose, corr_idx, us):
    absolute = ht_assemble_transforms(model, pose[6:])
    Z = ht_skin(model, skinning_transforms(model, absolute))
    V = ht_apply_global(Z, pose[3:6], pose[0:3])
    return ht_correspond(V, model.triangles, corr_idx, us)


def ht_objective(inst: HtInstance):
    """Error matrix ``E = Y - Y'`` (3, N)."""
    return inst.targets - predicted_spots(inst.model, inst.pose, inst.correspondences, inst.us)


def residual_function(inst: HtInstance):
    """Flat residual (row ``3q + d`` is ``E[d, q]``) as a function of :meth:`HtInstance.theta`."""
    n = inst.n_corr

    def f(theta):
        pose = theta[0:N_POSE]
        us = np.transpose(np.reshape(theta[N_POSE:], (n, 2)))
        E = inst.targets - predicted_spots(inst.model, pose, inst.correspondences, us)
        return np.reshape(np.transpose(E), (3 * n,))

    return f


@dataclass
class CompressedJacobian:
    dense_left: np.ndarray  # (3N, 26)
    compressed_right: np.ndarray  # (3N, 2)
    pattern: np.ndarray  # (N, 2) variable index of u_q1, u_q2
    passes: int = N_SEEDS

    @property
    def n_corr(self) -> int:
        return self.pattern.shape[0]

    def structure(self):
        """(rows, cols) of every structural nonzero: dense left, two per row on the right."""
        n = self.n_corr
        rows_l = np.repeat(np.arange(3 * n), N_POSE)
        cols_l = np.tile(np.arange(N_POSE), 3 * n)
        rows_r = np.repeat(np.arange(3 * n), 2)
        cols_r = np.repeat(self.pattern, 3, axis=0).reshape(-1)
        return np.concatenate([rows_l, rows_r]), np.concatenate([cols_l, cols_r])

    def decompress(self) -> SparseJacobian:
        seed = build_ht_seed(self.n_corr)
        compressed = np.hstack([self.dense_left, self.compressed_right])
        return decompress(compressed, seed, self.structure(), layout="ht")


def _compressed_from(cj: np.ndarray, n: int) -> CompressedJacobian:
    pattern = N_POSE + 2 * np.arange(n)[:, None] + np.arange(2)
    return CompressedJacobian(cj[:, :N_POSE].copy(), cj[:, N_POSE:].copy(), pattern, passes=cj.shape[1])


def ht_jacobian(inst: HtInstance, engine: str = "forward") -> CompressedJacobian:
    """Compressed Jacobian from 28 seed directions, whatever ``N`` is."""
    f = residual_function(inst)
    seed = build_ht_seed(inst.n_corr).to_dense()
    if engine == "forward":
        cj = grad_forward(f, inst.theta(), seed)
    elif engine == "fd":
        cj = fd_directional(f, inst.theta(), seed)
    else:
        raise ValueError(f"unknown HT engine {engine!r}")
    return _compressed_from(cj, inst.n_corr)


def ht_forward_prepare(inst: HtInstance):
    """Seed once; the returned callable runs the 28-direction forward pass."""
    f = residual_function(inst)
    x = Dual.seeded(inst.theta(), build_ht_seed(inst.n_corr).to_dense())

    def run():
        y = f(x)
        return _compressed_from(y.derivs.reshape(N_SEEDS, -1).T, inst.n_corr)

    return run


def ht_jacobian_dense(inst: HtInstance) -> np.ndarray:
    """Full Jacobian with one forward seed per variable (26 + 2N of them)."""
    return grad_forward(residual_function(inst), inst.theta())


def write_model(model: HandModel, path) -> None:
    """Counts, vertices, triangles, 22 bone lines, then per-vertex skin weights."""
    lines = [f"{model.n_vertices} {len(model.triangles)} {N_BONES}"]
    lines += [_row(model.base_points[:, j]) for j in range(model.n_vertices)]
    lines += [" ".join(str(int(i)) for i in tri) for tri in model.triangles]
    for b in range(N_BONES):
        rest = _row(model.rest_local[b].reshape(-1))
        axes = " ".join(str(int(a)) for a in model.angle_axes[b])
        lines.append(f"{int(model.parents[b])} {rest} {axes}")
    lines += [_row(model.skin_weights[:, j]) for j in range(model.n_vertices)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_model(path) -> HandModel:
    with open(path) as fh:
        m, n_tri, n_bones = (int(t) for t in fh.readline().split())
        if n_bones != N_BONES:
            raise DimensionError(f"model has {n_bones} bones, expected {N_BONES}")
        pts = np.array([fh.readline().split() for _ in range(m)], dtype=float).T.copy()
        tris = np.array([fh.readline().split() for _ in range(n_tri)], dtype=np.int64).reshape(n_tri, 3)
        bones = [fh.readline().split() for _ in range(N_BONES)]
        weights = np.array([fh.readline().split() for _ in range(m)], dtype=float).T.copy()
    parents = np.array([int(b[0]) for b in bones], dtype=np.int64)
    rest = np.array([b[1:17] for b in bones], dtype=float).reshape(N_BONES, 4, 4)
    axes = np.array([b[17:20] for b in bones], dtype=np.int64)
    return HandModel(pts, tris, weights, parents, rest, axes)


def write_instance(inst: HtInstance, path) -> None:
    """Pose line, ``N``, then ``tri u1 u2 y_x y_y y_z`` per correspondence."""
    lines = [_row(inst.pose), str(inst.n_corr)]
    for q in range(inst.n_corr):
        vals = _row([inst.us[0, q], inst.us[1, q], *inst.targets[:, q]])
        lines.append(f"{int(inst.correspondences[q])} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_instance(path, model: HandModel) -> HtInstance:
    with open(path) as fh:
        pose = np.array(fh.readline().split(), dtype=float)
        n = int(fh.readline())
        body = np.array(fh.read().split(), dtype=float)
    if body.size != 6 * n:
        raise DimensionError(f"{path}: expected {6 * n} correspondence values, found {body.size}")
    body = body.reshape(n, 6)
    return HtInstance(model, pose, body[:, 0].astype(np.int64), body[:, 1:3].T.copy(), body[:, 3:6].T.copy())


def _row(v) -> str:
    return " ".join(repr(float(x)) for x in v)
