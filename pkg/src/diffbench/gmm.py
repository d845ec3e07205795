"""Gaussian mixture negative log-posterior and its gradient.

Parameters are the log-weights ``alphas`` (K,), means (D, K) and per-component
inverse covariance factors ``icf`` (D + D(D-1)/2, K) whose column ``k`` holds
``[q_k; l_k]``.  The flat parameter vector orders them alphas, means
column-major, then icf column-major.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffbench.ad import grad_reverse, record
from diffbench.errors import DimensionError, ResourceError
from diffbench.kernels import assemble_Q, logsumexp, lower_indices, n_lower


def n_icf(d: int) -> int:
    return d + n_lower(d)


def n_gmm_params(d: int, k: int) -> int:
    """Gradient length ``K(1 + 2D + D(D-1)/2)``."""
    return k * (1 + d + n_icf(d))


@dataclass(frozen=True)
class GmmInstance:
    alphas: np.ndarray
    means: np.ndarray
    icf: np.ndarray
    data: np.ndarray
    wishart_m: float = 0.0

    def __post_init__(self):
        d, k = self.means.shape
        if self.alphas.shape != (k,):
            raise DimensionError(f"alphas shape {self.alphas.shape}, expected ({k},)")
        if self.icf.shape != (n_icf(d), k):
            raise DimensionError(f"icf shape {self.icf.shape}, expected ({n_icf(d)}, {k})")
        if self.data.ndim != 2 or self.data.shape[0] != d:
            raise DimensionError(f"data shape {self.data.shape}, expected ({d}, N)")

    @property
    def D(self) -> int:
        return self.means.shape[0]

    @property
    def K(self) -> int:
        return self.means.shape[1]

    @property
    def N(self) -> int:
        return self.data.shape[1]

    @property
    def n_params(self) -> int:
        return n_gmm_params(self.D, self.K)

    def theta(self) -> np.ndarray:
        return np.concatenate([self.alphas, self.means.ravel(order="F"), self.icf.ravel(order="F")])

    def with_theta(self, theta) -> "GmmInstance":
        a, mu, icf = unpack(np.asarray(theta, dtype=float), self.D, self.K)
        return GmmInstance(a, mu, icf, self.data, self.wishart_m)


def unpack(theta, d: int, k: int):
    """Split a flat parameter vector into (alphas, means, icf)."""
    alphas = theta[:k]
    means = np.transpose(np.reshape(theta[k : k + d * k], (k, d)))
    icf = np.transpose(np.reshape(theta[k + d * k :], (k, n_icf(d))))
    return alphas, means, icf


def _prior(icf, d: int, m: float):
    q = icf[:d]
    l = icf[d:]
    eq = np.exp(q)
    return 0.5 * (np.sum(eq * eq) + np.sum(l * l)) - m * np.sum(q)


def gmm_objective(alphas, means, icf, data, m=0.0):
    """Objective with an explicit loop over data points."""
    d, n = np.shape(data)
    k = np.shape(means)[1]
    q = icf[:d]
    Qs = [assemble_Q(q[:, j], icf[d:, j]) for j in range(k)]
    mus = [means[:, j] for j in range(k)]
    base = alphas + np.sum(q, axis=0)
    bases = [base[j] for j in range(k)]
    total = 0.0
    for i in range(n):
        x = data[:, i]
        terms = []
        for j in range(k):
            y = Qs[j] @ (x - mus[j])
            terms.append(bases[j] - 0.5 * np.sum(y * y))
        total = total + logsumexp(np.stack(terms))
    return total - n * logsumexp(alphas) + _prior(icf, d, m)


def gmm_objective_vector(alphas, means, icf, data, m=0.0):
    """Objective working on all data points at once per component.

    Needs ``O(N*D)`` scratch for ``Q_k (X - mu_k)``.
    """
    d, n = np.shape(data)
    k = np.shape(means)[1]
    q = icf[:d]
    base = alphas + np.sum(q, axis=0)
    rows = []
    try:
        for j in range(k):
            Q = assemble_Q(q[:, j], icf[d:, j])
            Y = Q @ (data - means[:, j : j + 1])
            rows.append(base[j] - 0.5 * np.sum(Y * Y, axis=0))
    except MemoryError as e:
        raise ResourceError(f"no room for the {d}x{n} workspace") from e
    main = np.stack(rows)
    return np.sum(logsumexp(main, axis=0)) - n * logsumexp(alphas) + _prior(icf, d, m)


def gmm_point_term(alphas, means, icf, x):
    """Per-point part ``f(x_i)``: one logsumexp over all components."""
    d = np.shape(means)[0]
    k = np.shape(means)[1]
    q = icf[:d]
    Qs = assemble_Q(q, icf[d:])
    diff = np.reshape(x, (d, 1)) - means
    y = np.sum(Qs * np.reshape(np.transpose(diff), (k, 1, d)), axis=2)
    return logsumexp(alphas + np.sum(q, axis=0) - 0.5 * np.sum(y * y, axis=1))


def gmm_global_term(alphas, icf, n: int, m=0.0):
    """Data-independent part ``g``: weight normaliser and prior."""
    d = _d_from_icf(np.shape(icf)[0])
    return _prior(icf, d, m) - n * logsumexp(alphas)


def _d_from_icf(rows: int) -> int:
    d = int((np.sqrt(8 * rows + 1) - 1) / 2)
    if n_icf(d) != rows:
        raise DimensionError(f"{rows} icf rows do not match any dimension")
    return d


def gmm_objective_split(alphas, means, icf, data, m=0.0):
    """``sum_i f(x_i) + g`` built from the separable pieces."""
    n = np.shape(data)[1]
    total = 0.0
    for i in range(n):
        total = total + gmm_point_term(alphas, means, icf, data[:, i])
    return total + gmm_global_term(alphas, icf, n, m)


VARIANTS = {
    "standard": gmm_objective,
    "vector": gmm_objective_vector,
    "split": gmm_objective_split,
}


def objective(inst: GmmInstance, variant: str = "vector") -> float:
    return float(VARIANTS[variant](inst.alphas, inst.means, inst.icf, inst.data, inst.wishart_m))


def theta_function(inst: GmmInstance, variant: str = "vector"):
    """``f(theta)`` for the AD engines, data held fixed."""
    fn = VARIANTS[variant]
    d, k = inst.D, inst.K

    def f(theta):
        a, mu, icf = unpack(theta, d, k)
        return fn(a, mu, icf, inst.data, inst.wishart_m)

    return f


def gmm_split_prepare(inst: GmmInstance):
    """Tape ``g`` and one generic ``f(x_i)`` once; the returned callable replays
    the point tape for every data point and sums the gradients."""
    d, k, n = inst.D, inst.K, inst.N
    theta = inst.theta()
    p = theta.size
    g_tape, _ = record(lambda t: gmm_global_term(t[:k], unpack(t, d, k)[2], n, inst.wishart_m), theta)
    # the point is an extra (ignored) input so one tape serves every x_i
    tx = np.concatenate([theta, inst.data[:, 0]])
    f_tape, _ = record(lambda t: gmm_point_term(*unpack(t[:p], d, k), t[p:]), tx)

    def run():
        grad = grad_reverse(g_tape.replay(theta))
        for i in range(n):
            tx[p:] = inst.data[:, i]
            grad += grad_reverse(f_tape.replay(tx))[:p]
        return grad

    return run


def gmm_gradient_split(inst: GmmInstance) -> np.ndarray:
    """Reverse-mode gradient accumulated one data point at a time, plus ``g``."""
    return gmm_split_prepare(inst)()


def gmm_gradient_manual(inst: GmmInstance) -> np.ndarray:
    """Hand-derived gradient, same ordering as :meth:`GmmInstance.theta`."""
    d, k, n = inst.D, inst.K, inst.N
    q = inst.icf[:d]
    l = inst.icf[d:]
    eq = np.exp(q)
    X = inst.data
    rows, cols = lower_indices(d)

    main = np.empty((k, n))
    Ys, Zs = [], []
    for j in range(k):
        Q = assemble_Q(q[:, j], l[:, j])
        Z = X - inst.means[:, j : j + 1]
        Y = Q @ Z
        Ys.append(Y)
        Zs.append(Z)
        main[j] = inst.alphas[j] + q[:, j].sum() - 0.5 * np.einsum("dn,dn->n", Y, Y)
    mx = main.max(axis=0)
    resp = np.exp(main - mx)
    resp /= resp.sum(axis=0)

    wa = np.exp(inst.alphas - inst.alphas.max())
    wa /= wa.sum()
    g_alpha = resp.sum(axis=1) - n * wa

    g_means = np.empty((d, k))
    g_icf = np.empty((n_icf(d), k))
    for j in range(k):
        Q = assemble_Q(q[:, j], l[:, j])
        Yr = Ys[j] * resp[j]
        g_means[:, j] = Q.T @ Yr.sum(axis=1)
        # d beta / dQ summed over points, weighted by responsibilities
        G = -Yr @ Zs[j].T
        g_icf[:d, j] = resp[j].sum() + np.diag(G) * eq[:, j] + eq[:, j] ** 2 - inst.wishart_m
        g_icf[d:, j] = G[rows, cols] + l[:, j]
    return np.concatenate([g_alpha, g_means.ravel(order="F"), g_icf.ravel(order="F")])


def write_gmm(inst: GmmInstance, path) -> None:
    """Text format: header ``D K N m``, then alphas, means, icf, data rows."""
    lines = [f"{inst.D} {inst.K} {inst.N} {float(inst.wishart_m)!r}"]
    lines += [repr(float(a)) for a in inst.alphas]
    lines += [_row(inst.means[:, j]) for j in range(inst.K)]
    lines += [_row(inst.icf[:, j]) for j in range(inst.K)]
    lines += [_row(inst.data[:, i]) for i in range(inst.N)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_gmm(path) -> GmmInstance:
    tokens = Path(path).read_text().split()
    d, k, n = (int(t) for t in tokens[:3])
    m = float(tokens[3])
    vals = np.array(tokens[4:], dtype=float)
    want = k + d * k + n_icf(d) * k + d * n
    if vals.size != want:
        raise DimensionError(f"{path}: expected {want} values, found {vals.size}")
    alphas = vals[:k]
    pos = k
    means = vals[pos : pos + d * k].reshape(k, d).T.copy()
    pos += d * k
    icf = vals[pos : pos + n_icf(d) * k].reshape(k, n_icf(d)).T.copy()
    pos += n_icf(d) * k
    data = vals[pos:].reshape(n, d).T.copy()
    return GmmInstance(alphas, means, icf, data, m)


def _row(v) -> str:
    return " ".join(repr(float(x)) for x in v)
