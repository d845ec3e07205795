"""Deterministic random instances over the benchmark size grids.

All randomness comes from :class:`PortableRng`: Philox-4x64 counters with
the seed as key.  Uniforms take the top 53 bits of each raw word; normals
are ``sum of 12 uniforms - 6`` (mean 0, variance 1).  That recipe uses only
exact integer ops and correctly rounded additions, so the stream is
bit-identical on every IEEE-754 platform.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from diffbench import ba, gmm, ht
from diffbench.errors import DimensionError, GenerationError
from diffbench.kernels import N_CAM_PARAMS, project, rodrigues_rotate


class PortableRng:
    def __init__(self, seed: int):
        self._bits = np.random.Philox(key=int(seed))

    def _raw(self, n: int) -> np.ndarray:
        return np.asarray(self._bits.random_raw(n), dtype=np.uint64).reshape(n)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self._raw(n) >> np.uint64(11)).astype(float) * 2.0**-53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(12 * n).reshape(n, 12)
        out = u[:, 0].copy()
        for c in range(1, 12):
            out += u[:, c]
        return out - 6.0

    def integers(self, n: int, high: int) -> np.ndarray:
        """Uniform ints in ``[0, high)`` (modulo bias below 2**-40 for any sane ``high``)."""
        return (self._raw(n) % np.uint64(high)).astype(np.int64)


def gen_gmm(d: int, k: int, n: int, m: float = 0.0, seed: int = 0) -> gmm.GmmInstance:
    if d < 1 or k < 1 or n < 1:
        raise DimensionError("D, K and N must be positive")
    rng = PortableRng(seed)
    alphas = rng.normal(k)
    means = rng.normal(d * k).reshape(k, d).T.copy()
    icf = rng.normal(gmm.n_icf(d) * k).reshape(k, gmm.n_icf(d)).T.copy()
    data = rng.normal(d * n).reshape(n, d).T.copy()
    return gmm.GmmInstance(alphas, means, icf, data, float(m))


BA_CAMERA_DISTANCE = 20.0
BA_FOCAL = 500.0
BA_MAX_RETRIES = 50


def gen_ba(n_cams: int, n_pts: int, n_obs: int, seed: int = 0) -> ba.BaInstance:
    """Cameras sit on the -z side of a unit-scale cloud, all looking towards +z."""
    if min(n_cams, n_pts, n_obs) < 1:
        raise DimensionError("camera, point and observation counts must be positive")
    rng = PortableRng(seed)
    points = rng.normal(3 * n_pts).reshape(n_pts, 3).T.copy()
    cams = np.empty((N_CAM_PARAMS, n_cams))
    cams[0:3] = 0.05 * rng.normal(3 * n_cams).reshape(n_cams, 3).T
    cams[3:5] = 2.0 * rng.normal(2 * n_cams).reshape(n_cams, 2).T
    cams[5] = -BA_CAMERA_DISTANCE + rng.normal(n_cams)
    cams[6] = BA_FOCAL * (1.0 + 0.1 * rng.normal(n_cams))
    cams[7:9] = rng.normal(2 * n_cams).reshape(n_cams, 2).T
    cams[9:11] = 1e-3 * rng.normal(2 * n_cams).reshape(n_cams, 2).T

    cam_idx = rng.integers(n_obs, n_cams)
    pt_idx = rng.integers(n_obs, n_pts)
    for _ in range(BA_MAX_RETRIES):
        bad = _behind_camera(cams, points, cam_idx, pt_idx)
        if not bad.any():
            break
        # pull offending points towards the cloud centre and try again
        pts = np.unique(pt_idx[bad])
        points[:, pts] *= 0.5
    else:
        raise GenerationError(f"no valid BA configuration after {BA_MAX_RETRIES} repairs")

    weights = 1.0 + 0.01 * rng.normal(n_obs)
    proj = project(cams[:, cam_idx], points[:, pt_idx])
    measurements = proj + rng.normal(2 * n_obs).reshape(n_obs, 2).T
    obs = np.stack([cam_idx, pt_idx], axis=1)
    return ba.BaInstance(cams, points, weights, obs, measurements)


def _behind_camera(cams, points, cam_idx, pt_idx) -> np.ndarray:
    xr = rodrigues_rotate(cams[0:3, cam_idx], points[:, pt_idx] - cams[3:6, cam_idx])
    return xr[2] <= 1.0


HT_CLASSES = {"small": (544, 192), "large": (10000, 100000)}

_FINGER_X = (-0.9, -0.45, 0.0, 0.45, 0.9)
_FINGER_LEN = (0.8, 0.5, 0.35)
_PALM_LEN = 1.0
_METACARPAL_LEN = 0.6


def canonical_skeleton():
    """Parents, rest-local transforms and angle axes of the 22-bone hand.

    Bones: 0 wrist, 1 palm, then for finger ``f`` bones ``2+4f .. 5+4f``
    (metacarpal, proximal, middle, distal).  Finger angles ``4f .. 4f+3`` are
    abduction (about z on the proximal bone) and three flexions (about x on
    proximal, middle, distal).  Bones extend along their local +y axis.
    """
    parents = np.full(ht.N_BONES, -1, dtype=np.int64)
    rest = np.tile(np.eye(4), (ht.N_BONES, 1, 1))
    axes = np.full((ht.N_BONES, 3), -1, dtype=np.int64)
    lengths = np.empty(ht.N_BONES)
    parents[1] = 0
    rest[1, 1, 3] = 0.2
    lengths[0] = 0.2
    lengths[1] = _PALM_LEN
    for f in range(5):
        meta, prox, mid, dist = 2 + 4 * f, 3 + 4 * f, 4 + 4 * f, 5 + 4 * f
        parents[meta] = 1
        rest[meta, 0, 3] = _FINGER_X[f]
        rest[meta, 1, 3] = _PALM_LEN if f else 0.2
        if f == 0:
            # splay the thumb outwards
            rest[meta, :3, :3] = ht.axis_rotation(2, 0.6)[:3, :3]
        lengths[meta] = _METACARPAL_LEN
        parents[prox] = meta
        rest[prox, 1, 3] = _METACARPAL_LEN
        axes[prox] = (4 * f + 1, -1, 4 * f)
        for bone, parent, code, plen in (
            (mid, prox, 4 * f + 2, _FINGER_LEN[0]),
            (dist, mid, 4 * f + 3, _FINGER_LEN[1]),
        ):
            parents[bone] = parent
            rest[bone, 1, 3] = plen
            axes[bone, 0] = code
        lengths[prox], lengths[mid], lengths[dist] = _FINGER_LEN
    return parents, rest, axes, lengths


def make_hand_model(n_vertices: int, rng: PortableRng) -> ht.HandModel:
    """Vertices scattered on a tube around each bone, bound to it and its parent."""
    if n_vertices < 3 * ht.N_BONES:
        raise DimensionError(f"need at least {3 * ht.N_BONES} vertices")
    parents, rest, axes, lengths = canonical_skeleton()
    rest_abs = np.empty_like(rest)
    for b in range(ht.N_BONES):
        rest_abs[b] = rest[b] if parents[b] < 0 else rest_abs[parents[b]] @ rest[b]

    counts = np.full(ht.N_BONES, n_vertices // ht.N_BONES)
    counts[: n_vertices % ht.N_BONES] += 1
    points = np.empty((3, n_vertices))
    weights = np.zeros((ht.N_BONES, n_vertices))
    triangles = []
    start = 0
    for b in range(ht.N_BONES):
        c = counts[b]
        t = rng.uniform(c) * lengths[b]
        phi = rng.uniform(c, 0.0, 2.0 * np.pi)
        radius = 0.1 * (1.0 + 0.2 * rng.uniform(c))
        local = np.stack([radius * np.cos(phi), t, radius * np.sin(phi), np.ones(c)])
        sl = slice(start, start + c)
        points[:, sl] = (rest_abs[b] @ local)[:3]
        own = 0.5 + 0.5 * t / lengths[b]
        if parents[b] < 0:
            weights[b, sl] = 1.0
        else:
            weights[b, sl] = own
            weights[parents[b], sl] = 1.0 - own
        triangles += [(start + i, start + i + 1, start + i + 2) for i in range(c - 2)]
        start += c
    weights /= weights.sum(axis=0)
    return ht.HandModel(points, np.array(triangles, dtype=np.int64), weights, parents, rest, axes)


def gen_ht_model(size_class: str, seed: int = 0) -> ht.HandModel:
    if size_class not in HT_CLASSES:
        raise DimensionError(f"size class must be one of {sorted(HT_CLASSES)}")
    return make_hand_model(HT_CLASSES[size_class][0], PortableRng(seed))


def gen_ht(size_class: str, n_corr: int | None = None, seed: int = 0, model: ht.HandModel | None = None) -> ht.HtInstance:
    """Instance on the class's hand model; the model depends on ``seed`` only."""
    if model is None:
        model = gen_ht_model(size_class, seed)
    if n_corr is None:
        n_corr = HT_CLASSES[size_class][1]
    if n_corr < 1:
        raise DimensionError("need at least one correspondence")
    rng = PortableRng(seed + 1)
    pose = rng.uniform(ht.N_POSE, -0.5, 0.5)
    corr = rng.integers(n_corr, len(model.triangles))
    a = rng.uniform(n_corr)
    b = rng.uniform(n_corr)
    flip = a + b > 1.0
    a[flip], b[flip] = 1.0 - a[flip], 1.0 - b[flip]
    us = np.stack([a, b])
    spots = ht.predicted_spots(model, pose, corr, us)
    targets = spots + 0.01 * rng.normal(3 * n_corr).reshape(n_corr, 3).T
    return ht.HtInstance(model, pose, corr, us, targets)


def toy_ht(n_corr: int = 4, seed: int = 0) -> ht.HtInstance:
    """Smallest valid hand (66 vertices) for dense-oracle checks."""
    model = make_hand_model(3 * ht.N_BONES, PortableRng(seed))
    return gen_ht("small", n_corr, seed, model=model)


# ---- size grids ---------------------------------------------------------------

GMM_D = (2, 10, 20, 32, 64)
GMM_K = (5, 10, 25, 50, 100, 200)
GMM_PARAM_COUNTS = (30, 330, 1200, 3300, 10725, 21450, 53625, 429000)
BA_MEASUREMENTS = (3.18e4, 2.04e5, 2.87e5, 5.64e5, 1.09e6, 4.75e6, 9.13e6, 2.90e7)
BA_ENDPOINTS = ((21, 11000), (14000, 4_000_000))


def gmm_grid(n: int) -> list[tuple[int, int, int]]:
    sizes = [(d, k) for d, k in itertools.product(GMM_D, GMM_K) if gmm.n_gmm_params(d, k) in GMM_PARAM_COUNTS]
    sizes.sort(key=lambda dk: gmm.n_gmm_params(*dk))
    return [(d, k, n) for d, k in sizes]


def ba_grid() -> list[tuple[int, int, int]]:
    """One entry per benchmark measurement count, used as the observation count.

    Camera and point counts are repo-defined: log-linear in the observation
    count between the smallest and largest benchmark datasets.
    """
    out = []
    lo, hi = np.log(BA_MEASUREMENTS[0]), np.log(BA_MEASUREMENTS[-1])
    (c0, p0), (c1, p1) = BA_ENDPOINTS
    for meas in BA_MEASUREMENTS:
        t = (np.log(meas) - lo) / (hi - lo)
        cams = int(round(c0 * (c1 / c0) ** t))
        pts = int(round(p0 * (p1 / p0) ** t))
        out.append((cams, pts, int(meas)))
    return out


HT_SMALL_N = (192, 1000, 10000)
HT_LARGE_N = (1000, 10000, 100000)


@dataclass(frozen=True)
class SizeGrid:
    gmm: tuple = ()
    ba: tuple = ()
    ht: tuple = ()  # (size_class, (n_corr, ...))


PRESETS = {
    "paper-gmm-1k": SizeGrid(gmm=tuple(gmm_grid(1000))),
    "paper-gmm-10k": SizeGrid(gmm=tuple(gmm_grid(10000))),
    "paper-ba": SizeGrid(ba=tuple(ba_grid())),
    "paper-ht-small": SizeGrid(ht=("small", HT_SMALL_N)),
    "paper-ht-large": SizeGrid(ht=("large", HT_LARGE_N)),
    # quick desk-scale grids
    "small": SizeGrid(gmm=((2, 5, 1000), (10, 5, 1000)), ba=((2, 4, 6), (21, 200, 600)), ht=("small", (192,))),
}


# ---- file naming ----------------------------------------------------------------

def gmm_filename(d: int, k: int, n: int) -> str:
    return f"gmm_d{d}_k{k}_n{n}.txt"


def ba_filename(c: int, p: int, o: int) -> str:
    return f"ba_c{c}_p{p}_o{o}.txt"


def ht_filename(size_class: str, n: int) -> str:
    return f"ht_{size_class}_n{n}.txt"


def ht_model_filename(size_class: str) -> str:
    return f"ht_{size_class}_model.txt"


def write_grid(grid: SizeGrid, out_dir, seed: int = 0) -> list[Path]:
    """Generate and write every instance of ``grid``; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for d, k, n in grid.gmm:
        p = out_dir / gmm_filename(d, k, n)
        gmm.write_gmm(gen_gmm(d, k, n, 0.0, seed), p)
        written.append(p)
    for c, pt, o in grid.ba:
        p = out_dir / ba_filename(c, pt, o)
        ba.write_ba(gen_ba(c, pt, o, seed), p)
        written.append(p)
    if grid.ht:
        size_class, ns = grid.ht
        model = gen_ht_model(size_class, seed)
        p = out_dir / ht_model_filename(size_class)
        ht.write_model(model, p)
        written.append(p)
        for n in ns:
            p = out_dir / ht_filename(size_class, n)
            ht.write_instance(gen_ht(size_class, n, seed, model=model), p)
            written.append(p)
    return written
