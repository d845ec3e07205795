"""Timing protocol, correctness gate and CSV results.

Every (instance, engine) pair is first checked against an independent
reference, then timed with the adaptive repeat rule:

    calibration run < 5 s      -> mean of 1000 runs
    5 s <= run < 30 s          -> 100 runs
    30 s <= run <= 120 s       -> 10 runs
    longer                     -> the calibration run alone

The calibration run doubles as warm-up and is discarded unless it is the
only run.  Preparation (taping, seeding) happens before the clock starts.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from diffbench import ba, datagen, gmm, ht
from diffbench.ad import fd_directional, grad_fd, grad_forward, grad_reverse, record
from diffbench.errors import RunTimeout

log = logging.getLogger(__name__)

DEFAULT_TIME_LIMIT = 40000.0
TIME_LIMIT_ENV = "DIFFBENCH_TIME_LIMIT"
CHECK_TOL = 1e-6
CSV_COLUMNS = ("objective", "engine", "size_label", "n_params_or_meas", "obj_s", "der_s", "repeats", "rel", "status")


def default_time_limit() -> float:
    return float(os.environ.get(TIME_LIMIT_ENV, DEFAULT_TIME_LIMIT))


def repeats_for(seconds: float) -> int:
    if seconds < 5.0:
        return 1000
    if seconds < 30.0:
        return 100
    if seconds <= 120.0:
        return 10
    return 1


def time_adaptive(
    task: Callable[[], object],
    limit_s: float = DEFAULT_TIME_LIMIT,
    clock: Callable[[], float] = time.perf_counter,
    max_repeats: int | None = None,
    budget_s: float | None = None,
) -> tuple[float, int]:
    """Mean wall-clock seconds of ``task`` and the number of runs averaged.

    ``max_repeats`` and ``budget_s`` (total seconds for the timed runs) only
    ever lower the protocol's repeat count.  Raises :class:`RunTimeout` once
    any single run is seen to exceed ``limit_s``.
    """
    t0 = clock()
    task()
    first = clock() - t0
    if first > limit_s:
        raise RunTimeout(first, limit_s)
    n = repeats_for(first)
    if max_repeats is not None:
        n = min(n, max_repeats)
    if budget_s is not None and first > 0:
        n = min(n, max(1, int(budget_s / first)))
    if n <= 1:
        return first, 1
    total = 0.0
    for _ in range(n):
        t0 = clock()
        task()
        dt = clock() - t0
        if dt > limit_s:
            raise RunTimeout(dt, limit_s)
        total += dt
    return total / n, n


@dataclass
class TimingRecord:
    objective: str
    engine: str
    size_label: str
    n_params_or_meas: int
    obj_s: float | None = None
    der_s: float | None = None
    repeats: int | None = None
    rel: float | None = None
    status: str = "ok"
    max_err: float | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.rel is None and self.obj_s and self.der_s is not None:
            self.rel = self.der_s / self.obj_s


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def append_csv(path, records: Iterable[TimingRecord]) -> None:
    """Append rows, writing the header first if the file is new or empty."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        if fresh:
            w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])


def read_csv(path) -> list[TimingRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            kw = {}
            for c in CSV_COLUMNS:
                v = row[c]
                if c in ("objective", "engine", "size_label", "status"):
                    kw[c] = v
                elif v == "":
                    kw[c] = None
                elif c in ("n_params_or_meas", "repeats"):
                    kw[c] = int(v)
                else:
                    kw[c] = float(v)
            out.append(TimingRecord(**kw))
    return out


def rel_error(got, ref) -> float:
    """``max|got - ref| / max(1, max|ref|)``."""
    got = np.asarray(got, dtype=float)
    ref = np.asarray(ref, dtype=float)
    scale = max(1.0, float(np.max(np.abs(ref), initial=0.0)))
    return float(np.max(np.abs(got - ref), initial=0.0)) / scale


# ---- objective adapters ---------------------------------------------------------
#
# An engine is ``prepare(inst) -> task``; ``task()`` returns the derivative.
# ``check(inst, engine, result)`` returns the relative error against a reference
# that does not share the engine's code path.


@dataclass
class Case:
    objective: str
    size_label: str
    size: int
    load: Callable[[], object]


def _gmm_forward(inst):
    f = gmm.theta_function(inst, "vector")
    theta = inst.theta()
    return lambda: grad_forward(f, theta, chunk=64)[0]


def _gmm_reverse(inst):
    theta = inst.theta()
    tape, _ = record(gmm.theta_function(inst, "vector"), theta)
    return lambda: grad_reverse(tape.replay(theta))


def _gmm_fd(inst):
    f = gmm.theta_function(inst, "vector")
    theta = inst.theta()
    return lambda: grad_fd(f, theta)


GMM_ENGINES = {
    "manual": lambda inst: lambda: gmm.gmm_gradient_manual(inst),
    "forward": _gmm_forward,
    "reverse": _gmm_reverse,
    "split": gmm.gmm_split_prepare,
    "fd": _gmm_fd,
}


def _directions(n: int, count: int = 3, seed: int = 12345) -> np.ndarray:
    return datagen.PortableRng(seed).uniform(n * count, -1.0, 1.0).reshape(count, n).T


def gmm_check(inst, engine: str, grad) -> float:
    """Compare ``grad . v`` with a directional derivative for a few random ``v``."""
    f = gmm.theta_function(inst, "vector")
    theta = inst.theta()
    V = _directions(theta.size)
    if engine == "fd":
        ref = grad_forward(f, theta, V)[0]
    else:
        ref = fd_directional(f, theta, V)[0]
    got = np.asarray(grad) @ V
    scale = max(1.0, float(np.max(np.abs(np.asarray(grad)[:, None] * V).sum(axis=0))))
    return float(np.max(np.abs(got - ref))) / scale


BA_ENGINES = {}


def _ba_engine(name):
    def prepare(inst):
        if name == "reverse":
            run = ba.blocks_reverse_prepare(inst.block_params(), inst.measurements)
            P = inst.block_params()
            return lambda: ba.assemble(inst, run(P))
        return lambda: ba.ba_jacobian(inst, name)

    return prepare


for _name in ba.ENGINES:
    BA_ENGINES[_name] = _ba_engine(_name)

BA_CHECK_BLOCKS = 100


def ba_check(inst, engine: str, jac) -> float:
    """Compare sampled observation blocks against FD (forward mode when checking FD)."""
    n = inst.n_obs
    idx = np.unique(datagen.PortableRng(7).integers(min(n, BA_CHECK_BLOCKS), n))
    P = inst.block_params()[:, idx]
    m = inst.measurements[:, idx]
    ref = ba.blocks_forward(P, m) if engine == "fd" else ba.blocks_fd(P, m)
    cols = ba.block_columns(inst)[idx]
    got = np.zeros_like(ref)
    for a, j in enumerate(idx):
        for r, row in enumerate((2 * j, 2 * j + 1, 2 * n + j)):
            got[a, r] = _row_values(jac, row, cols[a])
    return rel_error(got, ref)


def _row_values(jac, row, cols) -> np.ndarray:
    indices, data = jac.row(row)
    lookup = dict(zip(indices.tolist(), data.tolist()))
    return np.array([lookup.get(int(c), 0.0) for c in cols])


def _ht_forward(inst):
    run = ht.ht_forward_prepare(inst)
    return lambda: run()


HT_ENGINES = {
    "forward": _ht_forward,
    "fd": lambda inst: lambda: ht.ht_jacobian(inst, "fd"),
}

HT_CHECK_U_COLUMNS = 20


def ht_check(inst, engine: str, cj) -> float:
    """Decompress and compare sampled columns with single-variable forward seeds."""
    n = inst.n_corr
    u_cols = ht.N_POSE + datagen.PortableRng(3).integers(min(2 * n, HT_CHECK_U_COLUMNS), 2 * n)
    cols = np.unique(np.concatenate([np.arange(ht.N_POSE), u_cols]))
    seed = np.zeros((inst.n_vars, cols.size))
    seed[cols, np.arange(cols.size)] = 1.0
    ref = grad_forward(ht.residual_function(inst), inst.theta(), seed)
    sj = cj.decompress()
    got = np.zeros_like(ref)
    where = {int(c): a for a, c in enumerate(cols)}
    for r, c, v in zip(sj.rows, sj.cols, sj.vals):
        a = where.get(int(c))
        if a is not None:
            got[r, a] = v
    return rel_error(got, ref)


@dataclass
class Objective:
    engines: dict
    check: Callable
    objective_task: Callable


OBJECTIVES = {
    "gmm": Objective(GMM_ENGINES, gmm_check, lambda inst: lambda: gmm.objective(inst, "vector")),
    "ba": Objective(BA_ENGINES, ba_check, lambda inst: lambda: ba.residuals(inst)),
    "ht": Objective(HT_ENGINES, ht_check, lambda inst: lambda: ht.ht_objective(inst)),
}


def cases_for_grid(grid: datagen.SizeGrid, seed: int = 0, data_dir=None) -> list[Case]:
    """Cases for every instance in ``grid``, read from ``data_dir`` when given."""
    d_dir = Path(data_dir) if data_dir is not None else None
    out = []
    for d, k, n in grid.gmm:
        if d_dir is None:
            load = lambda d=d, k=k, n=n: datagen.gen_gmm(d, k, n, 0.0, seed)
        else:
            load = lambda p=d_dir / datagen.gmm_filename(d, k, n): gmm.read_gmm(p)
        out.append(Case("gmm", f"d{d}_k{k}_n{n}", gmm.n_gmm_params(d, k), load))
    for c, p, o in grid.ba:
        if d_dir is None:
            load = lambda c=c, p=p, o=o: datagen.gen_ba(c, p, o, seed)
        else:
            load = lambda f=d_dir / datagen.ba_filename(c, p, o): ba.read_ba(f)
        out.append(Case("ba", f"c{c}_p{p}_o{o}", o, load))
    if grid.ht:
        size_class, ns = grid.ht
        model_cache = {}

        def model():
            if "m" not in model_cache:
                if d_dir is None:
                    model_cache["m"] = datagen.gen_ht_model(size_class, seed)
                else:
                    model_cache["m"] = ht.read_model(d_dir / datagen.ht_model_filename(size_class))
            return model_cache["m"]

        for n in ns:
            if d_dir is None:
                load = lambda n=n: datagen.gen_ht(size_class, n, seed, model=model())
            else:
                load = lambda n=n: ht.read_instance(d_dir / datagen.ht_filename(size_class, n), model())
            out.append(Case("ht", f"{size_class}_n{n}", n, load))
    return out


def check_case(case: Case, engines: Iterable[str], objectives=OBJECTIVES, inst=None) -> dict[str, float]:
    """Relative error of each engine on one case (``inf`` if it raised)."""
    obj = objectives[case.objective]
    inst = case.load() if inst is None else inst
    errs = {}
    for name in engines:
        if name not in obj.engines:
            continue
        try:
            errs[name] = obj.check(inst, name, obj.engines[name](inst)())
        except Exception:
            log.exception("%s/%s on %s raised", case.objective, name, case.size_label)
            errs[name] = math.inf
    return errs


def run_suite(
    cases: Iterable[Case],
    engines: Iterable[str],
    out_path=None,
    limit_s: float | None = None,
    max_repeats: int | None = None,
    budget_s: float | None = None,
    objectives=OBJECTIVES,
    tol: float = CHECK_TOL,
) -> list[TimingRecord]:
    """Check then time every engine on every case, appending each record to ``out_path``.

    Engines an objective does not offer are skipped.  A failing check gives a
    ``failed`` record, an exception ``crashed``, an over-limit run ``timeout``;
    the suite always carries on.
    """
    limit_s = default_time_limit() if limit_s is None else limit_s
    engines = list(engines)
    records = []

    def emit(rec):
        records.append(rec)
        if out_path is not None:
            append_csv(out_path, [rec])

    for case in cases:
        obj = objectives[case.objective]
        inst = case.load()
        base = dict(objective=case.objective, size_label=case.size_label, n_params_or_meas=case.size)
        try:
            obj_s, _ = time_adaptive(obj.objective_task(inst), limit_s, max_repeats=max_repeats, budget_s=budget_s)
        except RunTimeout:
            obj_s = None
        for name in engines:
            if name not in obj.engines:
                continue
            try:
                task = obj.engines[name](inst)
                err = obj.check(inst, name, task())
                if not err <= tol:
                    log.warning("%s/%s on %s: error %.3g exceeds %.1g", case.objective, name, case.size_label, err, tol)
                    emit(TimingRecord(engine=name, obj_s=obj_s, status="failed", max_err=err, **base))
                    continue
                der_s, reps = time_adaptive(task, limit_s, max_repeats=max_repeats, budget_s=budget_s)
                log.info("%s/%s on %s: %.3g s x%d, error %.2g", case.objective, name, case.size_label, der_s, reps, err)
                emit(TimingRecord(engine=name, obj_s=obj_s, der_s=der_s, repeats=reps, max_err=err, **base))
            except RunTimeout:
                emit(TimingRecord(engine=name, obj_s=obj_s, status="timeout", **base))
            except Exception:
                log.exception("%s/%s on %s crashed", case.objective, name, case.size_label)
                emit(TimingRecord(engine=name, obj_s=obj_s, status="crashed", **base))
    return records
