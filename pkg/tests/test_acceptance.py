"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line with its wall time
and asserts both the numerical tolerance and the runtime budget.
"""

import contextlib
import time

import numpy as np
import pytest

from diffbench import ba, datagen, gmm, harness, ht
from diffbench.ad import fd_directional, grad_fd, grad_forward, grad_reverse, record
from diffbench.cli import main
from diffbench.errors import RunTimeout
from diffbench.harness import rel_error


@pytest.fixture
def criterion(capsys):
    @contextlib.contextmanager
    def run(number, summary, budget_s):
        t0 = time.perf_counter()
        ok = False
        try:
            yield
            elapsed = time.perf_counter() - t0
            assert elapsed < budget_s, f"took {elapsed:.1f} s, budget {budget_s} s"
            ok = True
        finally:
            elapsed = time.perf_counter() - t0
            with capsys.disabled():
                print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'} {summary} ({elapsed:.1f} s / {budget_s} s)")

    return run


def test_criterion_1_gmm_engine_agreement(criterion):
    with criterion(1, "GMM manual/forward/reverse agree <=1e-10, central FD <=1e-6", 10):
        for d, k in ((2, 5), (10, 25)):
            inst = datagen.gen_gmm(d, k, 1000)
            f = gmm.theta_function(inst)
            theta = inst.theta()
            grads = {
                "manual": gmm.gmm_gradient_manual(inst),
                "forward": grad_forward(f, theta, chunk=64)[0],
                "reverse": grad_reverse(record(f, theta)[0]),
            }
            g_fd = grad_fd(f, theta)
            names = list(grads)
            for i, a in enumerate(names):
                for b in names[i + 1 :]:
                    assert rel_error(grads[a], grads[b]) <= 1e-10, (d, k, a, b)
                assert rel_error(g_fd, grads[a]) <= 1e-6, (d, k, a)


def test_criterion_2_parameter_counts(criterion):
    with criterion(2, "eight GMM gradient dimensions", 1):
        expected = [30, 330, 1200, 3300, 10725, 21450, 53625, 429000]
        for n in (1000, 10000):
            grid = datagen.gmm_grid(n)
            assert [k * (1 + 2 * d + d * (d - 1) // 2) for d, k, _ in grid] == expected
            assert [gmm.n_gmm_params(d, k) for d, k, _ in grid] == expected
        # the generated instance carries exactly that many parameters
        assert datagen.gen_gmm(64, 200, 1).theta().size == 429000


def test_criterion_3_gmm_variants(criterion):
    with criterion(3, "GMM standard/split/vector objectives and split gradient <=1e-10", 30):
        for d, k, n in datagen.gmm_grid(1000):
            if gmm.n_gmm_params(d, k) > 3300:
                continue
            inst = datagen.gen_gmm(d, k, n)
            ref = gmm.objective(inst, "standard")
            for variant in ("split", "vector"):
                assert abs(gmm.objective(inst, variant) - ref) <= 1e-10 * abs(ref), (d, k, variant)
            whole = grad_reverse(record(gmm.theta_function(inst), inst.theta())[0])
            assert rel_error(gmm.gmm_gradient_split(inst), whole) <= 1e-10, (d, k)


def test_criterion_4_ba_structure(criterion):
    with criterion(4, "BA nnz and row layout, dense <=1e-12, 100 FD blocks <=1e-6", 60):
        small = datagen.gen_ba(2, 4, 6)
        J = ba.ba_jacobian(small)
        assert J.nnz == 186 == 31 * 6
        counts = J.row_counts()
        assert np.all(counts[:12] == 15) and np.all(counts[12:] == 1)
        for j in range(6):
            assert J.row(12 + j)[0].tolist() == [2 * 11 + 4 * 3 + j]
        dense = grad_forward(ba.residual_function(small), ba.full_parameter_vector(small))
        assert rel_error(J.to_dense(), dense) <= 1e-12

        big = datagen.gen_ba(21, 11000, 36000)
        J = ba.ba_jacobian(big)
        assert J.nnz == 31 * 36000
        sample = np.random.default_rng(0).choice(36000, 100, replace=False)
        P = big.block_params()[:, sample]
        ref = ba.blocks_fd(P, big.measurements[:, sample])
        cols = ba.block_columns(big)[sample]
        for b, obs in enumerate(sample):
            got = np.zeros((3, 15))
            for r, row in enumerate((2 * obs, 2 * obs + 1)):
                idx, vals = J.row(row)
                got[r] = vals[np.searchsorted(idx, cols[b])]
            idx, vals = J.row(2 * 36000 + obs)
            got[2, 14] = vals[0]
            assert idx.tolist() == [cols[b, 14]]
            assert rel_error(got, ref[b]) <= 1e-6, obs


def test_criterion_5_ht_compression(criterion):
    with criterion(5, "HT 28-seed Jacobian equals dense <=1e-12, 28 passes, FD columns <=1e-6", 60):
        toy = datagen.toy_ht(4)
        cj = ht.ht_jacobian(toy)
        assert cj.passes == 28
        dense = ht.ht_jacobian_dense(toy)
        assert dense.shape == (12, 26 + 8)
        assert rel_error(cj.decompress().to_dense(), dense) <= 1e-12

        small = datagen.gen_ht("small")
        assert small.model.n_vertices == 544 and small.n_corr == 192
        cj = ht.ht_jacobian(small)
        assert cj.passes == 28
        J = cj.decompress()
        rng = np.random.default_rng(1)
        cols = np.concatenate([np.arange(26), 26 + rng.choice(2 * 192, 20, replace=False)])
        seed = np.zeros((small.n_vars, cols.size))
        seed[cols, np.arange(cols.size)] = 1.0
        fd = fd_directional(ht.residual_function(small), small.theta(), seed)
        got = np.zeros((3 * 192, cols.size))
        for r in range(3 * 192):
            idx, vals = J.row(r)
            hit = np.isin(cols, idx)
            got[r, hit] = vals[np.searchsorted(idx, cols[hit])]
        assert rel_error(got, fd) <= 1e-6


def _relative(inst, engine):
    objective_s, _ = harness.time_adaptive(harness.OBJECTIVES["gmm"].objective_task(inst), budget_s=2.0)
    task = harness.GMM_ENGINES[engine](inst)
    derivative_s, _ = harness.time_adaptive(task, budget_s=2.0)
    return derivative_s / objective_s


def test_criterion_6_scaling(criterion):
    with criterion(6, "reverse relative runtime varies <3x, FD at 3300 >=10x FD at 30", 900):
        reverse, fd = {}, {}
        for d, k, n in datagen.gmm_grid(1000):
            p = gmm.n_gmm_params(d, k)
            if p > 3300:
                continue
            inst = datagen.gen_gmm(d, k, n)
            reverse[p] = _relative(inst, "reverse")
            fd[p] = _relative(inst, "fd")
        print("\n  params  reverse_rel  fd_rel")
        for p in sorted(reverse):
            print(f"  {p:6d}  {reverse[p]:11.2f}  {fd[p]:8.1f}")
        assert sorted(reverse) == [30, 330, 1200, 3300]
        assert max(reverse.values()) / min(reverse.values()) < 3.0
        assert fd[3300] / fd[30] >= 10.0


class _FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def test_criterion_7_timing_protocol(criterion):
    with criterion(7, "synthetic-clock repeat counts 1000/100/10/1 and 40000 s timeout", 5):
        clock = _FakeClock()
        for seconds, expected in ((1e-3, 1000), (10.0, 100), (60.0, 10), (130.0, 1)):

            def task(s=seconds):
                clock.now += s

            mean, repeats = harness.time_adaptive(task, clock=clock)
            assert repeats == expected and mean == pytest.approx(seconds)

        def hang():
            clock.now += 40000.5

        with pytest.raises(RunTimeout):
            harness.time_adaptive(hang, clock=clock)
        assert harness.DEFAULT_TIME_LIMIT == 40000.0


def test_criterion_8_determinism_and_pipeline(criterion, tmp_path, capsys):
    with criterion(8, "gen byte-identical, gen/check/run/plot on paper-ht-small exits 0", 120):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["gen", "--preset", "paper-ht-small", "--out", str(out)]) == 0
        names = sorted(p.name for p in a.iterdir())
        assert names == sorted(p.name for p in b.iterdir()) and len(names) == 4
        for name in names:
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

        csv = tmp_path / "ht.csv"
        assert main(["check", "--size", "paper-ht-small", "--data", str(a)]) == 0
        assert main(["run", "--size", "paper-ht-small", "--data", str(a), "--out", str(csv), "--max-repeats", "3"]) == 0
        assert main(["plot", "--in", str(csv), "--out", str(tmp_path / "ht.svg"), "--relative"]) == 0
        assert len(harness.read_csv(csv)) == 6
        assert (tmp_path / "ht.svg").stat().st_size > 0
        capsys.readouterr()
