import tracemalloc

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from diffbench import datagen, gmm
from diffbench.ad import grad_fd, grad_forward, grad_reverse, record
from diffbench.errors import DimensionError
from diffbench.kernels import assemble_Q


def relerr(a, b):
    return np.max(np.abs(np.asarray(a) - b)) / max(1.0, np.max(np.abs(b)))


def test_param_count_formula():
    assert gmm.n_gmm_params(2, 5) == 30
    assert gmm.n_gmm_params(64, 200) == 429000
    inst = datagen.gen_gmm(3, 4, 10)
    assert inst.theta().size == inst.n_params == 4 * (1 + 6 + 3)


def test_all_zero_scalar_case():
    inst = gmm.GmmInstance(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 1)))
    for v in gmm.VARIANTS:
        assert gmm.objective(inst, v) == 0.5


def test_alpha_shift_invariance():
    inst = datagen.gen_gmm(2, 4, 30, seed=3)
    shifted = gmm.GmmInstance(inst.alphas + 3.7, inst.means, inst.icf, inst.data)
    assert gmm.objective(shifted) == pytest.approx(gmm.objective(inst), rel=1e-12)
    assert abs(gmm.gmm_gradient_manual(inst)[: inst.K].sum()) <= 1e-10


def test_against_scipy_mixture_density():
    # independent route: weights softmax(alpha), covariance inv(Q^T Q)
    inst = datagen.gen_gmm(3, 4, 25, m=1.5, seed=5)
    d, k = inst.D, inst.K
    w = np.exp(inst.alphas - inst.alphas.max())
    w /= w.sum()
    dens = np.zeros(inst.N)
    for j in range(k):
        Q = assemble_Q(inst.icf[:d, j], inst.icf[d:, j])
        cov = np.linalg.inv(Q.T @ Q)
        dens += w[j] * multivariate_normal(inst.means[:, j], cov).pdf(inst.data.T)
    loglik = np.sum(np.log(dens)) + inst.N * d / 2 * np.log(2 * np.pi)
    q, l = inst.icf[:d], inst.icf[d:]
    prior = 0.5 * (np.sum(np.exp(2 * q)) + np.sum(l * l)) - inst.wishart_m * q.sum()
    assert gmm.objective(inst) == pytest.approx(loglik + prior, rel=1e-10)


def test_variants_agree():
    inst = datagen.gen_gmm(2, 5, 100, seed=0)
    ref = gmm.objective(inst, "standard")
    for v in ("split", "vector"):
        assert gmm.objective(inst, v) == pytest.approx(ref, rel=1e-10)


def test_vector_reduces_for_identity_factor():
    x = np.array([[1.0, -2.0, 0.5]])
    inst = gmm.GmmInstance(np.array([0.3]), np.zeros((1, 1)), np.zeros((1, 1)), x)
    # one component: first term per point is alpha - |x|^2/2, normaliser removes alpha
    expected = np.sum(0.3 - 0.5 * x[0] ** 2) - 3 * 0.3 + 0.5
    assert gmm.objective(inst, "vector") == pytest.approx(expected, rel=1e-14)


def test_vector_workspace_is_linear_in_n():
    peaks = []
    for n in (2000, 8000):
        inst = datagen.gen_gmm(8, 3, n)
        tracemalloc.start()
        gmm.objective(inst, "vector")
        peaks.append(tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
    assert 3.0 < peaks[1] / peaks[0] < 5.0


def test_split_pieces():
    inst = datagen.gen_gmm(2, 3, 1, seed=8)
    f = gmm.gmm_point_term(inst.alphas, inst.means, inst.icf, inst.data[:, 0])
    g = gmm.gmm_global_term(inst.alphas, inst.icf, 1, inst.wishart_m)
    assert f + g == pytest.approx(gmm.objective(inst, "standard"), rel=1e-13)


def test_split_is_permutation_invariant():
    inst = datagen.gen_gmm(2, 3, 12, seed=9)
    perm = inst.data[:, ::-1]
    a = gmm.gmm_objective_split(inst.alphas, inst.means, inst.icf, inst.data)
    b = gmm.gmm_objective_split(inst.alphas, inst.means, inst.icf, perm)
    assert a == pytest.approx(b, rel=1e-13)


@pytest.fixture(scope="module")
def small():
    return datagen.gen_gmm(2, 5, 100, seed=0)


def test_manual_matches_reverse_and_fd(small):
    f = gmm.theta_function(small)
    tape, _ = record(f, small.theta())
    g_rev = grad_reverse(tape)
    g_man = gmm.gmm_gradient_manual(small)
    assert relerr(g_man, g_rev) <= 1e-10
    assert relerr(g_man, grad_fd(f, small.theta())) <= 1e-6


def test_split_gradient_matches_whole(small):
    tape, _ = record(gmm.theta_function(small), small.theta())
    assert relerr(gmm.gmm_gradient_split(small), grad_reverse(tape)) <= 1e-10


def test_all_variants_differentiate_the_same(small):
    ref = gmm.gmm_gradient_manual(small)
    for v in gmm.VARIANTS:
        g = grad_forward(gmm.theta_function(small, v), small.theta())[0]
        assert relerr(g, ref) <= 1e-10, v


def test_single_component_alpha_gradient_is_zero():
    inst = datagen.gen_gmm(3, 1, 20, seed=1)
    assert gmm.gmm_gradient_manual(inst)[0] == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 6), st.floats(0, 3), st.integers(0, 100))
def test_manual_gradient_property(d, k, n, m, seed):
    inst = datagen.gen_gmm(d, k, n, m, seed)
    g = grad_forward(gmm.theta_function(inst), inst.theta())[0]
    assert relerr(gmm.gmm_gradient_manual(inst), g) <= 1e-10


def test_unpack_roundtrip():
    inst = datagen.gen_gmm(3, 2, 4)
    a, mu, icf = gmm.unpack(inst.theta(), 3, 2)
    np.testing.assert_array_equal(mu, inst.means)
    np.testing.assert_array_equal(icf, inst.icf)
    np.testing.assert_array_equal(inst.with_theta(inst.theta() + 1.0).alphas, a + 1.0)


def test_validation():
    with pytest.raises(DimensionError):
        gmm.GmmInstance(np.zeros(2), np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 5)))
    with pytest.raises(DimensionError):
        gmm.GmmInstance(np.zeros(3), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 5)))


def test_file_roundtrip(tmp_path):
    inst = datagen.gen_gmm(3, 2, 5, m=2.0, seed=4)
    p = tmp_path / "g.txt"
    gmm.write_gmm(inst, p)
    back = gmm.read_gmm(p)
    for name in ("alphas", "means", "icf", "data"):
        np.testing.assert_array_equal(getattr(back, name), getattr(inst, name))
    assert back.wishart_m == 2.0
    p.write_text(p.read_text() + "1.0\n")
    with pytest.raises(DimensionError):
        gmm.read_gmm(p)
