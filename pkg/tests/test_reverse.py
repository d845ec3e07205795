import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffbench import datagen, gmm
from diffbench.ad import AdjointBuffer, Tape, grad_forward, grad_reverse, jacobian_reverse, record
from diffbench.errors import DimensionError, UnsupportedOperationError
from diffbench.kernels import logsumexp, rodrigues_rotate


def test_exp_plus_x_tape():
    tape, y = record(lambda x: np.exp(x) + x, np.array(1.0))
    assert len(tape) == 3  # input, exp, add
    assert tape.ops[0] == "input"
    assert y == pytest.approx(math.e + 1.0)
    assert grad_reverse(tape)[0] == pytest.approx(math.e + 1.0)


def test_square_and_product():
    tape, _ = record(lambda x: x * x, np.array([3.0]))
    assert grad_reverse(tape, np.ones(1))[0] == 6.0
    tape, _ = record(lambda v: v[0] * v[1], np.array([2.0, 5.0]))
    np.testing.assert_array_equal(grad_reverse(tape), [5.0, 2.0])


def test_tape_is_topologically_ordered():
    tape, _ = record(lambda v: np.sum(np.sin(v) * np.exp(v)) / np.sqrt(v[0]), np.array([1.0, 2.0]))
    for i, args in enumerate(tape.args):
        assert all(a < i for a in args if isinstance(a, int))


def test_vector_output_needs_seed_of_right_length():
    tape, _ = record(lambda x: x * x, np.array([1.0, 2.0]))
    with pytest.raises(DimensionError):
        grad_reverse(tape)
    with pytest.raises(DimensionError):
        grad_reverse(tape, np.ones(3))


def test_unsupported_op_names_opcode():
    with pytest.raises(UnsupportedOperationError) as exc:
        record(np.tanh, np.ones(2))
    assert exc.value.opcode == "tanh"


def _mixed(v):
    A = np.arange(6.0).reshape(3, 2)
    w = A @ v[:2]
    z = np.concatenate([w, np.stack([v[2], v[0]])])
    r = rodrigues_rotate(v[:3], np.reshape(z[:3], (3,)))
    s = np.maximum(v, 0.1) + np.where(v > 0.0, np.log(v * v + 1.0), v * v)
    return np.concatenate([r, s / (1.0 + np.cos(v)), np.reshape(logsumexp(z), (1,)), np.reshape(np.max(z), (1,))])


@settings(max_examples=30)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_jacobian_matches_forward(xs):
    x = np.array(xs)
    tape, _ = record(_mixed, x)
    np.testing.assert_allclose(jacobian_reverse(tape), grad_forward(_mixed, x), rtol=1e-12, atol=1e-12)


def test_sweep_is_linear_in_seed():
    x = np.array([0.3, -1.2, 0.8])
    tape, y = record(_mixed, x)
    rng = np.random.default_rng(0)
    u, v = rng.normal(size=(2, tape.n_outputs))
    lhs = grad_reverse(tape, 2.0 * u - 3.0 * v)
    rhs = 2.0 * grad_reverse(tape, u) - 3.0 * grad_reverse(tape, v)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_replay_is_bitwise_deterministic():
    inst = datagen.gen_gmm(2, 3, 20, seed=1)
    f = gmm.theta_function(inst)
    tape, y = record(f, inst.theta())
    assert y == gmm.objective(inst)
    again = tape.replay(inst.theta())
    assert again.outputs.reshape(-1)[0] == y
    assert np.array_equal(grad_reverse(again), grad_reverse(tape))
    assert np.array_equal(grad_reverse(tape), grad_reverse(tape))


def test_replay_at_new_point_matches_fresh_record():
    inst = datagen.gen_gmm(3, 2, 15, seed=2)
    f = gmm.theta_function(inst)
    theta = inst.theta()
    tape, _ = record(f, theta)
    moved = theta + 0.01
    fresh, y = record(f, moved)
    replayed = tape.replay(moved)
    assert replayed.outputs.reshape(-1)[0] == y
    np.testing.assert_allclose(grad_reverse(replayed), grad_reverse(fresh), rtol=1e-13)


def test_branch_is_frozen_on_replay():
    tape, _ = record(lambda v: np.where(v > 0.0, v * v, -v), np.array([1.0]))
    # recorded on the positive branch; replaying at -1 keeps x^2
    assert tape.replay(np.array([-1.0])).outputs.reshape(-1)[0] == 1.0
    assert grad_reverse(tape.replay(np.array([-1.0])))[0] == -2.0


def test_gmm_gradient_matches_forward():
    inst = datagen.gen_gmm(2, 5, 100, seed=0)
    f = gmm.theta_function(inst)
    tape, _ = record(f, inst.theta())
    g_rev = grad_reverse(tape)
    g_fwd = grad_forward(f, inst.theta())[0]
    assert np.max(np.abs(g_rev - g_fwd)) / max(1.0, np.max(np.abs(g_fwd))) <= 1e-12


def test_adjoint_buffer():
    buf = AdjointBuffer(3)
    assert len(buf) == 3
    buf.accumulate(1, np.array([1.0, 2.0]))
    buf.accumulate(1, np.array([0.5, 0.5]))
    np.testing.assert_array_equal(buf.adjoints[1], [1.5, 2.5])
    assert buf.adjoints[0] is None


def test_constant_output():
    tape, _ = record(lambda v: np.ones(2), np.array([1.0]))
    assert isinstance(tape, Tape)
    np.testing.assert_array_equal(jacobian_reverse(tape), np.zeros((2, 1)))
