import numpy as np
import pytest

from numerics import DimensionError, InvalidStateError
from optim import OptimKind, OptimState, adamw_step, init_optim_state, optimizer_step, sgd_step


def test_sgd_step_is_functional():
    p = np.array([[1.0, 2.0]])
    g = np.array([[0.5, -1.0]])
    (updated,) = sgd_step([p], [g], 0.1)
    assert np.allclose(updated, [[0.95, 2.1]])
    assert np.array_equal(p, [[1.0, 2.0]])


def test_sgd_rejects_mismatched_shapes():
    with pytest.raises(DimensionError):
        sgd_step([np.ones((2, 2))], [np.ones((2, 3))], 0.1)
    with pytest.raises(DimensionError):
        sgd_step([np.ones((2, 2))], [], 0.1)


def test_adamw_first_step_moves_by_learning_rate():
    p = np.array([[1.0, -1.0, 0.5]])
    g = np.array([[3.0, -0.2, 10.0]])
    state = init_optim_state(OptimKind.ADAMW, 0.01, [p])
    state, (updated,) = adamw_step(state, [p], [g])
    assert state.step == 1
    assert np.allclose(updated, p - 0.01 * np.sign(g), rtol=0, atol=1e-8)


def test_adamw_zero_gradient_leaves_params():
    p = np.array([[1.0, -2.0]])
    state = init_optim_state(OptimKind.ADAMW, 0.1, [p])
    _, (updated,) = adamw_step(state, [p], [np.zeros_like(p)])
    assert np.array_equal(updated, p)


def test_adamw_decoupled_weight_decay():
    p = np.array([[1.0, -2.0]])
    state = init_optim_state(OptimKind.ADAMW, 0.1, [p], weight_decay=0.5)
    _, (updated,) = adamw_step(state, [p], [np.zeros_like(p)])
    assert np.array_equal(updated, p * (1.0 - 0.1 * 0.5))


def test_adamw_needs_initialized_state():
    p = np.ones((1, 2))
    with pytest.raises(InvalidStateError):
        adamw_step(OptimState(OptimKind.ADAMW, 0.1), [p], [p])
    state = init_optim_state(OptimKind.ADAMW, 0.1, [p])
    with pytest.raises(InvalidStateError):
        adamw_step(state, [p, p], [p, p])


def test_optimizer_step_dispatches():
    p = np.ones((2, 1))
    g = np.full((2, 1), 2.0)
    state = init_optim_state(OptimKind.SGD, 0.25, [p])
    state, (updated,) = optimizer_step(state, [p], [g])
    assert state.step == 1
    assert np.allclose(updated, 0.5)

    state = init_optim_state("adamw", 0.25, [p])
    state, _ = optimizer_step(state, [p], [g])
    assert state.kind is OptimKind.ADAMW
    assert state.step == 1


def test_sgd_is_additive_over_gradients():
    rng = np.random.default_rng(0)
    p, g1, g2 = (rng.standard_normal((3, 4)) for _ in range(3))
    (together,) = sgd_step([p], [g1 + g2], 0.05)
    (first,) = sgd_step([p], [g1], 0.05)
    (both,) = sgd_step([first], [g2], 0.05)
    np.testing.assert_allclose(both, together, rtol=1e-14, atol=1e-15)


def test_adamw_constant_gradient_steps_by_eta_times_g_over_g_plus_eps():
    p = np.array([[1.0, -1.0, 0.25]])
    g = np.array([[1e-7, -2.0, 5e-9]])
    eta, eps = 1e-3, 1e-8
    expected = eta * np.abs(g) / (np.abs(g) + eps)
    state = init_optim_state(OptimKind.ADAMW, eta, [p], eps=eps)
    for _ in range(100):
        state, (updated,) = adamw_step(state, [p], [g])
        np.testing.assert_allclose(np.abs(updated - p), expected, rtol=1e-9)
        p = updated
    assert state.step == 100
