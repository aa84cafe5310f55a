import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lrflow import autodiff as ad
from lrflow.autodiff import Tensor
from lrflow.lexico import JointLosses, LexicoState, compute_lambda, joint_step
from lrflow.optim import Adam


def losses(g_vae, g_flow, l_flow=0.0):
    return JointLosses(0.0, l_flow, np.asarray(g_vae, float), np.asarray(g_flow, float))


def test_lambda_examples():
    assert compute_lambda(losses([0, 1], [2, 0], 2.0), 0.0) == (0.5, False)
    assert compute_lambda(losses([5, 0], [1, 0], 1.0), 0.0)[0] == 0.0
    assert compute_lambda(losses([1, 1], [2, 0], 3.0), 0.0)[0] == 0.25


def test_lambda_degenerate_flag():
    lam, degenerate = compute_lambda(losses([1, 1], [1e-7, 0], 3.0), 0.0)
    assert lam == 0.0 and degenerate


def test_mismatched_gradient_lengths():
    with pytest.raises(ValueError):
        losses([1, 2], [1, 2, 3])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lambda_matches_formula(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(1, 20)
    gv, gf = rng.standard_normal(n), rng.standard_normal(n)
    phi = rng.uniform(-3, 3)
    c = rng.uniform(0, 2)
    lam, _ = compute_lambda(losses(gv, gf, phi + c), c)
    expected = max((phi - float(np.dot(gv, gf))) / float(np.dot(gf, gf)), 0.0)
    assert lam >= 0
    assert abs(lam - expected) <= 1e-12 * max(1.0, abs(expected))


def quadratic_problem(theta0=(1.0, 0.0)):
    theta = Tensor(np.array(theta0), requires_grad=True, name="theta")

    def l_vae():
        return ad.sum_sq(ad.slice_(theta, slice(0, 1)))

    def l_flow():
        return ad.sum_sq(ad.sub(ad.slice_(theta, slice(1, 2)), 1.0))

    return theta, l_vae, l_flow


def test_hand_evaluated_step():
    theta, lv, lf = quadratic_problem()
    state = LexicoState(lr=0.1, c=0.0)
    out = joint_step([theta], lv, lf, state)
    assert state.lambda_history == [0.25]
    np.testing.assert_allclose(theta.data, [0.8, 0.05], rtol=0, atol=1e-15)
    assert out.l_vae == 1.0 and out.l_flow == 1.0


def test_zero_step_size_leaves_parameters_bitwise():
    theta, lv, lf = quadratic_problem()
    before = theta.data.copy()
    joint_step([theta], lv, lf, LexicoState(lr=0.0))
    assert np.array_equal(theta.data, before)


def test_reduction_to_pure_vae_step():
    # l_flow <= c and g_vae . g_flow >= 0 => lambda 0 and the VAE step exactly
    theta, lv, lf = quadratic_problem((1.0, 0.9))
    c = 5.0
    state = LexicoState(lr=0.1, c=c, c_mode="fixed")
    joint_step([theta], lv, lf, state)
    assert state.lambda_history == [0.0]
    theta2, lv2, _ = quadratic_problem((1.0, 0.9))
    joint_step([theta2], lv2, None, LexicoState(lr=0.1))
    assert np.array_equal(theta.data, theta2.data)


def test_reduction_holds_with_adam():
    theta, lv, lf = quadratic_problem((1.0, 0.9))
    theta2, lv2, _ = quadratic_problem((1.0, 0.9))
    joint_step([theta], lv, lf, LexicoState(lr=0.1, c=5.0, c_mode="fixed"), Adam([theta]))
    joint_step([theta2], lv2, None, LexicoState(lr=0.1), Adam([theta2]))
    assert np.array_equal(theta.data, theta2.data)


def test_fixed_lambda_history_constant():
    theta, lv, lf = quadratic_problem()
    state = LexicoState.from_mode_string("fixed_lambda:2.0", lr=0.05)
    for _ in range(5):
        joint_step([theta], lv, lf, state)
    assert state.lambda_history == [2.0] * 5
    assert state.mode_label == "fixed_lambda:2"


def test_lambda_nonnegative_along_run():
    theta, lv, lf = quadratic_problem((2.0, -3.0))
    state = LexicoState(lr=0.05)
    for _ in range(50):
        joint_step([theta], lv, lf, state)
    assert min(state.lambda_history) >= 0


def test_running_min_from_first_loss():
    theta, _, lf = quadratic_problem((1.0, -0.5))

    def lv():
        return ad.sum_sq(theta)

    state = LexicoState(lr=0.1, c=math.inf)
    joint_step([theta], lv, lf, state)
    first = state.c
    assert first == 2.25
    joint_step([theta], lv, lf, state)
    assert state.c < first


def test_non_finite_step_skipped_and_lr_halved():
    theta = Tensor(np.array([1.0]), requires_grad=True)

    def bad():
        return ad.sum_sq(ad.exp(ad.scale(theta, 1000.0)))

    state = LexicoState(lr=0.2)
    before = theta.data.copy()
    assert joint_step([theta], bad, None, state) is None
    assert state.lr == 0.1
    assert len(state.incidents) == 1
    assert np.array_equal(theta.data, before)
    assert state.step == 1 and state.lambda_history == []


def test_mode_parsing():
    assert LexicoState.from_mode_string("separate").mode == "separate"
    assert LexicoState.from_mode_string("fixed:0.1").fixed_lambda == 0.1
    with pytest.raises(ValueError):
        LexicoState.from_mode_string("annealed")
    with pytest.raises(ValueError):
        LexicoState.from_mode_string("fixed_lambda:-1")


def test_state_round_trip():
    s = LexicoState(lr=0.3, mode="fixed", fixed_lambda=0.1, c=0.5, step=4,
                    lambda_history=[0.1] * 4)
    assert LexicoState.from_dict(s.to_dict()) == s


def test_separate_parameters_disjoint():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([2.0]), requires_grad=True)
    state = LexicoState.from_mode_string("separate", lr=0.5)
    joint_step([a, b], lambda: ad.sum_sq(a), lambda: ad.sum_sq(b), state)
    np.testing.assert_allclose(a.data, [0.0])
    np.testing.assert_allclose(b.data, [0.0])
