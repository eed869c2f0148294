import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctdqn.sde_env import (
    DegenerateConstantsError,
    DiscreteActions,
    SdeModel,
    StepFailure,
    empirical_exceedance,
    euler_maruyama_step,
    ldp_radius,
    ldp_tail_bound,
    make_stabilization_env,
    simulate_episode,
)


def _stay(t, s):
    return np.zeros(1)


def _toward_origin(t, s):
    # dead zone keeps the rollout at rest once rounding leaves |s| ~ 1e-17
    return -np.sign(s) * (np.abs(s) > 1e-9)


def test_reward_table():
    model, _ = make_stabilization_env()
    assert model.reward(0.0, np.array([0.5]), np.array([-1.0])) == pytest.approx(-0.26, abs=1e-15)
    assert model.reward(0.0, np.array([0.0]), np.array([0.0])) == 0.0


def test_zero_noise_constant_trajectory():
    model, actions = make_stabilization_env(sigma=0.0)
    path = simulate_episode(model, actions, _stay, 3, 50, 0.1, s0=[0.3])
    assert all(tr.s_next[0] == 0.3 for tr in path)


def test_hand_stepping_reaches_origin():
    model, actions = make_stabilization_env(sigma=0.0)
    path = simulate_episode(model, actions, _toward_origin, 0, 10, 0.1, s0=[0.5])
    xs = [tr.s_next[0] for tr in path]
    np.testing.assert_allclose(xs[:5], [0.4, 0.3, 0.2, 0.1, 0.0], atol=1e-12)
    assert max(abs(x) for x in xs[4:]) < 1e-12


def test_determinism_and_episode_streams():
    model, actions = make_stabilization_env()
    pol = lambda t, s: actions[1]
    a = simulate_episode(model, actions, pol, 11, 30, 0.1)
    b = simulate_episode(model, actions, pol, 11, 30, 0.1)
    c = simulate_episode(model, actions, pol, 11, 30, 0.1, episode=1)
    assert [tr.s_next.tobytes() for tr in a] == [tr.s_next.tobytes() for tr in b]
    assert [tr.s_next.tobytes() for tr in a] != [tr.s_next.tobytes() for tr in c]


def test_truncation_flag_and_times():
    model, actions = make_stabilization_env(max_t=200)
    path = simulate_episode(model, actions, _stay, 0, 7, 0.1)
    assert len(path) == 7
    assert [tr.truncated for tr in path] == [False] * 6 + [True]
    np.testing.assert_allclose([tr.t for tr in path], 0.1 * np.arange(7))
    # horizon shorter than the cap: natural end, not truncated
    short, _ = make_stabilization_env(max_t=5)
    path = simulate_episode(short, actions, _stay, 0, 100, 0.1)
    assert len(path) == 5 and not path[-1].truncated


def test_step_failure_on_nan():
    model, _ = make_stabilization_env()
    with pytest.raises(StepFailure):
        euler_maruyama_step(model, 0.0, np.array([np.nan]), np.array([0.0]), np.zeros(1), 0.1)


def test_single_outer_clip():
    model, _ = make_stabilization_env(sigma=1.0)
    s = euler_maruyama_step(model, 0.0, np.array([0.95]), np.array([1.0]), np.array([3.0]), 0.1)
    assert s[0] == 1.0
    free = euler_maruyama_step(model.unclipped(), 0.0, np.array([0.95]), np.array([1.0]), np.array([3.0]), 0.1)
    assert free[0] == pytest.approx(0.95 + 0.1 + 3.0 * math.sqrt(0.1))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 2.0), st.integers(0, 2))
def test_clip_containment(seed, sigma, a_idx):
    model, actions = make_stabilization_env(sigma=sigma)
    path = simulate_episode(model, actions, lambda t, s: actions[a_idx], seed, 40, 0.1)
    assert all(-1.0 <= tr.s_next[0] <= 1.0 for tr in path)


def test_zero_noise_matches_fine_euler():
    model = SdeModel(
        state_dim=1,
        drift=lambda t, s, a: -s + np.sin(t),
        diffusion=lambda t, s, a: np.zeros((1, 1)),
        reward=lambda t, s, a: 0.0,
        terminal_reward=lambda s: 0.0,
        discount_rate=0.9,
        horizon=1.0,
    )
    acts = DiscreteActions([0.0])
    errs = []
    for dt in (0.1, 0.05):
        path = simulate_episode(model, acts, _stay, 0, 10_000, dt, s0=[1.0])
        # reference: same ODE with 100x finer explicit Euler steps
        s, h = 1.0, dt / 100
        for k in range(int(round(1.0 / h))):
            s += h * (-s + math.sin(k * h))
        errs.append(abs(path[-1].s_next[0] - s))
    assert errs[1] < 0.6 * errs[0]


def test_ldp_constants_hand_values():
    c = ldp_radius(1.0, 1.0, 1.0, 1, 1.0, 0.0, 0.1)
    # independent evaluation: c1 = 2 e^6, r1 = 1 + sqrt(16 ln(c1 / 0.1))
    c1 = 2.0 * math.e**6
    assert c.c1 == pytest.approx(c1, rel=1e-12)
    assert c.c1 == pytest.approx(806.857, rel=1e-3)
    assert c.c2 == 0.0625
    assert c.c3 == 1.0
    assert c.r1 == pytest.approx(1.0 + 4.0 * math.sqrt(math.log(c1 * 10.0)), rel=1e-12)
    assert c.r1 == pytest.approx(12.997, rel=1e-3)
    assert c.bound == pytest.approx(0.1, rel=1e-9)


def test_ldp_c2_formula():
    assert ldp_radius(1.0, 0.0, 1.0, 2, 1.0, 0.0, 0.5).c2 == 1.0 / 16.0


@settings(max_examples=100, deadline=None)
@given(
    st.floats(0.0, 3.0),
    st.floats(1e-3, 3.0),
    st.floats(0.0, 5.0),
    st.integers(1, 4),
    st.floats(1e-6, 10.0),
    st.floats(0.0, 5.0),
    st.floats(1e-6, 0.999),
)
def test_ldp_radius_properties(lh, ls, k, n, T, x, delta):
    c = ldp_radius(lh, ls, k, n, T, x, delta)
    # c1 >= 2 e^2 > 1 > delta, so the logarithm clamp is never active for delta in (0, 1)
    assert c.c1 >= 2.0 * math.e**2 * (1 - 1e-15)
    assert c.r1 > c.c3 * (1.0 + x)
    assert c.bound == pytest.approx(delta, rel=1e-9)
    assert ldp_tail_bound(c, c.c3 * (1.0 + x)) == 1.0


def test_ldp_errors():
    with pytest.raises(DegenerateConstantsError):
        ldp_radius(0.0, 0.0, 1.0, 1, 1.0, 0.0, 0.1)
    with pytest.raises(ValueError):
        ldp_radius(1.0, 1.0, 1.0, 1, 1.0, 0.0, 1.5)


def test_exceedance_trivial_cases():
    model, actions = make_stabilization_env(clip=False)
    pol = lambda t, S: np.zeros_like(S)
    assert empirical_exceedance(model, actions, pol, 0.0, 50, 0, 20, 0.1) == 1.0
    quiet, _ = make_stabilization_env(sigma=0.0, clip=False)
    assert empirical_exceedance(quiet, actions, lambda t, S: np.ones_like(S), 5.0, 20, 0, 20, 0.1) == 0.0


def test_exceedance_requires_unclipped():
    model, actions = make_stabilization_env()
    with pytest.raises(ValueError):
        empirical_exceedance(model, actions, lambda t, S: np.zeros_like(S), 1.0, 10, 0, 10, 0.1)


def test_exceedance_batched_matches_sequential():
    batched, actions = make_stabilization_env(sigma=0.5, clip=False, max_t=30)
    seq = SdeModel(
        state_dim=1,
        drift=lambda t, s, a: np.asarray(a, dtype=float),
        diffusion=lambda t, s, a: np.full((1, 1), 0.5),
        reward=lambda t, s, a: 0.0,
        terminal_reward=lambda s: 0.0,
        discount_rate=0.99,
        horizon=3.0,
    )
    pol = lambda t, s: -np.sign(s)
    f1 = empirical_exceedance(batched, actions, pol, 0.6, 200, 5, 30, 0.1, s0=[0.2])
    f2 = empirical_exceedance(seq, actions, pol, 0.6, 200, 5, 30, 0.1, s0=[0.2])
    assert f1 == f2
    assert 0.0 < f1 < 1.0


def test_exceedance_dominated_by_bound():
    model, actions = make_stabilization_env(clip=False, max_t=10)
    c = ldp_radius(1.0, 1.0, 1.0, 1, 1.0, 0.0, 0.1)
    freq = empirical_exceedance(model, actions, lambda t, S: -np.sign(S), c.r1, 2000, 1, 10, 0.1)
    assert freq <= c.bound
