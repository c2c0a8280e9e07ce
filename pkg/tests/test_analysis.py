import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refereerl.analysis import (
    VanishmentProfile,
    closed_form_profile,
    converged_critic_episode,
    converged_critic_gae,
    decay_rank_correlation,
    empirical_vanishment,
    mean_abs_beyond,
    sparse_reward_trajectory,
)
from refereerl.craftworld import CraftWorld, TaskTarget, default_env_config
from refereerl.errors import UsageError
from refereerl.policy import PolicyConfig
from refereerl.referee import OracleReferee
from refereerl.trainer import compute_gae

from oracles import naive_gae

# (0.99 * 0.95) ** 200 evaluated with decimal arithmetic
OFFSET_200 = 4.696344826922772e-06


def test_sparse_trajectory_example():
    np.testing.assert_allclose(sparse_reward_trajectory(3, 0.01, 1.0), [-0.01, -0.01, 0.99], rtol=0, atol=1e-15)


def test_sparse_trajectory_without_penalty():
    r = sparse_reward_trajectory(7, 0.0, 2.5)
    assert list(r) == [0.0] * 6 + [2.5]


@given(st.integers(1, 300), st.floats(0, 1), st.floats(-5, 5))
def test_sparse_trajectory_length(T, eps, R):
    assert len(sparse_reward_trajectory(T, eps, R)) == T


def test_sparse_trajectory_rejects_empty():
    with pytest.raises(UsageError):
        sparse_reward_trajectory(0, 0.01, 1.0)


def test_zero_offset_is_R():
    assert converged_critic_gae(10, 9, 0.99, 0.95, 1.7) == 1.7


def test_offset_200_value():
    v = converged_critic_gae(201, 0, 0.99, 0.95, 1.0)
    assert v == pytest.approx(OFFSET_200, rel=1e-12)
    # the rounded figure quoted for this offset is within 0.4 % of the exact value
    assert v == pytest.approx(4.68e-6, rel=0.01)


@pytest.mark.parametrize("k", [0, 1, 10, 50, 100, 200])
def test_closed_form_matches_compute_gae(k):
    T = 201
    rewards, values, dones = converged_critic_episode(T, 0.01, 1.0, 0.99)
    adv, _ = compute_gae(rewards, values, dones, 0.99, 0.95)
    assert abs(adv[T - 1 - k] - converged_critic_gae(T, T - 1 - k, 0.99, 0.95, 1.0)) < 1e-12
    assert abs(adv[T - 1 - k] - 0.9405**k) < 1e-12


def test_converged_episode_has_single_nonzero_td_error():
    rewards, values, dones = converged_critic_episode(50, 0.03, 1.0, 0.97)
    delta = rewards + 0.97 * values[1:] * ~dones - values[:-1]
    np.testing.assert_allclose(delta[:-1], 0.0, atol=1e-12)
    assert delta[-1] == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 120), st.floats(0.5, 0.999), st.floats(0.5, 1.0), st.floats(0.1, 3.0))
def test_successive_offsets_ratio_is_gamma_lambda(T, gamma, lam, R):
    for t in range(T - 1):
        a, b = converged_critic_gae(T, t, gamma, lam, R), converged_critic_gae(T, t + 1, gamma, lam, R)
        if b > 1e-250:
            assert a / b == pytest.approx(gamma * lam, rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 150), st.floats(0.5, 0.999), st.floats(0.5, 1.0))
def test_closed_form_is_invariant_to_step_penalty(T, gamma, lam):
    runs = []
    for eps in (0.0, 0.01, 0.1):
        rewards, values, dones = converged_critic_episode(T, eps, 1.0, gamma)
        runs.append(naive_gae(rewards, values, dones, gamma, lam))
    for other in runs[1:]:
        np.testing.assert_allclose(other, runs[0], rtol=0, atol=1e-12)
    expected = [(gamma * lam) ** (T - 1 - t) for t in range(T)]
    np.testing.assert_allclose(runs[0], expected, rtol=0, atol=1e-12)


def test_converged_gae_range_checks():
    with pytest.raises(UsageError):
        converged_critic_gae(5, 5, 0.99, 0.95, 1.0)
    with pytest.raises(UsageError):
        converged_critic_gae(5, -1, 0.99, 0.95, 1.0)


def test_closed_form_profile_series(tmp_path):
    p = closed_form_profile(0.99, 0.95, 1.0, 200)
    assert p.horizon_offsets == list(range(201))
    np.testing.assert_allclose(p.gae_values, p.closed_form, rtol=0, atol=1e-12)
    p.write_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "offset,A_t" and len(lines) == 202


def test_profile_rejects_ragged_series():
    with pytest.raises(UsageError):
        VanishmentProfile([0, 1], [1.0], [1.0, 0.5])


def test_no_success_gives_empty_profile():
    cfg = default_env_config()
    import dataclasses

    world = CraftWorld(dataclasses.replace(cfg, horizon=12))
    p = empirical_vanishment(world, TaskTarget("wooden_pickaxe"), critic_epochs=1, episodes=4, seed=0)
    assert p.empty and p.episodes_used == 0 and p.notes
    assert math.isnan(decay_rank_correlation(p))
    assert math.isnan(mean_abs_beyond(p, 50))


@pytest.fixture(scope="module")
def measured():
    """Critic-only fits on random-behaviour rollouts, with and without the oracle referee."""
    world = CraftWorld(default_env_config())
    kw = dict(critic_epochs=60, episodes=128, policy_config=PolicyConfig(hidden=(64, 64)), min_count=10, seed=0)
    er = empirical_vanishment(world, TaskTarget("wooden_pickaxe"), **kw)
    ar4 = empirical_vanishment(world, TaskTarget("wooden_pickaxe"), referee=OracleReferee(world), **kw)
    return er, ar4


def test_measured_profile_decays_like_closed_form(measured):
    er, _ = measured
    assert er.episodes_used > 50 and max(er.horizon_offsets) >= 100
    assert decay_rank_correlation(er) > 0.9


def test_measured_offset_zero_is_the_peak(measured):
    er, _ = measured
    assert er.horizon_offsets[0] == 0
    assert 0.5 < er.gae_values[0] <= 1.0
    assert er.gae_values[0] >= 0.95 * max(er.gae_values)
    assert er.gae_values[0] > max(v for k, v in zip(er.horizon_offsets, er.gae_values) if k >= 10)


def test_referee_keeps_far_advantages_alive(measured):
    er, ar4 = measured
    assert mean_abs_beyond(ar4, 50) > 5 * mean_abs_beyond(er, 50)


@pytest.mark.xfail(strict=True, reason="measured ratio is about 8x at desk scale; see the decisions ledger")
def test_referee_far_advantage_ratio_reaches_tenfold(measured):
    er, ar4 = measured
    assert mean_abs_beyond(ar4, 50) >= 10 * mean_abs_beyond(er, 50)
