"""Environment dynamics, episode harness, and scripted controllers."""

import math

import numpy as np
import pytest

from nldtree.envs import (
    ENVIRONMENTS,
    CarFollowing,
    CarFollowingGap,
    CartPole,
    CartPolePD,
    EpisodeDoneError,
    MountainCar,
    MountainCarEnergy,
    cartpole_dynamics,
    make_env,
    make_scripted_oracle,
    rollout,
)


class ConstantPolicy:
    def __init__(self, action: int):
        self.action = action

    def act(self, state):
        return self.action


class RandomPolicy:
    def __init__(self, n_actions: int, seed: int):
        self.n_actions = n_actions
        self.rng = np.random.default_rng(seed)

    def act(self, state):
        return int(self.rng.integers(self.n_actions))


# --- cart-pole dynamics ---------------------------------------------------


def test_cartpole_push_is_mirror_symmetric():
    right = cartpole_dynamics((0.0, 0.0, 0.0, 0.0), 10.0)
    left = cartpole_dynamics((0.0, 0.0, 0.0, 0.0), -10.0)
    assert right[1] > 0.0 and right[3] < 0.0  # cart right, pole tips back
    assert left == pytest.approx([-v for v in right])


def test_cartpole_zero_force_is_a_fixed_point_upright():
    state = (0.3, 0.0, 0.0, 0.0)
    assert cartpole_dynamics(state, 0.0) == pytest.approx(state)


def test_unforced_pole_falls_within_an_episode():
    # A small initial tilt diverges without control; integrate the open
    # dynamics and watch the angle cross the termination threshold.
    state = (0.0, 0.0, 0.01, 0.0)
    limit = 24.0 * math.pi / 180.0
    for step in range(200):
        state = cartpole_dynamics(state, 0.0)
        if abs(state[2]) > limit:
            break
    assert abs(state[2]) > limit


def test_cartpole_terminates_on_entry_beyond_angle_limit():
    env = CartPole()
    env.reset(seed=0)
    env.state = (0.0, 0.0, 25.0 * math.pi / 180.0, 0.0)
    _, reward, done, success = env.step(0)
    assert done and not success
    assert reward == 1.0


def test_cartpole_success_means_full_episode():
    env = CartPole()
    for seed in range(12):
        episode = rollout(env, RandomPolicy(2, seed), seed)
        assert 1.0 <= episode.cumulative_reward <= 200.0
        assert episode.success == (episode.cumulative_reward == 200.0)
        assert np.all(episode.rewards == 1.0)


def test_scripted_balancer_keeps_the_pole_up():
    env = CartPole()
    oracle = CartPolePD()
    successes = sum(rollout(env, oracle, seed).success for seed in range(50))
    assert successes >= 45


def test_scripted_balancer_decision():
    assert CartPolePD().act((0.0, 0.0, 0.1, 0.0)) == 1
    assert CartPolePD().act((0.0, 0.0, -0.1, 0.0)) == 0


# --- mountain car ---------------------------------------------------------


def test_coasting_never_escapes_the_valley():
    env = MountainCar()
    episode = rollout(env, ConstantPolicy(1), seed=4)
    assert len(episode) == 200
    assert episode.cumulative_reward == -200.0
    assert not episode.success


def test_goal_state_ends_episode_with_zero_reward():
    env = MountainCar()
    env.reset(seed=0)
    env.state = (0.5, 0.01)
    _, reward, done, success = env.step(1)
    assert done and success
    assert reward == 0.0


def test_left_wall_zeroes_leftward_velocity():
    env = MountainCar()
    env.reset(seed=0)
    env.state = (-1.19, -0.07)
    state, _, _, _ = env.step(0)
    assert state[0] == -1.2
    assert state[1] == 0.0


def test_idle_action_at_flat_slope_is_stationary():
    # Where cos(3x) vanishes gravity has no tangential component, so
    # coasting with zero velocity stays put.
    env = MountainCar()
    env.reset(seed=0)
    x = -math.pi / 6.0
    env.state = (x, 0.0)
    for _ in range(5):
        state, _, _, _ = env.step(1)
        assert state[0] == pytest.approx(x, abs=1e-12)
        assert abs(state[1]) < 1e-15


def test_mountaincar_success_tracks_reward():
    env = MountainCar()
    for seed in range(8):
        episode = rollout(env, MountainCarEnergy(), seed)
        assert -200.0 <= episode.cumulative_reward <= 0.0
        assert episode.success == (episode.cumulative_reward > -200.0)


def test_energy_pumping_thrusts_along_velocity():
    assert MountainCarEnergy().act((-0.5, 0.0)) == 2
    assert MountainCarEnergy().act((-0.5, -0.01)) == 0


def test_energy_pumping_reaches_the_goal():
    env = MountainCar()
    oracle = MountainCarEnergy()
    successes = sum(rollout(env, oracle, seed).success for seed in range(50))
    assert successes >= 45


# --- car following --------------------------------------------------------


def _quiet_front(env: CarFollowing, d_rel: float):
    env.reset(seed=0)
    env._front_accels = [0.0] * env.max_steps
    env._v_front = 0.0
    env._v_rear = 0.0
    env.state = (d_rel, 0.0, 1.0)


def test_reward_peaks_at_target_gap():
    env = CarFollowing()
    _quiet_front(env, 30.0)
    _, reward, _, _ = env.step(1)  # braking at rest keeps both cars still
    assert reward == 1.0


def test_reward_floor_away_from_target_gap():
    env = CarFollowing()
    _quiet_front(env, 60.0)
    _, reward, _, _ = env.step(1)
    assert reward == 0.0


def test_tailgating_a_still_car_collides():
    env = CarFollowing()
    env.reset(seed=9)
    env._front_accels = [0.0] * env.max_steps
    steps = 0
    done = False
    success = False
    while not done:
        state, _, done, success = env.step(0)
        steps += 1
    assert not success
    assert state[0] <= 0.0
    assert steps < env.max_steps


def test_carfollowing_rewards_stay_in_unit_range():
    env = CarFollowing()
    for seed in range(3):
        episode = rollout(env, RandomPolicy(2, seed), seed)
        assert np.all(episode.rewards >= 0.0)
        assert np.all(episode.rewards <= 1.0)


def test_gap_keeper_decision():
    oracle = CarFollowingGap()
    assert oracle.act((40.0, 0.0, 1.0)) == 0  # too far: speed up
    assert oracle.act((20.0, 0.0, 1.0)) == 1  # too close: brake
    assert oracle.act((30.0, 0.5, 1.0)) == 0  # opening gap: speed up


def test_gap_keeper_completes_episodes():
    env = CarFollowing()
    oracle = CarFollowingGap()
    successes = sum(rollout(env, oracle, seed).success for seed in range(20))
    assert successes >= 18


# --- episode harness ------------------------------------------------------


def test_rollout_is_deterministic():
    env = CartPole()
    a = rollout(env, CartPolePD(), seed=123)
    b = rollout(env, CartPolePD(), seed=123)
    assert a.states.tolist() == b.states.tolist()
    assert a.actions.tolist() == b.actions.tolist()
    assert a.rewards.tolist() == b.rewards.tolist()
    assert a.success == b.success


def test_rollout_zero_steps_is_empty_and_unsuccessful():
    episode = rollout(CartPole(), CartPolePD(), seed=0, max_steps=0)
    assert len(episode) == 0
    assert not episode.success
    assert episode.cumulative_reward == 0.0


def test_cumulative_reward_sums_steps():
    episode = rollout(MountainCar(), MountainCarEnergy(), seed=2)
    assert episode.cumulative_reward == pytest.approx(float(episode.rewards.sum()))


def test_step_before_reset_is_an_error():
    with pytest.raises(EpisodeDoneError):
        CartPole().step(0)


def test_step_after_done_is_an_error():
    env = MountainCar()
    env.reset(seed=0)
    env.state = (0.5, 0.01)
    env.step(1)
    with pytest.raises(EpisodeDoneError):
        env.step(1)


def test_action_out_of_range_is_rejected():
    env = CartPole()
    env.reset(seed=0)
    with pytest.raises(ValueError):
        env.step(2)


def test_environment_registry():
    assert sorted(ENVIRONMENTS) == ["carfollowing", "cartpole", "mountaincar"]
    assert isinstance(make_env("cartpole"), CartPole)
    assert isinstance(make_scripted_oracle("mountaincar"), MountainCarEnergy)
    with pytest.raises(ValueError):
        make_env("pendulum")
    with pytest.raises(ValueError):
        make_scripted_oracle("pendulum")
