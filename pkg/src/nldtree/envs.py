"""Native discrete-action control environments, oracle policies, rollouts.

Three tasks are implemented from their standard dynamics: cart-pole
balancing, mountain-car hill climbing, and a car-following gap keeper.
Each environment is seeded at reset and fully deterministic afterwards,
so identical (seed, policy) pairs reproduce identical episodes.  Steps
use plain Python floats; episode traces are assembled into arrays only
at the end, which keeps million-step evaluation runs cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .core import Nldt, predict

State = tuple[float, ...]
StepResult = tuple[State, float, bool, bool]


class EpisodeDoneError(RuntimeError):
    """step() was called after the episode terminated."""


class Environment:
    """Base episodic environment: reset(seed) then step(action) until done."""

    state_dim: int = 0
    n_actions: int = 0
    max_steps: int = 0

    def __init__(self) -> None:
        self.state: State | None = None
        self.t = 0
        self.done = False

    def reset(self, seed: int) -> State:
        rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self.state = self._initial_state(rng)
        return self.state

    def step(self, action: int) -> StepResult:
        if self.state is None:
            raise EpisodeDoneError("reset() must be called before step()")
        if self.done:
            raise EpisodeDoneError("episode already terminated")
        if not 0 <= action < self.n_actions:
            raise ValueError(f"action {action} outside 0..{self.n_actions - 1}")
        self.t += 1
        state, reward, done, success = self._transition(self.state, action)
        self.state = state
        self.done = done
        return state, reward, done, success

    def _initial_state(self, rng: np.random.Generator) -> State:
        raise NotImplementedError

    def _transition(self, state: State, action: int) -> StepResult:
        raise NotImplementedError


def cartpole_dynamics(state: State, force: float) -> State:
    """One Euler step of the cart-pole ODE under a horizontal force."""
    x, v, theta, omega = state
    sin, cos = math.sin(theta), math.cos(theta)
    temp = (force + _POLE_MASS_LENGTH * omega * omega * sin) / _TOTAL_MASS
    alpha = (_GRAVITY * sin - cos * temp) / (
        _HALF_LENGTH * (4.0 / 3.0 - _POLE_MASS * cos * cos / _TOTAL_MASS)
    )
    accel = temp - _POLE_MASS_LENGTH * alpha * cos / _TOTAL_MASS
    return (
        x + _CARTPOLE_DT * v,
        v + _CARTPOLE_DT * accel,
        theta + _CARTPOLE_DT * omega,
        omega + _CARTPOLE_DT * alpha,
    )


_GRAVITY = 9.8
_CART_MASS = 1.0
_POLE_MASS = 0.1
_TOTAL_MASS = _CART_MASS + _POLE_MASS
_HALF_LENGTH = 0.5
_POLE_MASS_LENGTH = _POLE_MASS * _HALF_LENGTH
_CARTPOLE_DT = 0.02
_FORCE_MAG = 10.0
_THETA_LIMIT = 24.0 * math.pi / 180.0
_X_LIMIT = 4.8


class CartPole(Environment):
    """Balance a pole on a force-controlled cart.

    State (x, v, theta, omega); action 0 pushes left, 1 pushes right.
    Reward 1 per step.  The episode ends when |theta| > 24 deg, |x| > 4.8,
    or after 200 steps; only reaching 200 steps counts as success, so
    success is equivalent to a cumulative reward of 200.
    """

    state_dim = 4
    n_actions = 2
    max_steps = 200

    def _initial_state(self, rng: np.random.Generator) -> State:
        return tuple(rng.uniform(-0.05, 0.05, size=4).tolist())

    def _transition(self, state: State, action: int) -> StepResult:
        force = _FORCE_MAG if action == 1 else -_FORCE_MAG
        nxt = cartpole_dynamics(state, force)
        if self.t >= self.max_steps:
            return nxt, 1.0, True, True
        failed = abs(nxt[2]) > _THETA_LIMIT or abs(nxt[0]) > _X_LIMIT
        return nxt, 1.0, failed, False


class MountainCar(Environment):
    """Drive an underpowered car out of a valley.

    State (x, v); actions 0/1/2 thrust left/none/right.  Reward is -1 per
    step and 0 on the step that reaches x >= 0.5 with v >= 0, so an episode
    is successful exactly when its cumulative reward exceeds -200.
    """

    state_dim = 2
    n_actions = 3
    max_steps = 200

    _V_LIMIT = 0.07
    _X_MIN = -1.2
    _X_MAX = 0.6
    _GOAL_X = 0.5

    def _initial_state(self, rng: np.random.Generator) -> State:
        return (float(rng.uniform(-0.6, -0.4)), 0.0)

    def _transition(self, state: State, action: int) -> StepResult:
        x, v = state
        v = v + 0.001 * (action - 1) - 0.0025 * math.cos(3.0 * x)
        v = min(max(v, -self._V_LIMIT), self._V_LIMIT)
        x = min(max(x + v, self._X_MIN), self._X_MAX)
        if x == self._X_MIN and v < 0.0:
            v = 0.0
        if x >= self._GOAL_X and v >= 0.0:
            return (x, v), 0.0, True, True
        return (x, v), -1.0, self.t >= self.max_steps, False


class CarFollowing(Environment):
    """Keep a 30 m gap behind a lead car with random acceleration.

    State (d_rel, v_rel, a_prev) where v_rel = v_front - v_rear and a_prev
    is the rear car's previous command in m/s^2.  Action 0 accelerates by
    +1 m/s^2, action 1 brakes by -1 m/s^2.  The lead car's acceleration is
    drawn uniformly from [-1, 1] each step; both velocities are floored
    at 0.  Reward max(0, 1 - |d_rel - 30| / 30) peaks at the target gap.
    The episode fails on collision (d_rel <= 0) or loss of contact
    (d_rel > 150) and succeeds after 1000 steps.
    """

    state_dim = 3
    n_actions = 2
    max_steps = 1000

    _DT = 0.1
    _TARGET_GAP = 30.0
    _LOST_GAP = 150.0

    def _initial_state(self, rng: np.random.Generator) -> State:
        d_rel = float(rng.uniform(20.0, 40.0))
        a_prev = 1.0 if rng.uniform() < 0.5 else -1.0
        # Both cars start at rest; lead-car accelerations for the whole
        # episode are drawn up front so stepping stays allocation-free.
        self._front_accels = rng.uniform(-1.0, 1.0, size=self.max_steps).tolist()
        self._v_front = 0.0
        self._v_rear = 0.0
        return (d_rel, 0.0, a_prev)

    def _transition(self, state: State, action: int) -> StepResult:
        d_rel = state[0]
        a_rear = 1.0 if action == 0 else -1.0
        a_front = self._front_accels[self.t - 1]
        self._v_front = max(0.0, self._v_front + a_front * self._DT)
        self._v_rear = max(0.0, self._v_rear + a_rear * self._DT)
        v_rel = self._v_front - self._v_rear
        d_rel = d_rel + v_rel * self._DT
        reward = max(0.0, 1.0 - abs(d_rel - self._TARGET_GAP) / self._TARGET_GAP)
        nxt = (d_rel, v_rel, a_rear)
        if d_rel <= 0.0 or d_rel > self._LOST_GAP:
            return nxt, reward, True, False
        if self.t >= self.max_steps:
            return nxt, reward, True, True
        return nxt, reward, False, False


class Policy(Protocol):
    def act(self, state: Sequence[float]) -> int: ...


class CartPolePD:
    """Scripted balancer: push right exactly when theta + 0.5*omega > 0."""

    def act(self, state: Sequence[float]) -> int:
        return 1 if state[2] + 0.5 * state[3] > 0.0 else 0


class MountainCarEnergy:
    """Scripted climber: always thrust along the current velocity."""

    def act(self, state: Sequence[float]) -> int:
        return 2 if state[1] >= 0.0 else 0


class CarFollowingGap:
    """Scripted gap keeper: accelerate when (d_rel - 30) + 5*v_rel > 0."""

    def act(self, state: Sequence[float]) -> int:
        return 0 if (state[0] - 30.0) + 5.0 * state[1] > 0.0 else 1


class TreePolicy:
    """Adapter that lets a decision tree drive an environment."""

    def __init__(self, tree: Nldt):
        self.tree = tree

    def act(self, state: Sequence[float]) -> int:
        return predict(self.tree, state)


@dataclass
class Episode:
    """One rollout trace; row t holds the state seen and action taken at t."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    final_state: State
    success: bool
    seed: int

    def __post_init__(self) -> None:
        if not len(self.states) == len(self.actions) == len(self.rewards):
            raise ValueError("episode trace lengths disagree")

    @property
    def cumulative_reward(self) -> float:
        return float(self.rewards.sum())

    def __len__(self) -> int:
        return len(self.actions)


def rollout(
    env: Environment,
    policy: Policy,
    seed: int,
    max_steps: int | None = None,
) -> Episode:
    """Run one seeded episode under `policy`; identical inputs give identical traces."""
    cap = env.max_steps if max_steps is None else max_steps
    state = env.reset(seed)
    states: list[State] = []
    actions: list[int] = []
    rewards: list[float] = []
    success = False
    for _ in range(cap):
        action = policy.act(state)
        states.append(state)
        actions.append(action)
        state, reward, done, success = env.step(action)
        rewards.append(reward)
        if done:
            break
    return Episode(
        states=np.array(states, dtype=float).reshape(len(actions), env.state_dim),
        actions=np.array(actions, dtype=int),
        rewards=np.array(rewards, dtype=float),
        final_state=state,
        success=success,
        seed=seed,
    )


ENVIRONMENTS: dict[str, type[Environment]] = {
    "cartpole": CartPole,
    "mountaincar": MountainCar,
    "carfollowing": CarFollowing,
}

SCRIPTED_ORACLES: dict[str, type] = {
    "cartpole": CartPolePD,
    "mountaincar": MountainCarEnergy,
    "carfollowing": CarFollowingGap,
}


def make_env(name: str) -> Environment:
    try:
        return ENVIRONMENTS[name]()
    except KeyError:
        raise ValueError(f"unknown environment {name!r}") from None


def make_scripted_oracle(name: str) -> Policy:
    try:
        return SCRIPTED_ORACLES[name]()
    except KeyError:
        raise ValueError(f"no scripted oracle for environment {name!r}") from None
