"""Small episodic control tasks and the objectives built from them.

``pendulum`` (o=3, a=1) and ``cont-mountain-car`` (o=2, a=1) follow the
classic swing-up and continuous mountain-car dynamics.  Step functions work
elementwise on arrays, so a whole population of perturbed policies is rolled
out in lock-step; every policy in a batch starts from the same seeded
initial state.

Initial-state ranges:

* pendulum: angle ~ U[-pi, pi], angular velocity ~ U[-1, 1]
* mountain car: position ~ U[-0.6, -0.4], velocity 0

Observation bounds:

* pendulum: cos, sin in [-1, 1]; angular velocity in [-8, 8]
* mountain car: position in [-1.2, 0.6]; velocity in [-0.07, 0.07]
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NonFiniteValueError
from .estimators import Objective, rowwise_dot
from .policies import PolicySpec, batch_weight_matrices, forward_batch, param_count
from .seeding import make_rng

# pendulum constants
PENDULUM_MAX_SPEED = 8.0
PENDULUM_MAX_TORQUE = 2.0
PENDULUM_DT = 0.05
PENDULUM_G = 10.0
PENDULUM_MASS = 1.0
PENDULUM_LENGTH = 1.0

# mountain-car constants
MC_MIN_POSITION = -1.2
MC_MAX_POSITION = 0.6
MC_MAX_SPEED = 0.07
MC_GOAL_POSITION = 0.45
MC_POWER = 0.0015
MC_GRAVITY = 0.0025
MC_GOAL_REWARD = 100.0


def _require_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise NonFiniteValueError(f"non-finite {what}")


def angle_normalize(x):
    return ((x + np.pi) % (2 * np.pi)) - np.pi


def pendulum_step(state, torque):
    """One pendulum step; returns ``((angle, velocity), reward)``.

    Angle 0 is upright.  The reward is charged on the pre-step state and the
    clipped torque, so it is never positive.
    """
    theta, theta_dot = state
    _require_finite(torque, "torque")
    u = np.clip(torque, -PENDULUM_MAX_TORQUE, PENDULUM_MAX_TORQUE)
    cost = angle_normalize(theta) ** 2 + 0.1 * theta_dot ** 2 + 0.001 * u ** 2
    accel = (3 * PENDULUM_G / (2 * PENDULUM_LENGTH) * np.sin(theta)
             + 3.0 / (PENDULUM_MASS * PENDULUM_LENGTH ** 2) * u)
    new_dot = np.clip(theta_dot + accel * PENDULUM_DT, -PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED)
    new_theta = theta + new_dot * PENDULUM_DT
    return (new_theta, new_dot), -cost


def mountain_car_step(state, force):
    """One continuous mountain-car step; returns ``((position, velocity), reward, done)``."""
    position, velocity = state
    _require_finite(force, "force")
    f = np.clip(force, -1.0, 1.0)
    velocity = velocity + f * MC_POWER - MC_GRAVITY * np.cos(3 * position)
    velocity = np.clip(velocity, -MC_MAX_SPEED, MC_MAX_SPEED)
    position = np.clip(position + velocity, MC_MIN_POSITION, MC_MAX_POSITION)
    velocity = np.where((position == MC_MIN_POSITION) & (velocity < 0), 0.0, velocity)
    done = position >= MC_GOAL_POSITION
    reward = np.where(done, MC_GOAL_REWARD, 0.0) - 0.1 * f ** 2
    return (position, velocity), reward, done


@dataclass(frozen=True)
class EnvironmentKind:
    name: str
    obs_dim: int
    act_dim: int
    default_max_steps: int

    def reset(self, seed):
        rng = make_rng(seed)
        if self.name == "pendulum":
            return (rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0))
        return (rng.uniform(-0.6, -0.4), 0.0)

    def observe(self, state):
        if self.name == "pendulum":
            theta, theta_dot = state
            return np.stack([np.cos(theta), np.sin(theta), theta_dot], axis=-1)
        return np.stack(state, axis=-1)

    def step(self, state, action):
        a = action[..., 0]
        if self.name == "pendulum":
            new_state, reward = pendulum_step(state, PENDULUM_MAX_TORQUE * a)
            return new_state, reward, np.zeros(np.shape(reward), dtype=bool)
        return mountain_car_step(state, a)


# Policies emit actions in (-1, 1); the pendulum scales them to its torque range.
PENDULUM = EnvironmentKind("pendulum", 3, 1, 200)
MOUNTAIN_CAR = EnvironmentKind("cont-mountain-car", 2, 1, 999)
ENVIRONMENTS = {e.name: e for e in (PENDULUM, MOUNTAIN_CAR)}


def get_environment(name):
    try:
        return ENVIRONMENTS[name]
    except KeyError:
        raise KeyError(f"unknown environment {name!r}; known: {sorted(ENVIRONMENTS)}") from None


@dataclass(frozen=True)
class RolloutResult:
    total_reward: float
    steps: int
    seed: int


def _check_dims(env, spec):
    if spec.input_dim != env.obs_dim or spec.output_dim != env.act_dim:
        raise DimensionMismatchError(
            f"policy maps {spec.input_dim}->{spec.output_dim}, "
            f"{env.name} needs {env.obs_dim}->{env.act_dim}")


def rollout_batch(env_kind, spec, params_batch, max_steps, seed):
    """Roll out ``P`` policies from the same initial state.

    Returns ``(totals, steps)``, each of shape ``(P,)``.  Rewards stop
    accruing for a policy once its episode is done.
    """
    env = get_environment(env_kind) if isinstance(env_kind, str) else env_kind
    _check_dims(env, spec)
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    weights = batch_weight_matrices(spec, params_batch)
    p = weights[1].shape[0]
    s0 = env.reset(seed)
    state = tuple(np.full(p, float(v)) for v in s0)
    totals = np.zeros(p)
    steps = np.zeros(p, dtype=np.int64)
    alive = np.ones(p, dtype=bool)
    for _ in range(max_steps):
        action = forward_batch(spec, weights, env.observe(state))
        state, reward, done = env.step(state, action)
        totals = totals + np.where(alive, reward, 0.0)
        steps += alive
        alive &= ~done
        if not alive.any():
            break
    return totals, steps


def rollout(env_kind, spec, params, max_steps, seed):
    totals, steps = rollout_batch(env_kind, spec, np.asarray(params)[None, :], max_steps, seed)
    return RolloutResult(float(totals[0]), int(steps[0]), int(seed))


def dump_trajectory(env_kind, spec, params, max_steps, seed, fp):
    """Write one JSON object per step to the text stream ``fp``."""
    env = get_environment(env_kind)
    _check_dims(env, spec)
    weights = batch_weight_matrices(spec, np.asarray(params)[None, :])
    state = tuple(np.array([float(v)]) for v in env.reset(seed))
    for t in range(max_steps):
        obs = env.observe(state)
        action = forward_batch(spec, weights, obs)
        state, reward, done = env.step(state, action)
        fp.write(json.dumps({"step": t, "observation": obs[0].tolist(),
                             "action": action[0].tolist(), "reward": float(reward[0]),
                             "done": bool(done[0])}) + "\n")
        if done[0]:
            break


class RolloutObjective(Objective):
    """Mean total reward of a policy over a fixed list of episode seeds."""

    def __init__(self, env_kind, spec, max_steps=None, episode_seeds=(0,)):
        self.env = get_environment(env_kind)
        _check_dims(self.env, spec)
        self.spec = spec
        self.max_steps = int(max_steps or self.env.default_max_steps)
        self.episode_seeds = tuple(int(s) for s in episode_seeds)
        if not self.episode_seeds:
            raise ValueError("need at least one episode seed")
        self.dim = param_count(spec)

    def evaluate_batch(self, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        total = np.zeros(xs.shape[0])
        for s in self.episode_seeds:
            r, _ = rollout_batch(self.env, self.spec, xs, self.max_steps, s)
            total = total + r
        return total / len(self.episode_seeds)


def quadratic_env(q, theta):
    """``-theta^T Q theta`` for positive-definite ``Q``."""
    return QuadraticObjective(q)(theta)


class QuadraticObjective(Objective):
    """Concave quadratic reward ``-theta^T Q theta``, maximized at 0."""

    def __init__(self, q):
        q = np.atleast_2d(np.asarray(q, dtype=np.float64))
        if q.shape[0] != q.shape[1]:
            raise ValueError(f"Q must be square, got {q.shape}")
        try:
            np.linalg.cholesky(0.5 * (q + q.T))
        except np.linalg.LinAlgError:
            raise ValueError("Q must be positive definite") from None
        if not np.allclose(q, q.T):
            raise ValueError("Q must be symmetric")
        self.q = q
        self.dim = q.shape[0]
        self._identity = bool(np.array_equal(q, np.eye(self.dim)))

    def evaluate_batch(self, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        if xs.shape[1] != self.dim:
            raise DimensionMismatchError(f"expected dimension {self.dim}, got {xs.shape[1]}")
        if self._identity:
            qx = xs
        else:
            qx = xs[:, 0, None] * self.q[None, :, 0]
            for j in range(1, self.dim):
                qx = qx + xs[:, j, None] * self.q[None, :, j]
        return -rowwise_dot(xs * qx, np.ones(self.dim))

    def gradient(self, theta):
        return -(self.q + self.q.T) @ np.asarray(theta, dtype=np.float64)


def episode_seeds_for(master_seed, count):
    rng = make_rng(master_seed)
    return [int(s) for s in rng.integers(0, 2 ** 31, size=count)]


def build_objective(desc):
    """Construct an objective from a plain-dict description.

    ``{"env": "quadratic", "dim": 50}`` or
    ``{"env": "pendulum", "policy": {...}, "max_steps": 200, "episode_seeds": [..]}``.
    Workers call this so they evaluate the same function as the coordinator.
    """
    name = desc["env"]
    if name == "quadratic":
        q = desc.get("q")
        return QuadraticObjective(np.eye(int(desc["dim"])) if q is None else np.asarray(q))
    env = get_environment(name)
    pol = desc.get("policy", {})
    spec = PolicySpec(env.obs_dim, env.act_dim,
                      tuple(pol.get("hidden_sizes", (41, 41))), pol.get("layer_kind", "toeplitz"))
    return RolloutObjective(name, spec, desc.get("max_steps"), desc.get("episode_seeds", [0]))


def mountain_car_valley_bottom():
    # minimum of the track height sin(3x)
    return -math.pi / 6
