"""Desk-scale continuous-control environments and the hidden-confounder wrapper.

The agent-facing interface is the gymnasium one: observations, rewards, the termination and
truncation flags and an ``info`` dict that never carries the confounder. The confounder is only
reachable through :meth:`ConfoundedEnv.diagnostics`.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing
from pathlib import Path

import gymnasium as gym
import numpy as np
import pandas as pd
from gymnasium import spaces

from .constants import EnvironmentId
from .errors import NumericError, ParameterError, ShapeError
from .utils import numpy_stream, stream_seed_sequence

log = logging.getLogger(__name__)

#: executed actions are clamped to this multiple of the nominal action box
ACTUATOR_LIMIT = 2.0


@dataclasses.dataclass
class ConfounderConfig:
    """Parameters of the additive action confounder."""

    mu: float = 0.0
    sigma: float = 0.5
    rho: float = 0.0

    def violations(self, prefix: str = "confounder") -> typing.List[str]:
        problems = []
        if not math.isfinite(self.mu):
            problems.append(f"{prefix}.mu must be finite, got {self.mu}")
        if not self.sigma >= 0.0:
            problems.append(f"{prefix}.sigma must be non-negative, got {self.sigma}")
        if not 0.0 <= self.rho < 1.0:
            problems.append(f"{prefix}.rho must lie in [0, 1), got {self.rho}")
        return problems


@dataclasses.dataclass
class EnvConfig:
    """Everything needed to build an environment of a run."""

    env_id: EnvironmentId = EnvironmentId.PointMass
    dt: float = 0.05
    max_steps: int = 200
    confounder: ConfounderConfig = dataclasses.field(default_factory=ConfounderConfig)
    #: ``False`` forces ``u = 0`` without touching the confounder parameters
    confounded: bool = True

    def with_sigma(self, sigma: float) -> "EnvConfig":
        return dataclasses.replace(self, confounder=dataclasses.replace(self.confounder, sigma=float(sigma)))

    def clean(self) -> "EnvConfig":
        return dataclasses.replace(self, confounded=False)


def _check_action(action, dim: int) -> np.ndarray:
    action = np.asarray(action, dtype=float).reshape(-1)
    if action.shape != (dim,):
        raise ShapeError(f"Expected an action of size {dim}, got shape {action.shape}.")
    if not np.isfinite(action).all():
        raise NumericError(f"Action {action} is not finite.")
    return action


class PointMassEnv(gym.Env):
    """A point mass in the square ``[-bound, bound]^2`` that has to reach a fixed goal.

    Observation ``[x, y, vx, vy]``, action: an acceleration in ``[-1, 1]^2``.
    """

    metadata = {"render_modes": []}

    def __init__(
        self,
        dt: float = 0.05,
        max_steps: int = 200,
        goal=(0.5, 0.5),
        bound: float = 1.0,
        max_speed: float = 1.0,
        goal_radius: float = 0.05,
    ):
        super().__init__()
        if dt <= 0.0 or max_steps < 1:
            raise ParameterError(f"Invalid time step {dt} or horizon {max_steps}.")
        self.dt = dt
        self.max_steps = max_steps
        self.goal = np.asarray(goal, dtype=float)
        if self.goal.shape != (2,) or (np.abs(self.goal) > bound).any():
            raise ParameterError(f"Goal {goal} lies outside of the square [-{bound}, {bound}]^2.")
        self.bound = bound
        self.max_speed = max_speed
        self.goal_radius = goal_radius
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(4,), dtype=np.float64)
        self.action_space = spaces.Box(-1.0, 1.0, shape=(2,), dtype=np.float64)
        self.position = np.zeros(2)
        self.velocity = np.zeros(2)
        self.steps = 0

    @property
    def reward_bounds(self) -> typing.Tuple[float, float]:
        diagonal = 2.0 * self.bound * math.sqrt(2.0)
        penalty = 0.01 * 2 * ACTUATOR_LIMIT**2
        return -(diagonal + penalty), 0.0

    def _observation(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])

    def set_state(self, position, velocity=(0.0, 0.0)):
        self.position = np.asarray(position, dtype=float).copy()
        self.velocity = np.asarray(velocity, dtype=float).copy()
        return self._observation()

    def reset(self, *, seed: typing.Optional[int] = None, options: typing.Optional[dict] = None):
        super().reset(seed=seed)
        self.position = self.np_random.uniform(-self.bound, self.bound, size=2)
        self.velocity = np.zeros(2)
        self.steps = 0
        return self._observation(), {}

    def step(self, action):
        action = np.clip(_check_action(action, 2), -ACTUATOR_LIMIT, ACTUATOR_LIMIT)
        self.velocity = np.clip(self.velocity + action * self.dt, -self.max_speed, self.max_speed)
        self.position = np.clip(self.position + self.velocity * self.dt, -self.bound, self.bound)
        self.steps += 1
        distance = float(np.linalg.norm(self.position - self.goal))
        reward = -distance - 0.01 * float(action @ action)
        low, high = self.reward_bounds
        if not low <= reward <= high:
            raise NumericError(f"Reward {reward} lies outside of [{low}, {high}].")
        terminated = distance < self.goal_radius
        truncated = self.steps >= self.max_steps
        return self._observation(), reward, terminated, truncated, {}

    def get_state(self) -> dict:
        return {
            "position": self.position.copy(),
            "velocity": self.velocity.copy(),
            "steps": self.steps,
            "np_random": self.np_random.bit_generator.state,
        }

    def load_state(self, state: dict):
        self.position = np.asarray(state["position"], dtype=float).copy()
        self.velocity = np.asarray(state["velocity"], dtype=float).copy()
        self.steps = int(state["steps"])
        self.np_random.bit_generator.state = state["np_random"]


def wrap_angle(theta: float) -> float:
    """Wrap an angle into ``(-pi, pi]``.

    >>> wrap_angle(-math.pi) == math.pi
    True
    """
    return math.pi - (math.pi - theta) % (2.0 * math.pi)


class PendulumEnv(gym.Env):
    """Rigid pendulum swing-up integrated with explicit Euler steps.

    The angle is measured from the upright position, so gravity pulls away from ``theta = 0``:
    ``theta'' = (g / l) sin(theta) + torque / (m l^2)`` with ``torque = max_torque * a``.
    Observation ``[cos(theta), sin(theta), omega]``; the reward
    ``-(theta^2 + 0.1 omega^2 + 0.001 a^2)`` is evaluated at the state the action is applied in.
    """

    metadata = {"render_modes": []}

    def __init__(
        self,
        dt: float = 0.05,
        max_steps: int = 200,
        mass: float = 1.0,
        length: float = 1.0,
        gravity: float = 10.0,
        max_torque: float = 2.0,
        max_speed: float = 8.0,
    ):
        super().__init__()
        if dt <= 0.0 or max_steps < 1:
            raise ParameterError(f"Invalid time step {dt} or horizon {max_steps}.")
        self.dt = dt
        self.max_steps = max_steps
        self.mass = mass
        self.length = length
        self.gravity = gravity
        self.max_torque = max_torque
        self.max_speed = max_speed
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(3,), dtype=np.float64)
        self.action_space = spaces.Box(-1.0, 1.0, shape=(1,), dtype=np.float64)
        self.theta = 0.0
        self.omega = 0.0
        self.steps = 0

    def _observation(self) -> np.ndarray:
        return np.array([math.cos(self.theta), math.sin(self.theta), self.omega])

    def set_state(self, theta: float, omega: float = 0.0):
        self.theta, self.omega = wrap_angle(float(theta)), float(omega)
        return self._observation()

    def reset(self, *, seed: typing.Optional[int] = None, options: typing.Optional[dict] = None):
        super().reset(seed=seed)
        self.theta = wrap_angle(float(self.np_random.uniform(-math.pi, math.pi)))
        self.omega = float(self.np_random.uniform(-1.0, 1.0))
        self.steps = 0
        return self._observation(), {}

    def step(self, action):
        a = float(np.clip(_check_action(action, 1), -ACTUATOR_LIMIT, ACTUATOR_LIMIT)[0])
        theta, omega = self.theta, self.omega
        reward = -(theta**2 + 0.1 * omega**2 + 0.001 * a**2)
        torque = self.max_torque * a
        acceleration = self.gravity / self.length * math.sin(theta) + torque / (self.mass * self.length**2)
        self.theta = wrap_angle(theta + omega * self.dt)
        self.omega = min(max(omega + acceleration * self.dt, -self.max_speed), self.max_speed)
        self.steps += 1
        return self._observation(), reward, False, self.steps >= self.max_steps, {}

    def get_state(self) -> dict:
        return {
            "theta": self.theta,
            "omega": self.omega,
            "steps": self.steps,
            "np_random": self.np_random.bit_generator.state,
        }

    def load_state(self, state: dict):
        self.theta, self.omega, self.steps = float(state["theta"]), float(state["omega"]), int(state["steps"])
        self.np_random.bit_generator.state = state["np_random"]


@dataclasses.dataclass
class ConfounderProcess:
    """Additive Gaussian confounder, AR(1) for ``rho > 0`` and i.i.d. for ``rho = 0``."""

    mu: np.ndarray
    sigma: np.ndarray
    rho: float = 0.0
    u: typing.Optional[np.ndarray] = None

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"Confounder mean {self.mu.shape} and std {self.sigma.shape} differ in shape.")
        if (self.sigma < 0.0).any():
            raise ParameterError(f"Confounder std {self.sigma} is negative.")
        if not 0.0 <= self.rho < 1.0:
            raise ParameterError(f"Confounder autocorrelation {self.rho} is outside of [0, 1).")
        if self.u is None:
            self.u = np.zeros_like(self.mu)

    @classmethod
    def from_config(cls, config: ConfounderConfig, dim: int) -> "ConfounderProcess":
        return cls(np.full(dim, config.mu), np.full(dim, config.sigma), config.rho)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        """Draw ``u`` from the stationary distribution ``N(mu, sigma^2)``."""
        self.u = rng.normal(self.mu, self.sigma)
        return self.u

    def advance(self, rng: np.random.Generator) -> np.ndarray:
        if self.rho == 0.0:
            self.u = rng.normal(self.mu, self.sigma)
        else:
            innovation = rng.normal(self.mu * (1.0 - self.rho), self.sigma * math.sqrt(1.0 - self.rho**2))
            self.u = self.rho * self.u + innovation
        return self.u


def confound(proc: ConfounderProcess, nominal_action, rng: np.random.Generator) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Advance the confounder and add it to the nominal action.

    :return: ``(executed_action, u)``; the executed action is not clamped here.
    """
    nominal = np.asarray(nominal_action, dtype=float)
    if nominal.shape != (proc.dim,):
        raise ShapeError(f"Nominal action of shape {nominal.shape} does not match a confounder of size {proc.dim}.")
    u = proc.advance(rng).copy()
    return nominal + u, u


class ConfoundedEnv(gym.Wrapper):
    """Executes ``clip(a + u, -2, 2)`` in the wrapped environment for every nominal action ``a``."""

    def __init__(
        self,
        env: gym.Env,
        process: ConfounderProcess,
        rng: typing.Optional[np.random.Generator] = None,
        enabled: bool = True,
    ):
        super().__init__(env)
        if process.dim != env.action_space.shape[0]:
            raise ShapeError(f"Confounder of size {process.dim} for actions of size {env.action_space.shape[0]}.")
        self.process = process
        self.rng = rng if rng is not None else np.random.default_rng()
        self.enabled = enabled
        self._lastU = np.zeros(process.dim)
        self._lastExecuted = np.zeros(process.dim)

    def reset(self, *, seed: typing.Optional[int] = None, options: typing.Optional[dict] = None):
        if seed is not None:
            self.rng = np.random.Generator(np.random.PCG64(stream_seed_sequence(seed, "confounder")))
        observation, info = self.env.reset(seed=seed, options=options)
        if self.enabled:
            self.process.reset(self.rng)
        else:
            self.process.u = np.zeros(self.process.dim)
        return observation, info

    def step(self, action):
        nominal = _check_action(action, self.process.dim)
        if self.enabled:
            executed, u = confound(self.process, nominal, self.rng)
        else:
            executed, u = nominal, np.zeros(self.process.dim)
        executed = np.clip(executed, -ACTUATOR_LIMIT, ACTUATOR_LIMIT)
        self._lastU, self._lastExecuted = u, executed
        return self.env.step(executed)

    def diagnostics(self) -> dict:
        """The last confounder value and executed action, for logging and tests only."""
        return {"u": self._lastU.copy(), "executed_action": self._lastExecuted.copy()}

    def get_state(self) -> dict:
        return {
            "env": self.env.unwrapped.get_state(),
            "u": self.process.u.copy(),
            "rng": self.rng.bit_generator.state,
        }

    def load_state(self, state: dict):
        self.env.unwrapped.load_state(state["env"])
        self.process.u = np.asarray(state["u"], dtype=float).copy()
        self.rng.bit_generator.state = state["rng"]


def make_env(config: EnvConfig, seed: int = 0) -> ConfoundedEnv:
    """Build the confounded environment of a run; the confounder draws from the run's ``confounder`` stream."""
    env_id = EnvironmentId.from_name(config.env_id)
    if env_id == EnvironmentId.PointMass:
        env = PointMassEnv(dt=config.dt, max_steps=config.max_steps)
    else:
        env = PendulumEnv(dt=config.dt, max_steps=config.max_steps)
    process = ConfounderProcess.from_config(config.confounder, env.action_space.shape[0])
    return ConfoundedEnv(env, process, numpy_stream(seed, "confounder"), enabled=config.confounded)


def rollout_returns(
    env: ConfoundedEnv,
    act: typing.Callable[[np.ndarray], np.ndarray],
    episodes: int,
    seed: int,
) -> np.ndarray:
    """Undiscounted returns of ``episodes`` seeded episodes.

    :param env: The environment, reset with a fresh seed per episode.
    :param act: Maps an observation to a nominal action.
    :param episodes: Number of episodes, at least 1.
    :param seed: Seed of the evaluation stream choosing the episode seeds.
    :return: One return per episode.
    """
    if episodes < 1:
        raise ParameterError(f"Number of episodes must be at least 1, got {episodes}.")
    episodeSeeds = numpy_stream(seed, "eval").integers(2**31 - 1, size=episodes)
    returns = np.zeros(episodes)
    for i, episodeSeed in enumerate(episodeSeeds):
        observation, _ = env.reset(seed=int(episodeSeed))
        done = False
        while not done:
            observation, reward, terminated, truncated, _ = env.step(act(observation))
            returns[i] += reward
            done = terminated or truncated
    return returns


class TrajectoryRecorder(gym.Wrapper):
    """Records ``(t, s..., a_nominal..., u..., r, done)`` rows of a confounded environment."""

    def __init__(self, env: ConfoundedEnv):
        super().__init__(env)
        self.rows: typing.List[dict] = []
        self._t = 0
        self._observation = None

    def reset(self, **kwargs):
        observation, info = self.env.reset(**kwargs)
        self._t, self._observation = 0, observation
        return observation, info

    def step(self, action):
        observation, reward, terminated, truncated, info = self.env.step(action)
        row = {"t": self._t}
        row.update({f"s{i}": float(v) for i, v in enumerate(self._observation)})
        row.update({f"a_nominal{i}": float(v) for i, v in enumerate(np.asarray(action, dtype=float).reshape(-1))})
        row.update({f"u{i}": float(v) for i, v in enumerate(self.env.diagnostics()["u"])})
        row.update({"r": float(reward), "done": bool(terminated or truncated)})
        self.rows.append(row)
        self._t += 1
        self._observation = observation
        return observation, reward, terminated, truncated, info

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        log.debug(f"Wrote {len(self.rows)} trajectory rows to {path}")
        return path
