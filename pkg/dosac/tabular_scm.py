"""Exact finite-domain structural causal model of a confounded decision process.

The causal graph, unrolled over time, has the edges::

    u_{t-1} -> u_t,   u_t -> a_t,   s_t -> a_t,   s_t -> s_{t+1},   a_t -> s_{t+1}

Every quantity is computed by enumerating the full joint distribution, so the module is the
ground truth that the learned components are tested against.
"""

from __future__ import annotations

import dataclasses
import logging
import typing

import numpy as np
import yaml
from scipy.special import softmax, xlogy

from .constants import JOINT_CAPACITY
from .errors import (
    CapacityError,
    ConditioningError,
    NoPastError,
    ParameterError,
    ShapeError,
)

log = logging.getLogger(__name__)

_ROW_TOLERANCE = 1e-12


def _frozen(array, name: str) -> np.ndarray:
    array = np.array(array, dtype=float)
    if not np.isfinite(array).all():
        raise ParameterError(f"Table {name} contains non-finite entries.")
    array.setflags(write=False)
    return array


@dataclasses.dataclass(frozen=True)
class TabularSCMSpec:
    """Conditional probability tables of the structural causal model.

    :param p_u0: Distribution of the first confounder, shape ``(U,)``.
    :param p_u_next: Confounder transition ``p(u' | u)``, shape ``(U, U)``.
    :param p_a: Behaviour policy ``p(a | s, u)``, shape ``(S, U, A)``.
    :param p_s_next: State transition ``p(s' | s, a)``, shape ``(S, A, S)``.
    :param p_s0: Initial state distribution, shape ``(S,)``.
    :param reward: Reward ``r(s, a, s')``, shape ``(S, A, S)``.
    :param gamma: Discount factor in ``[0, 1)``.
    """

    p_u0: np.ndarray
    p_u_next: np.ndarray
    p_a: np.ndarray
    p_s_next: np.ndarray
    p_s0: np.ndarray
    reward: np.ndarray
    gamma: float = 0.9

    def __post_init__(self):
        for field in dataclasses.fields(self):
            if field.name != "gamma":
                object.__setattr__(self, field.name, _frozen(getattr(self, field.name), field.name))
        object.__setattr__(self, "gamma", float(self.gamma))
        self.validate()

    @property
    def n_states(self) -> int:
        return self.p_s0.shape[0]

    @property
    def n_actions(self) -> int:
        return self.p_a.shape[-1]

    @property
    def n_confounders(self) -> int:
        return self.p_u0.shape[0]

    def validate(self):
        """Check shapes, probability ranges, row sums and the discount factor."""
        S, A, U = self.n_states, self.n_actions, self.n_confounders
        expected = {
            "p_u0": (U,),
            "p_u_next": (U, U),
            "p_a": (S, U, A),
            "p_s_next": (S, A, S),
            "p_s0": (S,),
            "reward": (S, A, S),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"Table {name} has shape {getattr(self, name).shape}, expected {shape}.")
        for name in ("p_u0", "p_u_next", "p_a", "p_s_next", "p_s0"):
            table = getattr(self, name)
            if (table < -_ROW_TOLERANCE).any() or (table > 1.0 + _ROW_TOLERANCE).any():
                raise ParameterError(f"Table {name} has entries outside of [0, 1].")
            if np.abs(table.sum(axis=-1) - 1.0).max() > _ROW_TOLERANCE:
                raise ParameterError(f"Rows of table {name} do not sum to 1.")
        if not 0.0 <= self.gamma < 1.0:
            raise ParameterError(f"Discount factor {self.gamma} is not in [0, 1).")

    def without_confounders(self) -> "TabularSCMSpec":
        """Return the spec with a single confounder value and the behaviour policy marginalized over u."""
        p_a = np.clip(np.einsum("u,sua->sa", self.p_u0, self.p_a), 0.0, 1.0)
        p_a /= p_a.sum(axis=-1, keepdims=True)
        return dataclasses.replace(self, p_u0=np.ones(1), p_u_next=np.ones((1, 1)), p_a=p_a[:, None, :])

    def to_dict(self) -> dict:
        data = {field.name: getattr(self, field.name) for field in dataclasses.fields(self)}
        return {key: value.tolist() if isinstance(value, np.ndarray) else value for key, value in data.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "TabularSCMSpec":
        return cls(**{field.name: data[field.name] for field in dataclasses.fields(cls) if field.name in data})


def save_spec(spec: TabularSCMSpec, path):
    """Write a spec to a YAML file of nested probability tables."""
    with open(path, "w") as file:
        yaml.safe_dump(spec.to_dict(), file, default_flow_style=None, sort_keys=False)


def load_spec(path) -> TabularSCMSpec:
    """Read a spec written by :func:`save_spec`."""
    with open(path) as file:
        return TabularSCMSpec.from_dict(yaml.safe_load(file))


def random_spec(
    n_states: int,
    n_actions: int,
    n_confounders: int,
    rng: np.random.Generator,
    concentration: float = 1.0,
    iid_confounder: bool = False,
    gamma: typing.Optional[float] = None,
) -> TabularSCMSpec:
    """Draw a spec whose conditional tables have Dirichlet-distributed rows.

    :param n_states: Number of states.
    :param n_actions: Number of actions.
    :param n_confounders: Number of confounder values.
    :param rng: Random generator.
    :param concentration: Dirichlet concentration, small values give near-deterministic rows.
    :param iid_confounder: Draw the confounder independently at every step (no ``u -> u'`` edge).
    :param gamma: Discount factor, drawn from ``[0.5, 0.9]`` if not given.
    :return: The random spec.
    """

    def rows(*shape):
        return rng.dirichlet(np.full(shape[-1], concentration), size=shape[:-1])

    p_u0 = rows(n_confounders)
    p_u_next = np.tile(p_u0, (n_confounders, 1)) if iid_confounder else rows(n_confounders, n_confounders)
    return TabularSCMSpec(
        p_u0=p_u0,
        p_u_next=p_u_next,
        p_a=rows(n_states, n_confounders, n_actions),
        p_s_next=rows(n_states, n_actions, n_states),
        p_s0=rows(n_states),
        reward=rng.uniform(0.0, 1.0, size=(n_states, n_actions, n_states)),
        gamma=rng.uniform(0.5, 0.9) if gamma is None else gamma,
    )


def confounded_example() -> TabularSCMSpec:
    """A two-state spec with a persistent confounder that drives both consecutive actions.

    The behaviour policy ignores the state, yet the state carries information about the
    confounder through the previous action, so ``p(a | s)`` and ``p(a | do(s))`` differ.
    """
    return TabularSCMSpec(
        p_u0=[0.5, 0.5],
        p_u_next=[[0.95, 0.05], [0.05, 0.95]],
        p_a=[[[0.9, 0.1], [0.1, 0.9]], [[0.9, 0.1], [0.1, 0.9]]],
        p_s_next=[[[0.9, 0.1], [0.1, 0.9]], [[0.9, 0.1], [0.1, 0.9]]],
        p_s0=[0.5, 0.5],
        reward=[[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [1.0, 0.0]]],
        gamma=0.9,
    )


@dataclasses.dataclass(frozen=True)
class JointTrace:
    """Exact joint distribution over ``(s0, u0, a0, s1, u1, a1, ..., sT)``."""

    #: number of decision steps T
    horizon: int
    #: probability table with one axis per variable
    joint: np.ndarray

    @property
    def names(self) -> typing.List[str]:
        names = []
        for t in range(self.horizon):
            names += [f"s{t}", f"u{t}", f"a{t}"]
        return names + [f"s{self.horizon}"]

    def axis(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ParameterError(f"Variable {name} is not part of a trace of horizon {self.horizon}.") from None

    def marginal(self, names: typing.Sequence[str]) -> np.ndarray:
        """Marginal distribution of the given variables, with axes in the given order."""
        axes = [self.axis(name) for name in names]
        summed = self.joint.sum(axis=tuple(i for i in range(self.joint.ndim) if i not in axes))
        order = sorted(axes)
        return np.transpose(summed, [order.index(axis) for axis in axes])


def joint_size(spec: TabularSCMSpec, horizon: int) -> int:
    """Number of entries of the joint table over ``horizon`` steps."""
    per_step = spec.n_states * spec.n_actions * spec.n_confounders
    return per_step**horizon * spec.n_states


def _attach(joint: np.ndarray, table: np.ndarray, parents: typing.Sequence[int]) -> np.ndarray:
    """Append a variable whose conditional table is indexed by the (ascending) parent axes."""
    shape = [1] * (joint.ndim + 1)
    for axis, size in zip(parents, table.shape[:-1]):
        shape[axis] = size
    shape[-1] = table.shape[-1]
    return joint[..., None] * table.reshape(shape)


def enumerate_joint(
    spec: TabularSCMSpec, horizon: int, intervention: typing.Optional[typing.Tuple[int, int]] = None
) -> JointTrace:
    """Enumerate the exact joint distribution up to ``horizon`` decision steps.

    :param spec: The causal model.
    :param horizon: Number of decision steps, at least 1.
    :param intervention: Optional ``(t, s)``; the mechanism generating ``s_t`` is replaced by a point mass
        on ``s`` (truncated factorization).
    :return: The joint trace.
    """
    if horizon < 1:
        raise ParameterError(f"Horizon must be at least 1, got {horizon}.")
    size = joint_size(spec, horizon)
    if size > JOINT_CAPACITY:
        raise CapacityError(f"Joint over {horizon} steps has {size} entries, the capacity is {JOINT_CAPACITY}.")

    def state_mechanism(t: int, table: np.ndarray) -> np.ndarray:
        if intervention is None or intervention[0] != t:
            return table
        clamped = np.zeros_like(table)
        clamped[..., intervention[1]] = 1.0
        return clamped

    if intervention is not None and not 0 <= intervention[1] < spec.n_states:
        raise ParameterError(f"State {intervention[1]} is out of range.")
    joint = state_mechanism(0, spec.p_s0)
    for t in range(horizon):
        s, u, a = 3 * t, 3 * t + 1, 3 * t + 2
        joint = _attach(joint, spec.p_u0, []) if t == 0 else _attach(joint, spec.p_u_next, [u - 3])
        joint = _attach(joint, spec.p_a, [s, u])
        joint = _attach(joint, state_mechanism(t + 1, spec.p_s_next), [s, a])
    return JointTrace(horizon=horizon, joint=joint)


def intervene(spec: TabularSCMSpec, horizon: int, t: int, s: int) -> JointTrace:
    """Joint trace under ``do(s_t = s)``."""
    return enumerate_joint(spec, horizon, intervention=(t, s))


def _check_query(spec: TabularSCMSpec, t: int, s: int):
    if t < 0:
        raise ParameterError(f"Step {t} is negative.")
    if not 0 <= s < spec.n_states:
        raise ParameterError(f"State {s} is out of range.")


def observational_policy(spec: TabularSCMSpec, t: int, s: int) -> np.ndarray:
    """Confounded observational conditional ``p(a_t | s_t = s)``."""
    _check_query(spec, t, s)
    row = enumerate_joint(spec, t + 1).marginal([f"s{t}", f"a{t}"])[s]
    mass = row.sum()
    if mass <= 0.0:
        raise ConditioningError(f"State {s} has probability zero at step {t}.")
    return row / mass


def interventional_policy_exact(spec: TabularSCMSpec, t: int, s: int) -> np.ndarray:
    """Interventional distribution ``p(a_t | do(s_t = s))`` by truncated factorization."""
    _check_query(spec, t, s)
    row = intervene(spec, t + 1, t, s).marginal([f"a{t}"])
    return row / row.sum()


@dataclasses.dataclass(frozen=True)
class BackdoorTables:
    """Exact tables entering the backdoor adjustment at step t.

    The adjustment set is the pair ``z = (s_{t-1}, a_{t-1})``; table axes follow that order.
    """

    #: marginal ``p(s_{t-1}, a_{t-1})``, shape ``(S, A)``
    p_past: np.ndarray
    #: marginal ``p(s_t)``, shape ``(S,)``
    p_state: np.ndarray
    #: ``p(s_{t-1}, a_{t-1} | s_t)``, shape ``(S, S, A)``, uniform rows for unreachable ``s_t``
    p_past_given_state: np.ndarray
    #: ``p(a_t | s_t, s_{t-1}, a_{t-1})``, shape ``(S, S, A, A)``, uniform rows where the condition is unreachable
    p_action_given_state_past: np.ndarray


def _normalize_rows(table: np.ndarray) -> np.ndarray:
    mass = table.sum(axis=-1, keepdims=True)
    uniform = np.full_like(table, 1.0 / table.shape[-1])
    return np.where(mass > 0.0, table / np.where(mass > 0.0, mass, 1.0), uniform)


def backdoor_conditionals(spec: TabularSCMSpec, t: int) -> BackdoorTables:
    """Read the backdoor tables for step ``t >= 1`` off the enumerated joint."""
    if t < 1:
        raise NoPastError(f"Step {t} has no previous step to adjust for.")
    m = enumerate_joint(spec, t + 1).marginal([f"s{t - 1}", f"a{t - 1}", f"s{t}", f"a{t}"])
    S, A = spec.n_states, spec.n_actions
    by_state = np.transpose(m.sum(axis=3), (2, 0, 1)).reshape(S, S * A)
    return BackdoorTables(
        p_past=m.sum(axis=(2, 3)),
        p_state=m.sum(axis=(0, 1, 3)),
        p_past_given_state=_normalize_rows(by_state).reshape(S, S, A),
        p_action_given_state_past=_normalize_rows(np.transpose(m, (2, 0, 1, 3))),
    )


def backdoor_adjusted_policy(spec: TabularSCMSpec, t: int, s: int) -> np.ndarray:
    """Backdoor adjustment ``sum_z p(a_t | s_t = s, z) p(z)`` with ``z = (s_{t-1}, a_{t-1})``.

    A conditional whose condition has probability zero is taken to be uniform.
    """
    if t < 1:
        raise NoPastError(f"Step {t} has no previous step to adjust for.")
    _check_query(spec, t, s)
    tables = backdoor_conditionals(spec, t)
    row = np.einsum("za,z->a", tables.p_action_given_state_past[s].reshape(-1, spec.n_actions), tables.p_past.ravel())
    return row / row.sum()


def soft_policy_evaluation(
    spec: TabularSCMSpec, policy: np.ndarray, alpha: float
) -> typing.Tuple[np.ndarray, np.ndarray]:
    """Exact entropy-regularized value of a stationary policy.

    Solves ``(I - gamma P_pi) V = r_pi + alpha H_pi`` and returns ``(V, Q)`` with
    ``Q(s, a) = E[r + gamma V(s')]``.
    """
    policy = np.asarray(policy, dtype=float)
    if policy.shape != (spec.n_states, spec.n_actions):
        raise ShapeError(f"Policy has shape {policy.shape}, expected {(spec.n_states, spec.n_actions)}.")
    expected_reward = np.einsum("sat,sat->sa", spec.p_s_next, spec.reward)
    transition = np.einsum("sa,sat->st", policy, spec.p_s_next)
    entropy = -xlogy(policy, policy).sum(axis=1)
    values = np.linalg.solve(
        np.eye(spec.n_states) - spec.gamma * transition,
        (policy * expected_reward).sum(axis=1) + alpha * entropy,
    )
    return values, expected_reward + spec.gamma * spec.p_s_next @ values


def boltzmann_policy(q_values: np.ndarray, alpha: float) -> np.ndarray:
    """Soft policy improvement ``pi_new(a | s) ∝ exp(Q(s, a) / alpha)``."""
    return softmax(np.asarray(q_values, dtype=float) / alpha, axis=1)


@dataclasses.dataclass
class SoftPolicyIterationResult:
    #: objective of every iterate, starting with the initial policy
    values: typing.List[float]
    #: every iterate, starting with the initial policy
    policies: typing.List[np.ndarray]


def soft_policy_iteration(
    mdp: TabularSCMSpec, alpha: float, iters: int, initial_policy: typing.Optional[np.ndarray] = None
) -> SoftPolicyIterationResult:
    """Alternate exact soft policy evaluation and Boltzmann improvement.

    The objective of an iterate is its soft value averaged over the uniform state distribution.

    :param mdp: A spec without confounders (a single confounder value).
    :param alpha: Temperature, positive.
    :param iters: Number of improvement steps, at least 1.
    :param initial_policy: Starting policy, uniform if not given.
    :return: Objectives and policies of all iterates.
    """
    if alpha <= 0:
        raise ParameterError(f"Temperature must be positive, got {alpha}.")
    if iters < 1:
        raise ParameterError(f"Number of iterations must be at least 1, got {iters}.")
    if mdp.n_confounders != 1:
        raise ParameterError("Soft policy iteration expects a spec without confounders.")
    policy = (
        np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)
        if initial_policy is None
        else np.asarray(initial_policy, dtype=float)
    )
    result = SoftPolicyIterationResult(values=[], policies=[])
    for _ in range(iters + 1):
        values, q_values = soft_policy_evaluation(mdp, policy, alpha)
        result.values.append(float(values.mean()))
        result.policies.append(policy)
        policy = boltzmann_policy(q_values, alpha)
    return result


@dataclasses.dataclass
class OracleReport:
    """Outcome of the randomized property corpus."""

    n_specs: int
    #: largest total variation between backdoor-adjusted and interventional policies
    max_backdoor_tv: float
    #: largest total variation between interventional and observational policies without confounders
    max_unconfounded_gap: float
    #: most negative objective increment of soft policy iteration
    min_spi_increment: float
    #: total variation between observational and interventional policies of the confounded example
    confounding_tv: float

    @property
    def passed(self) -> bool:
        return (
            self.max_backdoor_tv <= 1e-9
            and self.max_unconfounded_gap <= 1e-12
            and self.min_spi_increment >= -1e-9
            and self.confounding_tv > 0.1
        )


def run_oracle_corpus(n_specs: int = 100, seed: int = 0, alphas=(0.1, 0.5, 2.0)) -> OracleReport:
    """Check the oracle's causal identities on ``n_specs`` random models."""
    from .utils import total_variation

    rng = np.random.default_rng(seed)
    max_backdoor, max_gap, min_increment = 0.0, 0.0, np.inf
    for _ in range(n_specs):
        S, A, U = rng.integers(1, 4, size=3)
        spec = random_spec(S, A, U, rng, iid_confounder=bool(rng.integers(2)))
        t = int(rng.integers(1, 3))
        for s in range(S):
            max_backdoor = max(
                max_backdoor,
                total_variation(backdoor_adjusted_policy(spec, t, s), interventional_policy_exact(spec, t, s)),
            )
        plain = spec.without_confounders()
        for s in range(S):
            max_gap = max(
                max_gap,
                total_variation(interventional_policy_exact(plain, t, s), observational_policy(plain, t, s)),
            )
        for alpha in alphas:
            values = soft_policy_iteration(plain, alpha, iters=10).values
            min_increment = min(min_increment, float(np.min(np.diff(values))))
    example = confounded_example()
    report = OracleReport(
        n_specs=n_specs,
        max_backdoor_tv=max_backdoor,
        max_unconfounded_gap=max_gap,
        min_spi_increment=min_increment,
        confounding_tv=total_variation(observational_policy(example, 1, 0), interventional_policy_exact(example, 1, 0)),
    )
    log.info(f"Oracle corpus over {n_specs} specs: {report}")
    return report
