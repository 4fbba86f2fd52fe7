"""Replay over extended transitions, the DoSAC and SAC update steps, and the training loop.

Records carry the previous state and action next to the usual transition so that the backdoor
reconstructor can be supervised with the true past. The first record of an episode has no past;
its ``s_prev`` and ``a_prev`` are zeros and it is skipped by the reconstructor loss.
"""

from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
import typing
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from .config import RunConfig
from .constants import METRIC_COLUMNS, Algorithm, AlphaMode, PseudoPastAnchor, StoredAction
from .critic import TwinCritic, critic_loss, polyak_update, q_min, soft_target
from .envs import ACTUATOR_LIMIT, EnvConfig, make_env, rollout_returns
from .errors import CheckpointError, ReplayError
from .function_approx import DTYPE, as_tensor, load_checkpoint, make_adam, minimize_step, save_checkpoint
from .policy import DoSACPolicy, reconstructor_nll_loss
from .utils import numpy_stream, torch_stream

log = logging.getLogger(__name__)


@dataclasses.dataclass
class ExtendedTransition:
    """``(s_prev, a_prev, s, a, r, s_next, done)`` plus episode bookkeeping."""

    s_prev: np.ndarray
    a_prev: np.ndarray
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    #: true termination; time-limit truncation only ends the episode
    done: bool
    first_step: bool
    episode: int = 0


@dataclasses.dataclass
class TransitionBatch:
    """Column tensors of sampled records."""

    s_prev: torch.Tensor
    a_prev: torch.Tensor
    s: torch.Tensor
    a: torch.Tensor
    r: torch.Tensor
    s_next: torch.Tensor
    done: torch.Tensor
    first_step: torch.Tensor
    episode: torch.Tensor

    def __len__(self):
        return self.s.shape[0]

    @classmethod
    def from_records(cls, records: typing.Sequence[ExtendedTransition]) -> "TransitionBatch":
        def column(name, dtype=DTYPE):
            return torch.as_tensor(np.array([getattr(record, name) for record in records]), dtype=dtype)

        return cls(
            s_prev=column("s_prev"),
            a_prev=column("a_prev"),
            s=column("s"),
            a=column("a"),
            r=column("r"),
            s_next=column("s_next"),
            done=column("done", torch.bool),
            first_step=column("first_step", torch.bool),
            episode=column("episode", torch.int64),
        )


class ReplayBuffer(object):
    """Fixed-capacity ring of extended transitions stored column-wise."""

    _VECTORS = ("s_prev", "a_prev", "s", "a", "s_next")

    def __init__(self, capacity: int, state_dim: int, action_dim: int, action_bound: float = 1.0):
        if capacity < 1:
            raise ReplayError(f"Capacity must be at least 1, got {capacity}.")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.action_bound = action_bound
        dims = {"s_prev": state_dim, "a_prev": action_dim, "s": state_dim, "a": action_dim, "s_next": state_dim}
        self.columns = {name: np.zeros((capacity, dim)) for name, dim in dims.items()}
        self.columns["r"] = np.zeros(capacity)
        self.columns["done"] = np.zeros(capacity, dtype=bool)
        self.columns["first_step"] = np.zeros(capacity, dtype=bool)
        self.columns["episode"] = np.zeros(capacity, dtype=np.int64)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def check(self, t: ExtendedTransition):
        for name in self._VECTORS:
            value = np.asarray(getattr(t, name), dtype=float)
            if value.shape != self.columns[name].shape[1:]:
                raise ReplayError(f"Field {name} has shape {value.shape}, expected {self.columns[name].shape[1:]}.")
            if not np.isfinite(value).all():
                raise ReplayError(f"Field {name} is not finite: {value}.")
        if not math.isfinite(t.r):
            raise ReplayError(f"Reward {t.r} is not finite.")
        for name in ("a", "a_prev"):
            if (np.abs(getattr(t, name)) > self.action_bound).any():
                raise ReplayError(f"Action {name} = {getattr(t, name)} lies outside of the action box.")

    def record(self, index: int) -> ExtendedTransition:
        return ExtendedTransition(**{name: column[index] for name, column in self.columns.items()})

    def state_dict(self) -> dict:
        return {"columns": {k: v.copy() for k, v in self.columns.items()}, "cursor": self.cursor, "size": self.size}

    def load_state_dict(self, state: dict):
        self.columns = {k: np.array(v) for k, v in state["columns"].items()}
        self.cursor, self.size = int(state["cursor"]), int(state["size"])


def push_transition(buf: ReplayBuffer, t: ExtendedTransition):
    """Store a record, overwriting the oldest one once the buffer is full."""
    buf.check(t)
    for name, column in buf.columns.items():
        column[buf.cursor] = getattr(t, name)
    buf.cursor = (buf.cursor + 1) % buf.capacity
    buf.size = min(buf.size + 1, buf.capacity)


def sample_indices(buf: ReplayBuffer, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ReplayError(f"Batch size must be at least 1, got {n}.")
    if buf.size < n:
        raise ReplayError(f"Cannot sample {n} records from a buffer holding {buf.size}.")
    return rng.integers(buf.size, size=n)


def sample_batch(buf: ReplayBuffer, n: int, rng: np.random.Generator) -> TransitionBatch:
    """Uniform sample with replacement over the stored records."""
    indices = sample_indices(buf, n, rng)
    values = {name: column[indices] for name, column in buf.columns.items()}
    tensors = {name: torch.as_tensor(values[name], dtype=DTYPE) for name in (*ReplayBuffer._VECTORS, "r")}
    return TransitionBatch(
        **tensors,
        done=torch.as_tensor(values["done"]),
        first_step=torch.as_tensor(values["first_step"]),
        episode=torch.as_tensor(values["episode"]),
    )


class AgentState(object):
    """Networks, optimizers, temperature and counters of one learner."""

    def __init__(
        self,
        config: RunConfig,
        state_dim: int,
        action_dim: int,
        seed: int = 0,
    ):
        self.config = config
        self.seed = seed
        initGenerator = torch_stream(seed, "init")
        self.policy = DoSACPolicy(
            state_dim,
            action_dim,
            config.network.hidden_sizes,
            config.network.activation,
            initGenerator,
            n_log_prob_samples=config.n_log_prob_samples,
            bypass=config.algorithm == Algorithm.SAC,
            joint_training=config.joint_training,
            anchor=config.anchor,
        )
        self.critic = TwinCritic(
            state_dim,
            action_dim,
            config.network.critic_hidden_sizes,
            config.network.activation,
            initGenerator,
            twin=config.twin_critics,
        )
        self.critic.hard_update()
        actorParams = list(self.policy.actor.parameters())
        if config.joint_training:
            actorParams += list(self.policy.reconstructor.parameters())
        self.actor_params = actorParams
        self.actor_opt = make_adam(actorParams, config.actor_lr)
        self.critic_opt = make_adam(self.critic.online_parameters(), config.critic_lr)
        self.recon_opt = make_adam(self.policy.reconstructor.parameters(), config.recon_lr)
        self.log_alpha = torch.tensor(math.log(config.alpha), dtype=DTYPE, requires_grad=True)
        self.alpha_opt = make_adam([self.log_alpha], config.alpha_lr)
        self.alpha_mode = AlphaMode.from_name(config.alpha_mode)
        self.target_entropy = -float(action_dim)
        self.generator = torch_stream(seed, "policy")
        self.step = 0

    @property
    def alpha(self) -> float:
        return float(torch.exp(self.log_alpha.detach()))

    def state_dict(self) -> dict:
        return {
            "policy": self.policy.state_dict(),
            "critic": self.critic.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "recon_opt": self.recon_opt.state_dict(),
            "alpha_opt": self.alpha_opt.state_dict(),
            "log_alpha": self.log_alpha.detach().clone(),
            "generator": self.generator.get_state(),
            "step": self.step,
        }

    def load_state_dict(self, state: dict):
        self.policy.load_state_dict(state["policy"])
        self.critic.load_state_dict(state["critic"])
        self.actor_opt.load_state_dict(state["actor_opt"])
        self.critic_opt.load_state_dict(state["critic_opt"])
        self.recon_opt.load_state_dict(state["recon_opt"])
        with torch.no_grad():
            self.log_alpha.copy_(state["log_alpha"])
        self.alpha_opt.load_state_dict(state["alpha_opt"])
        self.generator.set_state(state["generator"])
        self.step = int(state["step"])


def _anchors(policy: DoSACPolicy, batch: TransitionBatch) -> typing.Optional[torch.Tensor]:
    # the sampled replay states form the anchor pool
    if policy.anchor == PseudoPastAnchor.Marginal:
        return batch.s
    return None


def _actor_objective(
    policy: DoSACPolicy,
    psi: TwinCritic,
    batch: TransitionBatch,
    alpha: float,
    generator: typing.Optional[torch.Generator],
    noise=None,
) -> typing.Tuple[torch.Tensor, torch.Tensor]:
    if len(batch) == 0:
        raise ReplayError("Cannot compute the actor loss of an empty batch.")
    sample = policy.sample_interventional(batch.s, generator, _anchors(policy, batch), noise)
    loss = (alpha * sample.log_prob_do - q_min(psi, batch.s, sample.action)).mean()
    return loss, sample.log_prob_do


def actor_loss(
    theta: DoSACPolicy,
    psi: TwinCritic,
    batch: TransitionBatch,
    alpha: float,
    generator: typing.Optional[torch.Generator] = None,
    noise=None,
) -> torch.Tensor:
    """Mean of ``alpha * log pi(a | do(s)) - min Q(s, a)`` over reparameterized interventional samples.

    The reconstructor receives gradients only when the policy trains jointly.

    :param theta: Policy holding the actor and the reconstructor.
    :param psi: Critic, treated as fixed.
    :param batch: Sampled records; only the states are used.
    :param alpha: Temperature.
    :param generator: Source of the sampling noise.
    :param noise: Frozen ``(reconstructor_noise, actor_noise)``.
    :return: The loss.
    """
    return _actor_objective(theta, psi, batch, alpha, generator, noise)[0]


@contextlib.contextmanager
def _bypassed(policy: DoSACPolicy):
    previous = policy.bypass
    policy.bypass = True
    try:
        yield policy
    finally:
        policy.bypass = previous


def _update(state: AgentState, batch: TransitionBatch) -> typing.Tuple[AgentState, dict]:
    if len(batch) == 0:
        raise ReplayError("Cannot update on an empty batch.")
    config, policy = state.config, state.policy
    metrics = {"recon_loss": None}

    if not policy.bypass and bool((~batch.first_step).any()):
        reconLoss = reconstructor_nll_loss(policy.reconstructor, batch)
        minimize_step(state.recon_opt, reconLoss, list(policy.reconstructor.parameters()))
        metrics["recon_loss"] = float(reconLoss)

    alpha = state.alpha
    anchors = _anchors(policy, batch)
    targets = soft_target(
        batch.r, batch.done, batch.s_next, config.gamma, alpha, state.critic, policy, state.generator, anchors
    )
    criticLoss = critic_loss(state.critic, batch, targets)
    minimize_step(state.critic_opt, criticLoss, state.critic.online_parameters())
    metrics["critic_loss"] = float(criticLoss)

    actorLoss, logProbDo = _actor_objective(policy, state.critic, batch, alpha, state.generator)
    minimize_step(state.actor_opt, actorLoss, state.actor_params)
    metrics["actor_loss"] = float(actorLoss)

    if state.alpha_mode == AlphaMode.Learned:
        alphaLoss = -(state.log_alpha * (logProbDo.detach() + state.target_entropy)).mean()
        minimize_step(state.alpha_opt, alphaLoss, [state.log_alpha])
    metrics["alpha"] = state.alpha

    polyak_update(state.critic.target, state.critic.online, config.tau)
    state.step += 1
    return state, metrics


def dosac_update(state: AgentState, batch: TransitionBatch) -> typing.Tuple[AgentState, dict]:
    """One update: reconstructor, critic, actor, temperature, then target smoothing.

    :return: The state, updated in place, and the scalar losses. ``recon_loss`` is ``None`` when the
        reconstructor is bypassed or every record starts an episode.
    """
    return _update(state, batch)


def sac_update(state: AgentState, batch: TransitionBatch) -> typing.Tuple[AgentState, dict]:
    """The same pipeline with the reconstructor bypassed, so ``log pi(a | s)`` replaces ``log pi(a | do(s))``."""
    with _bypassed(state.policy):
        return _update(state, batch)


def evaluate_policy(policy: DoSACPolicy, env_config: EnvConfig, episodes: int, seed: int) -> np.ndarray:
    """Returns of the deterministic mean-action policy over ``episodes`` seeded episodes."""
    env = make_env(env_config, seed)

    def act(observation):
        return policy.act_deterministic(observation).numpy()

    return rollout_returns(env, act, episodes, seed)


@dataclasses.dataclass
class TrainingResult:
    run_dir: Path
    metrics: pd.DataFrame
    checkpoints: typing.List[Path]


class Trainer(object):
    """Interaction loop of one seed, resumable from a checkpoint."""

    def __init__(self, config: RunConfig, seed: typing.Optional[int] = None):
        self.config = config
        self.seed = config.seeds[0] if seed is None else int(seed)
        self.env = make_env(config.env, self.seed)
        stateDim = self.env.observation_space.shape[0]
        actionDim = self.env.action_space.shape[0]
        self.agent = AgentState(config, stateDim, actionDim, self.seed)
        self.update = sac_update if config.algorithm == Algorithm.SAC else dosac_update
        self.stored_action = StoredAction.from_name(config.stored_action)
        bound = ACTUATOR_LIMIT if self.stored_action == StoredAction.Executed else 1.0
        self.buffer = ReplayBuffer(min(config.buffer_capacity, max(config.total_steps, 1)), stateDim, actionDim, bound)
        self.replay_rng = numpy_stream(self.seed, "replay")
        self.explore_rng = numpy_stream(self.seed, "explore")
        self.metrics: typing.List[dict] = []
        self.last_losses = {"critic_loss": None, "actor_loss": None, "recon_loss": None}
        self.step = 0
        self.episode = 0
        self.episode_return = 0.0
        envSeed = int(numpy_stream(self.seed, "env").integers(2**31 - 1))
        self.observation, _ = self.env.reset(seed=envSeed)
        self._start_episode()

    def _start_episode(self):
        self.s_prev = np.zeros(self.env.observation_space.shape[0])
        self.a_prev = np.zeros(self.env.action_space.shape[0])
        self.first_step = True
        self.episode_return = 0.0

    @property
    def finished(self) -> bool:
        return self.step >= self.config.total_steps or self.episode >= self.config.max_episodes

    def _act(self) -> np.ndarray:
        if self.step < self.config.warmup_steps:
            return self.explore_rng.uniform(-1.0, 1.0, size=self.env.action_space.shape)
        policy = self.agent.policy
        anchors = None
        if policy.anchor == PseudoPastAnchor.Marginal and len(self.buffer) > 0:
            anchors = as_tensor(self.buffer.columns["s"][[self.explore_rng.integers(len(self.buffer))]])
        with torch.no_grad():
            sample = policy.sample_interventional(as_tensor(self.observation), self.agent.generator, anchors)
        return sample.action.numpy()

    def _log_row(self, **values):
        row = {column: None for column in METRIC_COLUMNS}
        row.update(step=self.step, episode=self.episode, alpha=self.agent.alpha, **self.last_losses)
        row.update(values)
        self.metrics.append(row)

    def evaluate(self) -> typing.Tuple[float, float]:
        """Mean clean and confounded evaluation returns of the current policy."""
        episodes = self.config.eval.episodes
        clean = evaluate_policy(self.agent.policy, self.config.env.clean(), episodes, self.seed)
        confounded = evaluate_policy(
            self.agent.policy, dataclasses.replace(self.config.env, confounded=True), episodes, self.seed
        )
        log.info(f"seed {self.seed} step {self.step}: clean {clean.mean():.3f}, confounded {confounded.mean():.3f}")
        return float(clean.mean()), float(confounded.mean())

    def _evaluation_due(self) -> bool:
        interval = self.config.eval.interval
        return (interval > 0 and self.step % interval == 0) or self.finished

    def env_step(self):
        """One environment step followed by the scheduled updates and evaluation."""
        nominal = self._act()
        nextObservation, reward, terminated, truncated, _ = self.env.step(nominal)
        if self.stored_action == StoredAction.Executed:
            stored = self.env.diagnostics()["executed_action"]
        else:
            stored = nominal
        push_transition(
            self.buffer,
            ExtendedTransition(
                self.s_prev,
                self.a_prev,
                self.observation,
                stored,
                float(reward),
                nextObservation,
                bool(terminated),
                self.first_step,
                self.episode,
            ),
        )
        self.s_prev, self.a_prev, self.first_step = self.observation, stored, False
        self.observation = nextObservation
        self.episode_return += reward
        self.step += 1

        if self.step >= self.config.warmup_steps and len(self.buffer) >= self.config.batch_size:
            for _ in range(self.config.updates_per_step):
                batch = sample_batch(self.buffer, self.config.batch_size, self.replay_rng)
                _, losses = self.update(self.agent, batch)
                self.last_losses = {key: losses[key] for key in self.last_losses}

        if terminated or truncated:
            log.debug(f"seed {self.seed} episode {self.episode} ended at step {self.step}: {self.episode_return:.3f}")
            self._log_row(train_return=self.episode_return)
            self.episode += 1
            self.observation, _ = self.env.reset()
            self._start_episode()

        if self._evaluation_due():
            clean, confounded = self.evaluate()
            self._log_row(eval_clean_return=clean, eval_conf_return=confounded)

    def run(self, steps: typing.Optional[int] = None) -> "Trainer":
        """Advance by ``steps`` environment steps, or until the run is finished."""
        stop = self.config.total_steps if steps is None else min(self.step + steps, self.config.total_steps)
        while self.step < stop and not self.finished:
            self.env_step()
        return self

    def metric_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.metrics, columns=list(METRIC_COLUMNS))

    def save_checkpoint(self, path) -> Path:
        """Write everything needed to continue the run exactly."""
        payload = {
            "config": self.config.to_dict(),
            "seed": self.seed,
            "policy_settings": self.agent.policy.settings(),
            "agent": self.agent.state_dict(),
            "buffer": self.buffer.state_dict(),
            "env": self.env.get_state(),
            "rngs": {
                "replay": self.replay_rng.bit_generator.state,
                "explore": self.explore_rng.bit_generator.state,
            },
            "loop": {
                "step": self.step,
                "episode": self.episode,
                "episode_return": self.episode_return,
                "observation": self.observation,
                "s_prev": self.s_prev,
                "a_prev": self.a_prev,
                "first_step": self.first_step,
                "last_losses": dict(self.last_losses),
                "metrics": [dict(row) for row in self.metrics],
            },
        }
        save_checkpoint(path, "trainer", payload)
        return Path(path)

    @classmethod
    def from_checkpoint(cls, path) -> "Trainer":
        payload = load_checkpoint(path, "trainer")
        trainer = cls(RunConfig.from_dict(payload["config"]), payload["seed"])
        trainer.agent.load_state_dict(payload["agent"])
        trainer.buffer.load_state_dict(payload["buffer"])
        trainer.env.load_state(payload["env"])
        trainer.replay_rng.bit_generator.state = payload["rngs"]["replay"]
        trainer.explore_rng.bit_generator.state = payload["rngs"]["explore"]
        loop = payload["loop"]
        trainer.step, trainer.episode = int(loop["step"]), int(loop["episode"])
        trainer.episode_return = float(loop["episode_return"])
        trainer.observation = np.array(loop["observation"])
        trainer.s_prev, trainer.a_prev = np.array(loop["s_prev"]), np.array(loop["a_prev"])
        trainer.first_step = bool(loop["first_step"])
        trainer.last_losses = dict(loop["last_losses"])
        trainer.metrics = [dict(row) for row in loop["metrics"]]
        return trainer


def load_policy(path) -> DoSACPolicy:
    """Rebuild the policy stored in a trainer checkpoint."""
    payload = load_checkpoint(path, "trainer")
    settings, config = payload["policy_settings"], RunConfig.from_dict(payload["config"])
    policy = DoSACPolicy(
        settings["state_dim"],
        settings["action_dim"],
        config.network.hidden_sizes,
        config.network.activation,
        n_log_prob_samples=settings["n_log_prob_samples"],
        bypass=settings["bypass"],
        joint_training=settings["joint_training"],
        anchor=settings["anchor"],
    )
    try:
        policy.load_state_dict(payload["agent"]["policy"])
    except RuntimeError as error:
        raise CheckpointError(f"Checkpoint {path} does not match its recorded network settings: {error}") from error
    return policy


def train(config: RunConfig, run_dir=None, seed: typing.Optional[int] = None) -> TrainingResult:
    """Train one seed and write ``metrics.csv`` plus initial and final checkpoints into ``run_dir``."""
    config.validate()
    trainer = Trainer(config, seed)
    runDir = Path(run_dir) if run_dir is not None else config.output_root() / f"seed_{trainer.seed}"
    checkpointDir = runDir / "checkpoints"
    checkpoints = [trainer.save_checkpoint(checkpointDir / "initial.pt")]
    if config.total_steps > 0:
        trainer.run()
        checkpoints.append(trainer.save_checkpoint(checkpointDir / "final.pt"))
    metrics = trainer.metric_frame()
    runDir.mkdir(parents=True, exist_ok=True)
    metrics.to_csv(runDir / "metrics.csv", index=False)
    log.info(f"seed {trainer.seed}: {trainer.step} steps, {trainer.episode} episodes, written to {runDir}")
    return TrainingResult(runDir, metrics, checkpoints)


__all__ = [
    "AgentState",
    "ExtendedTransition",
    "ReplayBuffer",
    "Trainer",
    "TrainingResult",
    "TransitionBatch",
    "actor_loss",
    "dosac_update",
    "evaluate_policy",
    "load_policy",
    "push_transition",
    "sample_batch",
    "sac_update",
    "train",
]
