"""The interventional policy: a backdoor reconstructor composed with an interventional actor.

Sampling follows two stages. A pseudo-past ``(s~_{t-1}, a~_{t-1})`` is drawn from the reconstructor
``p_phi(s_{t-1}, a_{t-1} | s_t)``, then an action from the actor ``p_theta(a_t | s_t, s~_{t-1}, a~_{t-1})``.
Averaging the actor over pseudo-past draws estimates the backdoor-adjusted policy ``pi(a | do(s))``.

The reconstructor is conditioned on an *anchor* state. Anchoring on the queried state itself is the
usual approximation; anchoring on states drawn from the replay buffer makes the pseudo-past a draw from
its marginal, which is what the adjustment formula averages over.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import typing

import numpy as np
import torch
from scipy.special import logsumexp
from torch import nn

from .constants import TANH_EPSILON, Activation, PseudoPastAnchor
from .errors import NumericError, ParameterError, ReplayError, ShapeError
from .function_approx import (
    DTYPE,
    DiagGaussian,
    Mlp,
    as_tensor,
    gaussian_log_prob,
    mlp_forward,
    tanh_log_det,
    tanh_rsample,
)

if typing.TYPE_CHECKING:
    from .agent import TransitionBatch  # noqa: F401
    from .tabular_scm import TabularSCMSpec  # noqa: F401

log = logging.getLogger(__name__)


@dataclasses.dataclass
class InterventionalSample:
    """One draw of Algorithm-1 style forward sampling."""

    #: action in the open unit box
    action: torch.Tensor
    #: estimate of ``log pi(a | do(s))``
    log_prob_do: torch.Tensor
    #: ``[s~_{t-1}, a~_{t-1}]`` the action was conditioned on
    pseudo_past: torch.Tensor
    #: ``log p_theta(a | s, pseudo_past)``
    actor_log_prob: torch.Tensor


class BackdoorReconstructor(nn.Module):
    """Gaussian model of the previous state and action given an (anchor) state.

    State components of the pseudo-past are unbounded; action components are squashed into the
    action box.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden_sizes: typing.Sequence[int] = (64, 64),
        activation: Activation = Activation.Tanh,
        generator: typing.Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = Mlp([state_dim, *hidden_sizes, 2 * (state_dim + action_dim)], activation, generator)

    @property
    def past_dim(self) -> int:
        return self.state_dim + self.action_dim

    def head(self, anchor: torch.Tensor) -> DiagGaussian:
        return DiagGaussian.from_head(mlp_forward(self.net, anchor))

    def squash(self, z: torch.Tensor) -> torch.Tensor:
        """Map a pre-squash point to a pseudo-past."""
        return torch.cat([z[..., : self.state_dim], torch.tanh(z[..., self.state_dim :])], dim=-1)

    def mean_past(self, anchor: torch.Tensor) -> torch.Tensor:
        return self.squash(self.head(anchor).mean)

    def log_density(self, anchor: torch.Tensor, s_prev: torch.Tensor, a_prev: torch.Tensor) -> torch.Tensor:
        """Log density of a true past under the reconstructor, with the action squash correction."""
        bound = 1.0 - TANH_EPSILON
        z_a = torch.atanh(torch.clamp(as_tensor(a_prev), -bound, bound))
        z = torch.cat([as_tensor(s_prev), z_a], dim=-1)
        return gaussian_log_prob(self.head(anchor), z) - tanh_log_det(z_a)


def reconstruct_past(
    phi: BackdoorReconstructor, s, noise
) -> typing.Tuple[torch.Tensor, torch.Tensor]:
    """Reparameterized pseudo-past draw.

    :param phi: The reconstructor.
    :param s: Anchor state(s), shape ``(..., state_dim)``.
    :param noise: Standard normal noise, shape ``(..., state_dim + action_dim)``.
    :return: ``(pseudo_past, log_q)``.
    """
    g = phi.head(as_tensor(s))
    noise = as_tensor(noise)
    if noise.shape != g.mean.shape:
        raise ShapeError(f"Noise shape {tuple(noise.shape)} differs from the pseudo-past shape {tuple(g.mean.shape)}.")
    z = g.mean + g.std * noise
    return phi.squash(z), gaussian_log_prob(g, z) - tanh_log_det(z[..., phi.state_dim :])


class InterventionalActor(nn.Module):
    """Tanh-squashed Gaussian actor conditioned on the state and a pseudo-past."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden_sizes: typing.Sequence[int] = (64, 64),
        activation: Activation = Activation.Tanh,
        generator: typing.Optional[torch.Generator] = None,
    ):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.net = Mlp([2 * state_dim + action_dim, *hidden_sizes, 2 * action_dim], activation, generator)

    def head(self, s: torch.Tensor, pseudo_past: torch.Tensor) -> DiagGaussian:
        return DiagGaussian.from_head(mlp_forward(self.net, torch.cat([s, pseudo_past], dim=-1)))

    def pre_squash_log_prob(self, s: torch.Tensor, pseudo_past: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        """``log p_theta(tanh(z) | s, pseudo_past)`` evaluated through the pre-squash point ``z``."""
        return gaussian_log_prob(self.head(s, pseudo_past), z) - tanh_log_det(z)

    def sample(
        self, s: torch.Tensor, pseudo_past: torch.Tensor, noise: torch.Tensor
    ) -> typing.Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return ``(action, log_prob, pre_squash)`` for the given noise."""
        g = self.head(s, pseudo_past)
        action, logProb = tanh_rsample(g, noise)
        return action, logProb, g.mean + g.std * noise


def _check_action(a: torch.Tensor):
    if (a.abs() >= 1.0).any():
        raise NumericError("The action lies on the boundary of the action box where the log-density diverges.")


class DoSACPolicy(nn.Module):
    """Interventional policy ``pi_{theta, phi}(a | do(s))``."""

    #: number of pseudo-past draws of the log-probability estimate inside sampling
    n_log_prob_samples: int = 1
    #: replace every pseudo-past by zeros, which turns the policy into a plain SAC policy head
    bypass: bool = False
    #: let actor and critic losses backpropagate into the reconstructor
    joint_training: bool = False
    #: which state the reconstructor is conditioned on
    anchor: PseudoPastAnchor = PseudoPastAnchor.Current

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden_sizes: typing.Sequence[int] = (64, 64),
        activation: Activation = Activation.Tanh,
        generator: typing.Optional[torch.Generator] = None,
        n_log_prob_samples: int = 1,
        bypass: bool = False,
        joint_training: bool = False,
        anchor: PseudoPastAnchor = PseudoPastAnchor.Current,
    ):
        super().__init__()
        if n_log_prob_samples < 1:
            raise ParameterError(f"Number of log-probability samples must be at least 1, got {n_log_prob_samples}.")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.actor = InterventionalActor(state_dim, action_dim, hidden_sizes, activation, generator)
        self.reconstructor = BackdoorReconstructor(state_dim, action_dim, hidden_sizes, activation, generator)
        self.n_log_prob_samples = n_log_prob_samples
        self.bypass = bypass
        self.joint_training = joint_training
        self.anchor = PseudoPastAnchor.from_name(anchor)

    @property
    def past_dim(self) -> int:
        return self.state_dim + self.action_dim

    def settings(self) -> dict:
        """Everything besides the parameters that is needed to rebuild the policy."""
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "n_log_prob_samples": self.n_log_prob_samples,
            "bypass": self.bypass,
            "joint_training": self.joint_training,
            "anchor": self.anchor.label,
        }

    def _anchors(
        self, s: torch.Tensor, anchors: typing.Optional[torch.Tensor], generator: typing.Optional[torch.Generator]
    ) -> torch.Tensor:
        """States the reconstructor is conditioned on, one per pseudo-past draw.

        In marginal mode every draw picks its own anchor uniformly from the pool of replay states,
        so repeated draws for one state mix over the anchors.
        """
        if anchors is None or self.anchor == PseudoPastAnchor.Current:
            return s
        pool = as_tensor(anchors)
        if pool.dim() != 2 or pool.shape[0] < 1 or pool.shape[1] != self.state_dim:
            raise ShapeError(f"Anchor pool has shape {tuple(pool.shape)}, expected (n, {self.state_dim}).")
        return pool[torch.randint(pool.shape[0], s.shape[:-1], generator=generator)]

    def draw_pseudo_past(
        self,
        s: torch.Tensor,
        generator: typing.Optional[torch.Generator] = None,
        anchors: typing.Optional[torch.Tensor] = None,
        noise: typing.Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Draw one pseudo-past per state; zeros when bypassed."""
        shape = (*s.shape[:-1], self.past_dim)
        if self.bypass:
            return torch.zeros(shape, dtype=DTYPE)
        if noise is None:
            noise = torch.randn(shape, generator=generator, dtype=DTYPE)
        pseudoPast, _ = reconstruct_past(self.reconstructor, self._anchors(s, anchors, generator), noise)
        return pseudoPast if self.joint_training else pseudoPast.detach()

    def sample_interventional(
        self,
        s,
        generator: typing.Optional[torch.Generator] = None,
        anchors: typing.Optional[torch.Tensor] = None,
        noise: typing.Optional[typing.Tuple[torch.Tensor, torch.Tensor]] = None,
    ) -> InterventionalSample:
        """Two-stage reparameterized sample.

        :param s: State(s), shape ``(..., state_dim)``.
        :param generator: Source of the sampling noise.
        :param anchors: Pool of replay states for marginal anchoring, shape ``(n, state_dim)``.
        :param noise: Frozen ``(reconstructor_noise, actor_noise)``, drawn from ``generator`` if not given.
        :return: The sample.
        """
        s = as_tensor(s)
        reconNoise, actorNoise = noise if noise is not None else (None, None)
        pseudoPast = self.draw_pseudo_past(s, generator, anchors, reconNoise)
        if actorNoise is None:
            actorNoise = torch.randn((*s.shape[:-1], self.action_dim), generator=generator, dtype=DTYPE)
        action, actorLogProb, z = self.actor.sample(s, pseudoPast, actorNoise)
        if self.n_log_prob_samples == 1 or self.bypass:
            logProbDo = actorLogProb
        else:
            logProbDo = self._log_prob_do(s, z, self.n_log_prob_samples, generator, anchors)
        return InterventionalSample(action, logProbDo, pseudoPast, actorLogProb)

    def _log_prob_do(
        self,
        s: torch.Tensor,
        z: torch.Tensor,
        K: int,
        generator: typing.Optional[torch.Generator],
        anchors: typing.Optional[torch.Tensor],
        pseudo_pasts: typing.Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        if pseudo_pasts is None:
            repeated = s.unsqueeze(0).expand(K, *s.shape)
            pseudo_pasts = self.draw_pseudo_past(repeated, generator, anchors)
        elif pseudo_pasts.shape[0] != K:
            raise ShapeError(f"Got {pseudo_pasts.shape[0]} pseudo-pasts for K = {K}.")
        terms = torch.stack(
            [self.actor.pre_squash_log_prob(s, pseudo_pasts[k], z) for k in range(K)],
            dim=0,
        )
        return torch.logsumexp(terms, dim=0) - math.log(K)

    def actor_log_prob(self, s, pseudo_past, a) -> torch.Tensor:
        """``log p_theta(a | s, pseudo_past)`` of an action strictly inside the box."""
        a = as_tensor(a)
        _check_action(a)
        return self.actor.pre_squash_log_prob(as_tensor(s), as_tensor(pseudo_past), torch.atanh(a))

    def interventional_log_prob(
        self,
        s,
        a,
        K: typing.Optional[int] = None,
        generator: typing.Optional[torch.Generator] = None,
        anchors: typing.Optional[torch.Tensor] = None,
        pseudo_pasts: typing.Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Log-mean-exp estimate of ``log pi(a | do(s))`` over ``K`` pseudo-past draws.

        The estimate is consistent as ``K`` grows; for finite ``K`` it is biased downwards
        (Jensen's inequality). ``K = 1`` is the single-sample approximation used in the soft target.

        :param s: State(s).
        :param a: Action(s) strictly inside the unit box.
        :param K: Number of pseudo-past draws, the policy's setting if not given.
        :param generator: Source of the pseudo-past noise.
        :param anchors: Pool of replay states for marginal anchoring.
        :param pseudo_pasts: Use these ``K`` pseudo-pasts (stacked along the first axis) instead of drawing.
        :return: The estimate.
        """
        K = self.n_log_prob_samples if K is None else K
        if K < 1:
            raise ParameterError(f"K must be at least 1, got {K}.")
        s, a = as_tensor(s), as_tensor(a)
        _check_action(a)
        z = torch.atanh(a)
        if self.bypass:
            return self.actor.pre_squash_log_prob(s, torch.zeros((*s.shape[:-1], self.past_dim), dtype=DTYPE), z)
        return self._log_prob_do(s, z, K, generator, anchors, pseudo_pasts)

    def causal_entropy_estimate(
        self,
        s,
        M: int,
        generator: typing.Optional[torch.Generator] = None,
        anchors: typing.Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        """Monte-Carlo estimate of ``H(a | do(s))`` from ``M`` fresh interventional samples."""
        if M < 1:
            raise ParameterError(f"M must be at least 1, got {M}.")
        s = as_tensor(s)
        repeated = s.unsqueeze(0).expand(M, *s.shape)
        return -self.sample_interventional(repeated, generator, anchors).log_prob_do.mean(dim=0)

    @torch.no_grad()
    def act_deterministic(self, s) -> torch.Tensor:
        """Mean action ``tanh(actor_mean(s, reconstructor_mean(s)))`` used for evaluation."""
        s = as_tensor(s)
        if self.bypass:
            pseudoPast = torch.zeros((*s.shape[:-1], self.past_dim), dtype=DTYPE)
        else:
            pseudoPast = self.reconstructor.mean_past(s)
        return torch.tanh(self.actor.head(s, pseudoPast).mean)


def reconstructor_nll_loss(phi: BackdoorReconstructor, batch: "TransitionBatch") -> torch.Tensor:
    """Mean negative log-density of the true past under ``p_phi(. | s_t)``.

    Records that start an episode have no past and are left out.
    """
    mask = ~batch.first_step
    if not bool(mask.any()):
        raise ReplayError("The batch holds no record with a previous step.")
    logQ = phi.log_density(batch.s[mask], batch.s_prev[mask], batch.a_prev[mask])
    return -logQ.mean()


class TabularInterventionalPolicy(object):
    """Discrete counterpart of :class:`DoSACPolicy` over finite states and actions.

    The pseudo-past ``z = (s_{t-1}, a_{t-1})`` is indexed as ``s_{t-1} * n_actions + a_{t-1}``.
    """

    def __init__(
        self,
        p_past_given_anchor: np.ndarray,
        p_action: np.ndarray,
        anchor_distribution: typing.Optional[np.ndarray] = None,
        anchor: PseudoPastAnchor = PseudoPastAnchor.Current,
    ):
        """Create a new tabular policy.

        :param p_past_given_anchor: Reconstructor table ``p(z | anchor)``, shape ``(S, Z)``.
        :param p_action: Actor table ``p(a | s, z)``, shape ``(S, Z, A)``.
        :param anchor_distribution: Distribution of replay states, required for marginal anchoring.
        :param anchor: Which state the reconstructor is conditioned on.
        """
        self.p_past_given_anchor = np.asarray(p_past_given_anchor, dtype=float)
        self.p_action = np.asarray(p_action, dtype=float)
        self.anchor = PseudoPastAnchor.from_name(anchor)
        if self.anchor == PseudoPastAnchor.Marginal and anchor_distribution is None:
            raise ParameterError("Marginal anchoring needs the distribution of replay states.")
        self.anchor_distribution = None if anchor_distribution is None else np.asarray(anchor_distribution, float)

    @classmethod
    def from_oracle(
        cls, spec: "TabularSCMSpec", t: int, anchor: PseudoPastAnchor = PseudoPastAnchor.Marginal
    ) -> "TabularInterventionalPolicy":
        """Install the exact conditionals of a tabular model at step ``t``."""
        from .tabular_scm import backdoor_conditionals

        tables = backdoor_conditionals(spec, t)
        S = spec.n_states
        return cls(
            p_past_given_anchor=tables.p_past_given_state.reshape(S, -1),
            p_action=tables.p_action_given_state_past.reshape(S, -1, spec.n_actions),
            anchor_distribution=tables.p_state,
            anchor=anchor,
        )

    @property
    def n_actions(self) -> int:
        return self.p_action.shape[-1]

    def _draw_past(self, s: int, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.anchor == PseudoPastAnchor.Marginal:
            anchors = rng.choice(len(self.anchor_distribution), size=n, p=self.anchor_distribution)
        else:
            anchors = np.full(n, s)
        cumulative = np.cumsum(self.p_past_given_anchor[anchors], axis=1)
        return np.minimum((cumulative < rng.random((n, 1))).sum(axis=1), cumulative.shape[1] - 1)

    def action_distribution(self, s: int) -> np.ndarray:
        """Exact action distribution of two-stage sampling at state ``s``."""
        if self.anchor == PseudoPastAnchor.Marginal:
            pPast = self.anchor_distribution @ self.p_past_given_anchor
        else:
            pPast = self.p_past_given_anchor[s]
        return pPast @ self.p_action[s]

    def sample_interventional(self, s: int, n: int, rng: np.random.Generator) -> typing.Tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` actions; returns ``(actions, pseudo_pasts)``."""
        pasts = self._draw_past(s, n, rng)
        cumulative = np.cumsum(self.p_action[s, pasts], axis=1)
        actions = np.minimum((cumulative < rng.random((n, 1))).sum(axis=1), self.n_actions - 1)
        return actions, pasts

    def interventional_log_prob(self, s: int, a: int, K: int, rng: np.random.Generator) -> float:
        """Log-mean-exp of ``log p(a | s, z_k)`` over ``K`` pseudo-past draws."""
        if K < 1:
            raise ParameterError(f"K must be at least 1, got {K}.")
        with np.errstate(divide="ignore"):
            terms = np.log(self.p_action[s, self._draw_past(s, K, rng), a])
        return float(logsumexp(terms) - math.log(K))

    def causal_entropy_estimate(self, s: int, M: int, rng: np.random.Generator, K: int = 1) -> float:
        """Monte-Carlo estimate of the causal entropy at ``s``."""
        if M < 1:
            raise ParameterError(f"M must be at least 1, got {M}.")
        actions, pasts = self.sample_interventional(s, M, rng)
        if K == 1:
            return float(-np.log(self.p_action[s, pasts, actions]).mean())
        return -float(np.mean([self.interventional_log_prob(s, a, K, rng) for a in actions]))
