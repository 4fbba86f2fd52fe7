"""Soft Q-functions, the causal soft Bellman target and the critic regression loss.

The state value never gets a network of its own; it enters only through the target as
``V(s') = E[min Q(s', a') - alpha * log pi(a' | do(s'))]`` with ``a'`` drawn by the interventional policy.
"""

from __future__ import annotations

import copy
import logging
import typing

import torch
from torch import nn

from .constants import Activation
from .errors import ParameterError, ReplayError, ShapeError
from .function_approx import Mlp, as_tensor, mlp_forward

if typing.TYPE_CHECKING:
    from .agent import TransitionBatch  # noqa: F401
    from .policy import DoSACPolicy  # noqa: F401

log = logging.getLogger(__name__)


class TwinCritic(nn.Module):
    """Two independent Q networks over ``[s, a]`` with target copies.

    With ``twin = False`` only the first network exists and every minimum over the twins is the
    single network's value.
    """

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        hidden_sizes: typing.Sequence[int] = (64, 64),
        activation: Activation = Activation.Tanh,
        generator: typing.Optional[torch.Generator] = None,
        twin: bool = True,
    ):
        super().__init__()
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.twin = twin
        sizes = [state_dim + action_dim, *hidden_sizes, 1]
        self.online = nn.ModuleList([Mlp(sizes, activation, generator) for _ in range(2 if twin else 1)])
        self.target = copy.deepcopy(self.online)
        for param in self.target.parameters():
            param.requires_grad_(False)

    def online_parameters(self) -> typing.List[torch.Tensor]:
        return list(self.online.parameters())

    def hard_update(self):
        """Copy the online networks into the targets."""
        polyak_update(self.target, self.online, 1.0)

    def _forward(self, nets: nn.ModuleList, s, a) -> typing.Tuple[torch.Tensor, torch.Tensor]:
        s, a = as_tensor(s), as_tensor(a)
        if s.shape[-1] != self.state_dim or a.shape[-1] != self.action_dim:
            raise ShapeError(
                f"Expected states of size {self.state_dim} and actions of size {self.action_dim}, "
                f"got {tuple(s.shape)} and {tuple(a.shape)}."
            )
        if s.shape[:-1] != a.shape[:-1]:
            raise ShapeError(f"State batch {tuple(s.shape[:-1])} differs from action batch {tuple(a.shape[:-1])}.")
        x = torch.cat([s, a], dim=-1)
        values = [mlp_forward(net, x).squeeze(-1) for net in nets]
        return (values[0], values[1]) if self.twin else (values[0], values[0])

    def target_min(self, s, a) -> torch.Tensor:
        q1, q2 = self._forward(self.target, s, a)
        return torch.minimum(q1, q2)


def q_forward(psi: TwinCritic, s, a) -> typing.Tuple[torch.Tensor, torch.Tensor]:
    """Online twin values ``(q1, q2)``; in single-critic mode both are the same tensor."""
    return psi._forward(psi.online, s, a)


def q_min(psi: TwinCritic, s, a) -> torch.Tensor:
    q1, q2 = q_forward(psi, s, a)
    return torch.minimum(q1, q2)


@torch.no_grad()
def soft_target(
    r,
    done,
    s_next,
    gamma: float,
    alpha: float,
    psi: TwinCritic,
    policy: "DoSACPolicy",
    generator: typing.Optional[torch.Generator] = None,
    anchors: typing.Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Soft Bellman target ``f(r, s', d)``.

    :param r: Rewards, shape ``(n,)``.
    :param done: Termination flags, shape ``(n,)``; terminal targets are exactly ``r``.
    :param s_next: Next states, shape ``(n, state_dim)``.
    :param gamma: Discount in ``[0, 1)``.
    :param alpha: Temperature, non-negative.
    :param psi: Critic whose target networks are evaluated.
    :param policy: Interventional policy drawing ``a'`` and its log-probability at ``s'``.
    :param generator: Source of the sampling noise.
    :param anchors: Pool of replay states for marginal anchoring.
    :return: The targets, shape ``(n,)``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"Discount {gamma} is outside of [0, 1).")
    if alpha < 0.0:
        raise ParameterError(f"Temperature {alpha} is negative.")
    r, s_next = as_tensor(r), as_tensor(s_next)
    done = torch.as_tensor(done, dtype=torch.bool)
    sample = policy.sample_interventional(s_next, generator, anchors)
    softValue = psi.target_min(s_next, sample.action) - alpha * sample.log_prob_do
    return torch.where(done, r, r + gamma * softValue)


def critic_loss(psi: TwinCritic, batch: "TransitionBatch", targets) -> torch.Tensor:
    """Mean over the batch of the summed squared residuals of both twins against shared targets."""
    targets = as_tensor(targets).detach()
    n = batch.s.shape[0]
    if n == 0:
        raise ReplayError("Cannot compute the critic loss of an empty batch.")
    if targets.shape != (n,):
        raise ShapeError(f"Got targets of shape {tuple(targets.shape)} for a batch of {n} records.")
    q1, q2 = q_forward(psi, batch.s, batch.a)
    residual = (q1 - targets).pow(2)
    if psi.twin:
        residual = residual + (q2 - targets).pow(2)
    return residual.mean()


@torch.no_grad()
def polyak_update(psi_targets: nn.Module, psi_online: nn.Module, tau: float) -> nn.Module:
    """In-place ``target <- (1 - tau) * target + tau * online``."""
    if not 0.0 < tau <= 1.0:
        raise ParameterError(f"Smoothing coefficient {tau} is outside of (0, 1].")
    targets, online = list(psi_targets.parameters()), list(psi_online.parameters())
    if len(targets) != len(online):
        raise ShapeError(f"Target holds {len(targets)} tensors, online holds {len(online)}.")
    for target, param in zip(targets, online):
        if target.shape != param.shape:
            raise ShapeError(f"Target shape {tuple(target.shape)} differs from online shape {tuple(param.shape)}.")
        target.mul_(1.0 - tau).add_(tau * param)
    return psi_targets


__all__ = [
    "TwinCritic",
    "q_forward",
    "q_min",
    "soft_target",
    "critic_loss",
    "polyak_update",
]
