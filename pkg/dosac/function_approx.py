"""Multilayer perceptrons, tanh-squashed diagonal Gaussians, Adam steps and gradient checks.

All tensors are float64 CPU tensors so that finite-difference checks and bitwise reproducibility
hold; gradients come from torch's reverse mode.
"""

from __future__ import annotations

import bisect
import dataclasses
import logging
import math
import typing
from pathlib import Path

import torch
from torch import nn

from .constants import (
    CHECKPOINT_FORMAT_VERSION,
    LOG_STD_MAX,
    LOG_STD_MIN,
    TANH_EPSILON,
    Activation,
)
from .errors import (
    CheckpointError,
    DeterminismError,
    NumericError,
    ParameterError,
    ShapeError,
)

log = logging.getLogger(__name__)

DTYPE = torch.float64

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def as_tensor(x) -> torch.Tensor:
    """Convert arrays and scalars to a float64 tensor (tensors are returned unchanged if already float64)."""
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


class Mlp(nn.Module):
    """Fully connected network with a linear output layer."""

    def __init__(
        self,
        sizes: typing.Sequence[int],
        activation: Activation = Activation.Tanh,
        generator: typing.Optional[torch.Generator] = None,
    ):
        """Create a new network.

        :param sizes: Layer sizes, input first and output last.
        :param activation: Activation of the hidden layers.
        :param generator: Generator for the initial weights, drawn like :class:`torch.nn.Linear` does.
        """
        super().__init__()
        if len(sizes) < 2:
            raise ShapeError(f"A network needs at least an input and an output size, got {list(sizes)}.")
        self.sizes = [int(size) for size in sizes]
        self.activation = Activation.from_name(activation)
        self.layers = nn.ModuleList()
        for fanIn, fanOut in zip(self.sizes[:-1], self.sizes[1:]):
            layer = nn.Linear(fanIn, fanOut, dtype=DTYPE)
            bound = 1.0 / math.sqrt(fanIn)
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.uniform_(-bound, bound, generator=generator)
            self.layers.append(layer)

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def output_dim(self) -> int:
        return self.sizes[-1]

    def _activate(self, x: torch.Tensor) -> torch.Tensor:
        if self.activation == Activation.Tanh:
            return torch.tanh(x)
        if self.activation == Activation.ReLU:
            return torch.relu(x)
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for layer in self.layers[:-1]:
            x = self._activate(layer(x))
        return self.layers[-1](x)


def mlp_forward(params: Mlp, x) -> torch.Tensor:
    """Checked forward pass.

    :param params: The network.
    :param x: Input of shape ``(..., input_dim)``.
    :return: Output of shape ``(..., output_dim)``.
    """
    x = as_tensor(x)
    if x.shape[-1:] != (params.input_dim,):
        raise ShapeError(f"Input has trailing dimension {tuple(x.shape[-1:])}, expected {params.input_dim}.")
    if not torch.isfinite(x).all():
        raise NumericError("Network input contains non-finite values.")
    return params(x)


@dataclasses.dataclass
class DiagGaussian:
    """Diagonal Gaussian with a clamped log standard deviation."""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ShapeError(f"Mean shape {tuple(self.mean.shape)} differs from log_std {tuple(self.log_std.shape)}.")
        self.log_std = torch.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    @classmethod
    def from_head(cls, output: torch.Tensor) -> "DiagGaussian":
        """Split a network output ``[mean, log_std]`` along the last axis."""
        mean, log_std = torch.chunk(output, 2, dim=-1)
        return cls(mean, log_std)

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(self.log_std)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach(), self.log_std.detach())


def gaussian_log_prob(g: DiagGaussian, x) -> torch.Tensor:
    """Log density summed over the last axis.

    >>> g = DiagGaussian(torch.zeros(1, dtype=torch.float64), torch.zeros(1, dtype=torch.float64))
    >>> round(float(gaussian_log_prob(g, torch.zeros(1, dtype=torch.float64))), 7)
    -0.9189385
    """
    x = as_tensor(x)
    if x.shape[-1:] != g.mean.shape[-1:]:
        raise ShapeError(f"Point has trailing dimension {tuple(x.shape[-1:])}, expected {tuple(g.mean.shape[-1:])}.")
    z = (x - g.mean) / g.std
    return (-0.5 * z.pow(2) - g.log_std - _HALF_LOG_2PI).sum(dim=-1)


def gaussian_entropy(g: DiagGaussian) -> torch.Tensor:
    """Differential entropy of the (unsquashed) Gaussian."""
    return (g.log_std + 0.5 + _HALF_LOG_2PI).sum(dim=-1)


def tanh_log_det(z: torch.Tensor) -> torch.Tensor:
    """Log Jacobian ``sum log(1 - tanh(z)^2 + eps)`` of the squashing map."""
    return torch.log(1.0 - torch.tanh(z).pow(2) + TANH_EPSILON).sum(dim=-1)


def tanh_rsample(g: DiagGaussian, noise) -> typing.Tuple[torch.Tensor, torch.Tensor]:
    """Reparameterized squashed sample.

    :param g: The pre-squash Gaussian.
    :param noise: Standard normal noise of the same shape as the mean.
    :return: ``(action, log_prob)`` with ``action = tanh(mean + std * noise)``.
    """
    noise = as_tensor(noise)
    if noise.shape != g.mean.shape:
        raise ShapeError(f"Noise shape {tuple(noise.shape)} differs from the mean shape {tuple(g.mean.shape)}.")
    z = g.mean + g.std * noise
    return torch.tanh(z), gaussian_log_prob(g, z) - tanh_log_det(z)


def squashed_log_prob(g: DiagGaussian, action) -> torch.Tensor:
    """Log density of an action strictly inside the unit box under the squashed Gaussian."""
    action = as_tensor(action)
    if (action.abs() >= 1.0).any():
        raise NumericError("Squashed log-density diverges at the boundary of the action box.")
    z = torch.atanh(action)
    return gaussian_log_prob(g, z) - tanh_log_det(z)


def make_adam(params: typing.Iterable[torch.Tensor], lr: float) -> torch.optim.Adam:
    """The optimizer state used by :func:`adam_step`."""
    return torch.optim.Adam(list(params), lr=lr)


def adam_step(
    opt_state: torch.optim.Adam,
    params: typing.Sequence[torch.Tensor],
    grads: typing.Sequence[torch.Tensor],
    lr: typing.Optional[float] = None,
) -> typing.Tuple[torch.optim.Adam, typing.Sequence[torch.Tensor]]:
    """One bias-corrected Adam update of ``params`` with the given gradients.

    :param opt_state: Optimizer holding the first and second moments of ``params``.
    :param params: The parameters, updated in place.
    :param grads: One gradient per parameter.
    :param lr: Learning rate of this step, the optimizer's current rate if not given.
    :return: The optimizer and the parameters.
    """
    if len(params) != len(grads):
        raise ShapeError(f"Got {len(grads)} gradients for {len(params)} parameters.")
    for param, grad in zip(params, grads):
        if param.shape != grad.shape:
            raise ShapeError(f"Gradient shape {tuple(grad.shape)} differs from parameter shape {tuple(param.shape)}.")
        param.grad = grad.detach().clone()
    if lr is not None:
        for group in opt_state.param_groups:
            group["lr"] = lr
    opt_state.step()
    return opt_state, params


def minimize_step(opt_state: torch.optim.Adam, loss: torch.Tensor, params: typing.Sequence[torch.Tensor]):
    """Differentiate ``loss`` with respect to ``params`` and take an Adam step."""
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    adam_step(opt_state, list(params), grads)


def finite_diff_check(
    loss_fn: typing.Callable[[], torch.Tensor],
    params: typing.Sequence[torch.Tensor],
    epsilon: float = 1e-6,
    n_samples: int = 64,
    generator: typing.Optional[torch.Generator] = None,
) -> float:
    """Compare reverse-mode gradients with central differences.

    :param loss_fn: Deterministic closure returning a scalar loss of ``params``.
    :param params: Leaf tensors the loss depends on.
    :param epsilon: Finite-difference step in ``[1e-7, 1e-3]``.
    :param n_samples: Number of randomly chosen parameter entries to check.
    :param generator: Generator choosing the entries.
    :return: Max over the checked entries of ``|analytic - numeric| / (|analytic| + |numeric| + 1e-12)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ParameterError(f"Finite-difference step {epsilon} is outside of [1e-7, 1e-3].")
    params = list(params)
    loss = loss_fn()
    if float(loss_fn()) != float(loss):
        raise DeterminismError("The loss returned different values for identical parameters.")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]

    sizes = [p.numel() for p in params]
    offsets = [sum(sizes[:i]) for i in range(len(sizes))]
    total = sum(sizes)
    picks = torch.randperm(total, generator=generator)[: min(n_samples, total)]
    worst = 0.0
    with torch.no_grad():
        for flat in picks.tolist():
            index = bisect.bisect_right(offsets, flat) - 1
            param, entry = params[index].view(-1), flat - offsets[index]
            original = param[entry].item()
            param[entry] = original + epsilon
            plus = float(loss_fn())
            param[entry] = original - epsilon
            minus = float(loss_fn())
            param[entry] = original
            numeric = (plus - minus) / (2.0 * epsilon)
            analytic = float(grads[index].view(-1)[entry])
            worst = max(worst, abs(analytic - numeric) / (abs(analytic) + abs(numeric) + 1e-12))
    return worst


def save_checkpoint(path, kind: str, payload: dict):
    """Write a versioned checkpoint container.

    :param path: Target file.
    :param kind: What the payload holds, e.g. ``"agent"`` or ``"trainer"``.
    :param payload: Tensors, state dicts and plain values.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format_version": CHECKPOINT_FORMAT_VERSION, "kind": kind, "payload": payload}, path)


def load_checkpoint(path, kind: typing.Optional[str] = None) -> dict:
    """Read a container written by :func:`save_checkpoint` and return its payload."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint {path} does not exist.")
    try:
        container = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as error:
        raise CheckpointError(f"Checkpoint {path} is unreadable: {error}") from error
    version = container.get("format_version") if isinstance(container, dict) else None
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"Checkpoint {path} has format version {version}, expected {CHECKPOINT_FORMAT_VERSION}.")
    if kind is not None and container.get("kind") != kind:
        raise CheckpointError(f"Checkpoint {path} holds a {container.get('kind')!r}, expected {kind!r}.")
    return container["payload"]
