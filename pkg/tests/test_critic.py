import numpy as np
import pytest
import torch

from dosac.agent import TransitionBatch
from dosac.critic import (
    TwinCritic,
    critic_loss,
    polyak_update,
    q_forward,
    q_min,
    soft_target,
)
from dosac.errors import ParameterError, ReplayError, ShapeError
from dosac.function_approx import DTYPE, finite_diff_check
from dosac.policy import DoSACPolicy


def make_critic(twin=True, seed=0) -> TwinCritic:
    return TwinCritic(3, 2, (8, 8), generator=torch.Generator().manual_seed(seed), twin=twin)


def make_policy(seed=1) -> DoSACPolicy:
    return DoSACPolicy(3, 2, (8, 8), generator=torch.Generator().manual_seed(seed))


def constant_critic(values, twin=True) -> TwinCritic:
    critic = make_critic(twin)
    with torch.no_grad():
        for net, value in zip(critic.online, values):
            net.layers[-1].weight.zero_()
            net.layers[-1].bias.fill_(value)
    return critic


def make_batch(n=4, generator=None) -> TransitionBatch:
    def randn(*shape):
        return torch.randn(*shape, generator=generator, dtype=DTYPE)

    return TransitionBatch(
        s_prev=randn(n, 3),
        a_prev=torch.tanh(randn(n, 2)),
        s=randn(n, 3),
        a=torch.tanh(randn(n, 2)),
        r=randn(n),
        s_next=randn(n, 3),
        done=torch.zeros(n, dtype=torch.bool),
        first_step=torch.zeros(n, dtype=torch.bool),
        episode=torch.zeros(n, dtype=torch.int64),
    )


def test_targets_start_as_copies():
    critic = make_critic()
    for online, target in zip(critic.online.parameters(), critic.target.parameters()):
        assert torch.equal(online, target)
        assert not target.requires_grad
    assert len(critic.online_parameters()) == 2 * 6


def test_critic_loss_sums_both_twins():
    batch = make_batch(generator=torch.Generator().manual_seed(0))
    targets = torch.zeros(4, dtype=DTYPE)
    assert float(critic_loss(constant_critic([1.0, 2.0]), batch, targets)) == pytest.approx(5.0)
    assert float(critic_loss(constant_critic([1.0], twin=False), batch, targets)) == pytest.approx(1.0)


def test_single_critic_returns_one_value_twice():
    critic = make_critic(twin=False)
    s, a = torch.zeros(2, 3, dtype=DTYPE), torch.zeros(2, 2, dtype=DTYPE)
    q1, q2 = q_forward(critic, s, a)
    assert q1 is q2
    assert torch.equal(q_min(critic, s, a), q1)


def test_q_min_is_elementwise_minimum(generator):
    critic = make_critic()
    s, a = torch.randn(6, 3, generator=generator, dtype=DTYPE), torch.zeros(6, 2, dtype=DTYPE)
    q1, q2 = q_forward(critic, s, a)
    assert q1.shape == (6,)
    assert torch.equal(q_min(critic, s, a), torch.minimum(q1, q2))
    with pytest.raises(ShapeError):
        q_forward(critic, s, torch.zeros(6, 3, dtype=DTYPE))
    with pytest.raises(ShapeError):
        q_forward(critic, s, torch.zeros(5, 2, dtype=DTYPE))


def test_q_forward_matches_matrix_oracle(generator):
    critic = make_critic()
    s = torch.randn(5, 3, generator=generator, dtype=DTYPE)
    a = torch.tanh(torch.randn(5, 2, generator=generator, dtype=DTYPE))
    x = torch.cat([s, a], dim=-1).numpy()
    q1, q2 = q_forward(critic, s, a)
    for net, q in zip(critic.online, (q1, q2)):
        h = x
        for layer in net.layers[:-1]:
            h = np.tanh(h @ layer.weight.detach().numpy().T + layer.bias.detach().numpy())
        expected = (h @ net.layers[-1].weight.detach().numpy().T + net.layers[-1].bias.detach().numpy())[:, 0]
        np.testing.assert_allclose(q.detach().numpy(), expected, rtol=0.0, atol=1e-12)


def test_twin_networks_are_independent(generator):
    critic = make_critic()
    s, a = torch.randn(5, 3, generator=generator, dtype=DTYPE), torch.zeros(5, 2, dtype=DTYPE)
    q1, q2 = q_forward(critic, s, a)
    assert not torch.equal(q1, q2)
    grads = torch.autograd.grad(q1.sum(), list(critic.online[1].parameters()), allow_unused=True)
    assert all(grad is None for grad in grads)
    with torch.no_grad():
        for param in critic.online[0].parameters():
            param.add_(0.5)
    moved1, moved2 = q_forward(critic, s, a)
    assert torch.equal(moved2, q2)
    assert not torch.equal(moved1, q1)


def test_terminal_target_is_reward(generator):
    batch = make_batch(generator=generator)
    done = torch.ones(4, dtype=torch.bool)
    targets = soft_target(batch.r, done, batch.s_next, 0.99, 0.2, make_critic(), make_policy(), generator)
    assert torch.equal(targets, batch.r)
    noDiscount = soft_target(batch.r, ~done, batch.s_next, 0.0, 0.2, make_critic(), make_policy(), generator)
    assert torch.equal(noDiscount, batch.r)


def test_soft_target_formula():
    batch = make_batch(generator=torch.Generator().manual_seed(5))
    critic, policy = make_critic(), make_policy()
    done = torch.tensor([False, True, False, False])
    targets = soft_target(batch.r, done, batch.s_next, 0.9, 0.3, critic, policy, torch.Generator().manual_seed(6))
    sample = policy.sample_interventional(batch.s_next, torch.Generator().manual_seed(6))
    value = critic.target_min(batch.s_next, sample.action) - 0.3 * sample.log_prob_do
    expected = torch.where(done, batch.r, batch.r + 0.9 * value)
    assert torch.allclose(targets, expected, atol=1e-12)
    assert not targets.requires_grad


def test_soft_target_follows_the_smaller_twin():
    batch = make_batch(generator=torch.Generator().manual_seed(2))
    policy = make_policy()

    def targets(values):
        critic = constant_critic(values)
        critic.hard_update()
        generator = torch.Generator().manual_seed(4)
        return soft_target(batch.r, batch.done, batch.s_next, 0.9, 0.2, critic, policy, generator)

    assert torch.equal(targets([1.0, 3.0]), targets([1.0, 5.0]))
    assert torch.equal(targets([1.0, 3.0]), targets([3.0, 1.0]))
    assert (targets([0.0, 3.0]) < targets([1.0, 3.0])).all()
    assert torch.allclose(targets([1.0, 3.0]) - targets([0.0, 3.0]), torch.full((4,), 0.9, dtype=DTYPE), atol=1e-12)


def test_soft_target_stops_gradients(generator):
    batch = make_batch(generator=generator)
    critic, policy = make_critic(), make_policy()
    targets = soft_target(batch.r, batch.done, batch.s_next, 0.9, 0.2, critic, policy, generator)
    assert targets.grad_fn is None
    loss = critic_loss(critic, batch, targets)
    grads = torch.autograd.grad(loss, list(policy.parameters()), allow_unused=True)
    assert all(grad is None for grad in grads)


def test_soft_target_checks_arguments(generator):
    batch = make_batch(generator=generator)
    with pytest.raises(ParameterError):
        soft_target(batch.r, batch.done, batch.s_next, 1.0, 0.2, make_critic(), make_policy())
    with pytest.raises(ParameterError):
        soft_target(batch.r, batch.done, batch.s_next, 0.9, -0.1, make_critic(), make_policy())


def test_critic_loss_checks_batch(generator):
    critic = make_critic()
    with pytest.raises(ShapeError):
        critic_loss(critic, make_batch(generator=generator), torch.zeros(3, dtype=DTYPE))
    with pytest.raises(ReplayError):
        critic_loss(critic, make_batch(n=0, generator=generator), torch.zeros(0, dtype=DTYPE))


def test_critic_loss_gradients_match_finite_differences(generator):
    critic = make_critic()
    batch = make_batch(n=8, generator=generator)
    targets = torch.randn(8, generator=generator, dtype=DTYPE)
    error = finite_diff_check(lambda: critic_loss(critic, batch, targets), critic.online_parameters(), epsilon=1e-5)
    assert error < 1e-4


def test_polyak_update():
    target = torch.nn.Linear(1, 1, dtype=DTYPE)
    online = torch.nn.Linear(1, 1, dtype=DTYPE)
    with torch.no_grad():
        target.weight.fill_(1.0)
        target.bias.fill_(0.0)
        online.weight.fill_(3.0)
        online.bias.fill_(-4.0)
    polyak_update(target, online, 0.25)
    assert float(target.weight) == pytest.approx(1.5)
    assert float(target.bias) == pytest.approx(-1.0)
    polyak_update(target, online, 1.0)
    assert torch.equal(target.weight, online.weight)
    for tau in (0.0, 1.5):
        with pytest.raises(ParameterError):
            polyak_update(target, online, tau)
    with pytest.raises(ShapeError):
        polyak_update(target, torch.nn.Linear(2, 1, dtype=DTYPE), 0.5)


def test_repeated_polyak_updates_converge_geometrically():
    target, online = make_critic(seed=0).online, make_critic(seed=1).online
    gaps = [(t - o).detach().clone() for t, o in zip(target.parameters(), online.parameters())]
    for _ in range(20):
        polyak_update(target, online, 0.1)
    for t, o, gap in zip(target.parameters(), online.parameters(), gaps):
        assert torch.allclose(t - o, 0.9**20 * gap, rtol=1e-9, atol=1e-14)


def test_hard_update_follows_online_networks(generator):
    critic = make_critic()
    with torch.no_grad():
        for param in critic.online_parameters():
            param.add_(1.0)
    critic.hard_update()
    for online, target in zip(critic.online.parameters(), critic.target.parameters()):
        assert torch.equal(online, target)
