import numpy as np
import pytest
import torch
from scipy import integrate
from scipy.stats import entropy, norm

import dosac.policy as policy_module
from dosac.agent import ExtendedTransition, TransitionBatch
from dosac.constants import LOG_STD_MAX, LOG_STD_MIN
from dosac.errors import NumericError, ParameterError, ReplayError, ShapeError
from dosac.function_approx import DTYPE, finite_diff_check, gaussian_entropy, make_adam, minimize_step
from dosac.policy import (
    DoSACPolicy,
    TabularInterventionalPolicy,
    reconstruct_past,
    reconstructor_nll_loss,
)
from dosac.tabular_scm import (
    backdoor_adjusted_policy,
    confounded_example,
    interventional_policy_exact,
    observational_policy,
    random_spec,
)
from dosac.utils import total_variation


def make_policy(seed=0, **kwargs) -> DoSACPolicy:
    kwargs.setdefault("hidden_sizes", (16, 16))
    return DoSACPolicy(3, 2, generator=torch.Generator().manual_seed(seed), **kwargs)


def make_batch(n=32, first_steps=(), seed=0) -> TransitionBatch:
    return TransitionBatch.from_records(make_records(n, first_steps, seed))


def make_records(n=32, first_steps=(), seed=0) -> list:
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        s_prev = rng.normal(size=3)
        a_prev = np.tanh(rng.normal(size=2))
        records.append(
            ExtendedTransition(
                s_prev=s_prev,
                a_prev=a_prev,
                s=0.5 * s_prev + 0.1 * rng.normal(size=3),
                a=np.tanh(rng.normal(size=2)),
                r=float(rng.normal()),
                s_next=rng.normal(size=3),
                done=False,
                first_step=i in first_steps,
            )
        )
    return records


def test_sample_shapes_and_bounds(generator):
    policy = make_policy()
    sample = policy.sample_interventional(torch.zeros(5, 3, dtype=DTYPE), generator)
    assert sample.action.shape == (5, 2)
    assert sample.pseudo_past.shape == (5, 5)
    assert sample.log_prob_do.shape == (5,)
    assert (sample.action.abs() < 1.0).all()
    assert (sample.pseudo_past[:, 3:].abs() < 1.0).all()
    assert torch.equal(sample.log_prob_do, sample.actor_log_prob)


def test_sampling_is_seeded():
    policy = make_policy()
    s = torch.ones(4, 3, dtype=DTYPE)
    first = policy.sample_interventional(s, torch.Generator().manual_seed(3))
    second = policy.sample_interventional(s, torch.Generator().manual_seed(3))
    assert torch.equal(first.action, second.action)
    assert torch.equal(first.pseudo_past, second.pseudo_past)


def test_frozen_noise_reproduces_sample(generator):
    policy = make_policy()
    s = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    noise = (torch.randn(4, 5, generator=generator, dtype=DTYPE), torch.randn(4, 2, generator=generator, dtype=DTYPE))
    first = policy.sample_interventional(s, noise=noise)
    second = policy.sample_interventional(s, noise=noise)
    assert torch.equal(first.action, second.action)
    pseudoPast, _ = reconstruct_past(policy.reconstructor, s, noise[0])
    assert torch.equal(first.pseudo_past, pseudoPast.detach())


def test_bypass_uses_zero_past_and_draws_no_reconstructor_noise():
    policy = make_policy(bypass=True)
    s = torch.ones(3, 3, dtype=DTYPE)
    sample = policy.sample_interventional(s, torch.Generator().manual_seed(8))
    assert torch.equal(sample.pseudo_past, torch.zeros(3, 5, dtype=DTYPE))
    noise = torch.randn(3, 2, generator=torch.Generator().manual_seed(8), dtype=DTYPE)
    action, logProb, _ = policy.actor.sample(s, torch.zeros(3, 5, dtype=DTYPE), noise)
    assert torch.equal(sample.action, action)
    assert torch.equal(sample.log_prob_do, logProb)


def test_log_prob_of_own_sample(generator):
    policy = make_policy()
    s = torch.randn(6, 3, generator=generator, dtype=DTYPE)
    sample = policy.sample_interventional(s, generator)
    estimate = policy.interventional_log_prob(s, sample.action, K=1, pseudo_pasts=sample.pseudo_past.unsqueeze(0))
    assert torch.allclose(estimate, sample.actor_log_prob, atol=1e-6)
    assert torch.allclose(policy.actor_log_prob(s, sample.pseudo_past, sample.action), sample.actor_log_prob, atol=1e-6)


def test_log_mean_exp_over_pseudo_pasts(generator):
    policy = make_policy()
    s = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    a = torch.tanh(torch.randn(4, 2, generator=generator, dtype=DTYPE))
    pasts = torch.stack([policy.draw_pseudo_past(s, generator) for _ in range(5)])
    terms = torch.stack([policy.actor_log_prob(s, pasts[k], a) for k in range(5)])
    expected = torch.log(torch.exp(terms).mean(dim=0))
    assert torch.allclose(policy.interventional_log_prob(s, a, K=5, pseudo_pasts=pasts), expected, atol=1e-10)


def test_interventional_density_is_normalized():
    policy = DoSACPolicy(2, 1, hidden_sizes=(8,), generator=torch.Generator().manual_seed(4))
    s = torch.tensor([0.3, -0.2], dtype=DTYPE)
    pasts = torch.stack([policy.draw_pseudo_past(s, torch.Generator().manual_seed(k)) for k in range(4)])

    def density(a):
        action = torch.tensor([a], dtype=DTYPE)
        return float(torch.exp(policy.interventional_log_prob(s, action, K=4, pseudo_pasts=pasts)))

    mass, _ = integrate.quad(density, -1.0 + 1e-9, 1.0 - 1e-9, limit=200)
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_k_sample_estimate_in_sampling(generator):
    policy = make_policy(n_log_prob_samples=8)
    sample = policy.sample_interventional(torch.zeros(5, 3, dtype=DTYPE), generator)
    assert sample.log_prob_do.shape == (5,)
    assert torch.isfinite(sample.log_prob_do).all()
    assert not torch.equal(sample.log_prob_do, sample.actor_log_prob)


def test_parameter_checks():
    with pytest.raises(ParameterError):
        make_policy(n_log_prob_samples=0)
    policy = make_policy()
    s = torch.zeros(1, 3, dtype=DTYPE)
    with pytest.raises(ParameterError):
        policy.interventional_log_prob(s, torch.zeros(1, 2, dtype=DTYPE), K=0)
    with pytest.raises(NumericError):
        policy.interventional_log_prob(s, torch.tensor([[1.0, 0.0]], dtype=DTYPE), K=1)
    with pytest.raises(ParameterError):
        policy.causal_entropy_estimate(s, 0)


def test_marginal_anchor_conditions_reconstructor_on_replay_states(generator):
    s = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    anchors = torch.randn(1, 3, generator=generator, dtype=DTYPE)
    noise = torch.randn(4, 5, generator=generator, dtype=DTYPE)
    marginal = make_policy(anchor="marginal")
    expected, _ = reconstruct_past(marginal.reconstructor, anchors.repeat(4, 1), noise)
    assert torch.equal(marginal.draw_pseudo_past(s, anchors=anchors, noise=noise), expected.detach())
    with pytest.raises(ShapeError):
        marginal.draw_pseudo_past(s, anchors=torch.zeros(4, 2, dtype=DTYPE), noise=noise)
    current = make_policy()
    expected, _ = reconstruct_past(current.reconstructor, s, noise)
    assert torch.equal(current.draw_pseudo_past(s, anchors=anchors, noise=noise), expected.detach())


def test_marginal_draws_mix_over_replay_anchors(generator, monkeypatch):
    used = []

    def recording(phi, s, noise):
        used.append(s.detach().clone())
        return reconstruct_past(phi, s, noise)

    monkeypatch.setattr(policy_module, "reconstruct_past", recording)
    policy = make_policy(anchor="marginal")
    s = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    a = torch.tanh(torch.randn(4, 2, generator=generator, dtype=DTYPE))
    pool = torch.arange(12, dtype=DTYPE).reshape(4, 3)
    policy.interventional_log_prob(s, a, K=16, generator=generator, anchors=pool)
    policy.causal_entropy_estimate(s, 16, generator, anchors=pool)
    assert len(used) == 2
    for anchors in used:
        assert anchors.shape == (16, 4, 3)
        rows = torch.div(anchors[..., 0], 3).long()
        assert torch.equal(anchors, pool[rows])
        assert all(rows[:, i].unique().numel() > 1 for i in range(4))


def test_single_replay_state_anchors_every_draw():
    policy = make_policy(anchor="marginal")
    s = torch.zeros(1, 3, dtype=DTYPE)
    pool = torch.ones(1, 3, dtype=DTYPE)
    noise = torch.zeros(6, 1, 5, dtype=DTYPE)
    pasts = policy.draw_pseudo_past(s.expand(6, 1, 3), anchors=pool, noise=noise)
    assert torch.allclose(pasts, policy.reconstructor.mean_past(pool).detach().expand(6, 1, 5), atol=1e-12)


def test_actor_gradients_match_finite_differences(generator):
    policy = make_policy()
    s = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    noise = (torch.randn(4, 5, generator=generator, dtype=DTYPE), torch.randn(4, 2, generator=generator, dtype=DTYPE))

    def loss():
        sample = policy.sample_interventional(s, noise=noise)
        return (0.2 * sample.log_prob_do - sample.action.sum(dim=-1)).mean()

    assert finite_diff_check(loss, list(policy.actor.parameters()), epsilon=1e-5) < 1e-4


def test_joint_training_gradients_reach_reconstructor(generator):
    policy = make_policy(joint_training=True)
    s = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    noise = (torch.randn(4, 5, generator=generator, dtype=DTYPE), torch.randn(4, 2, generator=generator, dtype=DTYPE))

    def loss():
        return policy.sample_interventional(s, noise=noise).action.pow(2).sum()

    assert finite_diff_check(loss, list(policy.parameters()), epsilon=1e-5) < 1e-4
    detached = make_policy()
    grads = torch.autograd.grad(
        detached.sample_interventional(s, noise=noise).action.pow(2).sum(),
        list(detached.reconstructor.parameters()),
        allow_unused=True,
    )
    assert all(grad is None for grad in grads)


def test_deterministic_action():
    policy = make_policy()
    s = torch.ones(2, 3, dtype=DTYPE)
    action = policy.act_deterministic(s)
    assert not action.requires_grad
    expected = torch.tanh(policy.actor.head(s, policy.reconstructor.mean_past(s)).mean)
    assert torch.equal(action, expected.detach())
    bypass = make_policy(bypass=True)
    expected = torch.tanh(bypass.actor.head(s, torch.zeros(2, 5, dtype=DTYPE)).mean)
    assert torch.equal(bypass.act_deterministic(s), expected.detach())


def test_causal_entropy_of_bypassed_policy():
    policy = DoSACPolicy(1, 1, hidden_sizes=(4,), bypass=True, generator=torch.Generator().manual_seed(2))
    s = torch.tensor([0.1], dtype=DTYPE)

    def integrand(a):
        logP = float(policy.interventional_log_prob(s, torch.tensor([a], dtype=DTYPE)))
        return -np.exp(logP) * logP

    exact, _ = integrate.quad(integrand, -1.0 + 1e-9, 1.0 - 1e-9, limit=200)
    estimate = policy.causal_entropy_estimate(s, 20000, torch.Generator().manual_seed(3))
    assert float(estimate) == pytest.approx(exact, abs=0.05)


def test_reconstructor_loss_skips_first_steps():
    policy = make_policy()
    batch = make_batch(first_steps=(0, 1, 2))
    mask = ~batch.first_step
    expected = -policy.reconstructor.log_density(batch.s[mask], batch.s_prev[mask], batch.a_prev[mask]).mean()
    assert torch.equal(reconstructor_nll_loss(policy.reconstructor, batch), expected)
    with pytest.raises(ReplayError):
        reconstructor_nll_loss(policy.reconstructor, make_batch(n=4, first_steps=range(4)))


def test_reconstructor_gradients_match_finite_differences():
    policy = make_policy()
    batch = make_batch(n=8, first_steps=(0,))

    def loss():
        return reconstructor_nll_loss(policy.reconstructor, batch)

    assert finite_diff_check(loss, list(policy.reconstructor.parameters()), epsilon=1e-5) < 1e-4


def test_reconstructor_fits_true_past():
    policy = make_policy()
    batch = make_batch(n=64)
    params = list(policy.reconstructor.parameters())
    opt = make_adam(params, lr=1e-2)
    before = float(reconstructor_nll_loss(policy.reconstructor, batch))
    for _ in range(200):
        minimize_step(opt, reconstructor_nll_loss(policy.reconstructor, batch), params)
    assert float(reconstructor_nll_loss(policy.reconstructor, batch)) < before - 0.5


def test_reconstructed_past_moments_and_density(generator):
    phi = make_policy().reconstructor
    anchor = torch.tensor([0.2, -0.4, 0.7], dtype=DTYPE)
    n = 100_000
    noise = torch.randn(n, 5, generator=generator, dtype=DTYPE)
    with torch.no_grad():
        pasts, logQ = reconstruct_past(phi, anchor.expand(n, 3), noise)
        mean, std = phi.head(anchor).mean.numpy(), phi.head(anchor).std.numpy()
        zeroPast, _ = reconstruct_past(phi, anchor, torch.zeros(5, dtype=DTYPE))
    assert torch.allclose(zeroPast, phi.mean_past(anchor).detach(), atol=1e-14)

    pasts = pasts.numpy()
    stderr = pasts.std(axis=0) / np.sqrt(n)
    assert (np.abs(pasts[:, :3].mean(axis=0) - mean[:3]) < 4.0 * stderr[:3]).all()
    for i in (3, 4):
        analytic, _ = integrate.quad(lambda x: np.tanh(mean[i] + std[i] * x) * norm.pdf(x), -12.0, 12.0)
        assert abs(pasts[:, i].mean() - analytic) < 4.0 * stderr[i]

    z = mean + std * noise[:10].numpy()
    expected = norm.logpdf(z, mean, std).sum(axis=1) - np.log(1.0 - np.tanh(z[:, 3:]) ** 2 + 1e-6).sum(axis=1)
    np.testing.assert_allclose(logQ[:10].numpy(), expected, rtol=0.0, atol=1e-10)


def test_action_marginal_is_mixture_over_pseudo_pasts(generator):
    policy = DoSACPolicy(2, 1, hidden_sizes=(8,), generator=torch.Generator().manual_seed(6))
    s = torch.tensor([0.5, -0.3], dtype=DTYPE)
    with torch.no_grad():
        actions = policy.sample_interventional(s.expand(100_000, 2), generator).action.numpy().ravel()
        pasts = policy.draw_pseudo_past(s.expand(4000, 2), generator)
        g = policy.actor.head(s.expand(4000, 2), pasts)
    edges = np.linspace(-1.0, 1.0, 21)
    empirical = np.histogram(actions, bins=edges)[0] / actions.size
    zEdges = np.concatenate([[-np.inf], np.arctanh(edges[1:-1]), [np.inf]])
    cdf = norm.cdf((zEdges[None, :] - g.mean.numpy()) / g.std.numpy())
    mixture = np.diff(cdf, axis=1).mean(axis=0)
    assert np.abs(empirical - mixture).sum() < 0.05


def test_point_mass_pseudo_past_makes_estimate_independent_of_k(generator):
    policy = make_policy()
    s = torch.randn(4, 3, generator=generator, dtype=DTYPE)
    a = torch.tanh(torch.randn(4, 2, generator=generator, dtype=DTYPE))
    past = policy.reconstructor.mean_past(s).detach()
    single = policy.actor_log_prob(s, past, a)
    for K in (1, 4, 64):
        estimate = policy.interventional_log_prob(s, a, K=K, pseudo_pasts=past.expand(K, 4, 5))
        assert torch.allclose(estimate, single, rtol=0.0, atol=1e-12)


def test_causal_entropy_orders_with_actor_spread():
    s = torch.randn(8, 3, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
    estimates = {}
    for logStd in (-20.0, 0.0):
        policy = make_policy()
        with torch.no_grad():
            last = policy.actor.net.layers[-1]
            last.weight.zero_()
            last.bias.copy_(torch.tensor([0.0, 0.0, logStd, logStd], dtype=DTYPE))
            gaussian = gaussian_entropy(policy.actor.head(s, torch.zeros(8, 5, dtype=DTYPE)))
            estimates[logStd] = policy.causal_entropy_estimate(s, 4000, torch.Generator().manual_seed(2))
        # squashing only removes entropy
        assert (estimates[logStd] < gaussian + 0.1).all()
    floor = 2 * (LOG_STD_MIN + 0.5 * np.log(2.0 * np.pi * np.e))
    assert torch.allclose(estimates[-20.0], torch.full((8,), floor, dtype=DTYPE), atol=0.1)
    assert (estimates[-20.0] < estimates[0.0]).all()


def test_reconstructor_loss_is_permutation_invariant():
    policy = make_policy()
    records = make_records(n=16, first_steps=(0, 5))
    order = np.random.default_rng(3).permutation(16)
    loss = reconstructor_nll_loss(policy.reconstructor, TransitionBatch.from_records(records))
    permuted = reconstructor_nll_loss(policy.reconstructor, TransitionBatch.from_records([records[i] for i in order]))
    assert float(permuted) == pytest.approx(float(loss), abs=1e-12)


def test_reconstructor_loss_at_the_mean_is_the_normalizer():
    policy = make_policy()
    mean = np.array([0.4, -1.2, 0.3, 0.6, -0.8])
    with torch.no_grad():
        last = policy.reconstructor.net.layers[-1]
        last.weight.zero_()
        last.bias.copy_(torch.as_tensor(np.concatenate([mean, np.full(5, 10.0)]), dtype=DTYPE))
    records = make_records(n=8)
    for record in records:
        record.s_prev, record.a_prev = mean[:3], np.tanh(mean[3:])
    loss = reconstructor_nll_loss(policy.reconstructor, TransitionBatch.from_records(records))
    expected = 5 * (LOG_STD_MAX + 0.5 * np.log(2.0 * np.pi)) + np.log(1.0 - np.tanh(mean[3:]) ** 2 + 1e-6).sum()
    assert float(loss) == pytest.approx(expected, abs=1e-9)


def test_tabular_marginal_anchor_is_backdoor_adjustment(spec_corpus):
    for spec in spec_corpus[:30]:
        tabular = TabularInterventionalPolicy.from_oracle(spec, 1)
        for s in range(spec.n_states):
            assert total_variation(tabular.action_distribution(s), backdoor_adjusted_policy(spec, 1, s)) < 1e-10


def test_tabular_current_anchor_is_observational():
    spec = confounded_example()
    tabular = TabularInterventionalPolicy.from_oracle(spec, 1, anchor="current")
    for s in range(2):
        assert total_variation(tabular.action_distribution(s), observational_policy(spec, 1, s)) < 1e-10


def test_tabular_two_stage_sampling_matches_intervention():
    rng = np.random.default_rng(0)
    for spec in [confounded_example(), random_spec(3, 3, 2, np.random.default_rng(17))]:
        tabular = TabularInterventionalPolicy.from_oracle(spec, 1)
        for s in range(spec.n_states):
            actions, pasts = tabular.sample_interventional(s, 200_000, rng)
            assert pasts.max() < spec.n_states * spec.n_actions
            frequencies = np.bincount(actions, minlength=spec.n_actions) / actions.size
            assert total_variation(frequencies, interventional_policy_exact(spec, 1, s)) < 0.02


def test_tabular_log_prob_estimate_is_consistent():
    spec = random_spec(2, 3, 2, np.random.default_rng(4))
    tabular = TabularInterventionalPolicy.from_oracle(spec, 1)
    rng = np.random.default_rng(1)
    exact = np.log(tabular.action_distribution(0))
    for a in range(3):
        assert tabular.interventional_log_prob(0, a, 50_000, rng) == pytest.approx(exact[a], abs=0.05)


def test_tabular_causal_entropy():
    spec = confounded_example()
    tabular = TabularInterventionalPolicy.from_oracle(spec, 1)
    rng = np.random.default_rng(5)
    exact = entropy(tabular.action_distribution(0))
    assert tabular.causal_entropy_estimate(0, 2000, rng, K=500) == pytest.approx(exact, abs=0.05)
    assert tabular.causal_entropy_estimate(0, 2000, rng) <= exact + 0.05
    with pytest.raises(ParameterError):
        tabular.interventional_log_prob(0, 0, 0, rng)


def test_tabular_marginal_anchor_needs_state_distribution():
    with pytest.raises(ParameterError):
        TabularInterventionalPolicy(np.ones((2, 4)) / 4, np.ones((2, 4, 2)) / 2, anchor="marginal")
