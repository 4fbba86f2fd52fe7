"""Long-running end-to-end checks of the training protocol, enabled with ``pytest --runslow``."""

import dataclasses

import numpy as np
import pandas as pd
import pytest
import torch

from dosac.agent import Trainer
from dosac.config import expand_preset
from dosac.constants import DEFAULT_SIGMA_GRID, OUTPUT_ROOT_ENV, Algorithm
from dosac.harness import random_policy_baseline, run_experiment, sweep_sigma, trend_test


@pytest.fixture(scope="module")
def desk_runs(tmp_path_factory):
    """The desk preset trained for both algorithms, every seed."""
    root = tmp_path_factory.mktemp("desk")
    config = dataclasses.replace(expand_preset("desk"), output_dir=str(root))
    with pytest.MonkeyPatch.context() as patch:
        patch.delenv(OUTPUT_ROOT_ENV, raising=False)
        return {
            algorithm: run_experiment(dataclasses.replace(config, algorithm=algorithm), jobs=5)
            for algorithm in (Algorithm.DoSAC, Algorithm.SAC)
        }


@pytest.mark.slow
def test_bypassed_trainer_reproduces_sac(small_config):
    config = dataclasses.replace(small_config, total_steps=2000, warmup_steps=200)
    sac = Trainer(dataclasses.replace(config, algorithm=Algorithm.SAC)).run()
    bypassed = Trainer(dataclasses.replace(config, algorithm=Algorithm.DoSAC))
    bypassed.agent.policy.bypass = True
    bypassed.run()
    pd.testing.assert_frame_equal(sac.metric_frame(), bypassed.metric_frame())
    for a, b in zip(sac.agent.policy.actor.parameters(), bypassed.agent.policy.actor.parameters()):
        assert torch.equal(a, b)
    for a, b in zip(sac.agent.critic.parameters(), bypassed.agent.critic.parameters()):
        assert torch.equal(a, b)


@pytest.mark.slow
def test_parallel_seeds_match_sequential(small_config, tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    config = dataclasses.replace(small_config, seeds=[0, 1])
    sequential = run_experiment(dataclasses.replace(config, output_dir=str(tmp_path / "one")))
    parallel = run_experiment(dataclasses.replace(config, output_dir=str(tmp_path / "two")), jobs=2)
    for name in ("finals.csv", "aggregation.csv", "seed_0/metrics.csv", "seed_1/metrics.csv"):
        assert (sequential / name).read_bytes() == (parallel / name).read_bytes()


@pytest.mark.slow
def test_dosac_matches_or_beats_sac_clean(desk_runs):
    finals = {algorithm: pd.read_csv(runDir / "finals.csv") for algorithm, runDir in desk_runs.items()}
    clean = {
        algorithm: frame[frame["eval_regime"] == "clean"].set_index("seed")["mean"]
        for algorithm, frame in finals.items()
    }
    wins = (clean[Algorithm.DoSAC] >= clean[Algorithm.SAC]).sum()
    assert wins >= 4

    env = expand_preset("desk").env
    baseline = random_policy_baseline(env, 50, seed=0)
    for runDir in desk_runs.values():
        row = pd.read_csv(runDir / "aggregation.csv").set_index("eval_regime").loc["clean"]
        assert row["mean"] - baseline.mean > 5.0 * max(row["stderr"], baseline.stderr)


@pytest.mark.slow
def test_returns_do_not_rise_with_confounder_strength(desk_runs):
    checkpoints = {
        algorithm.label: runDir / "seed_0" / "checkpoints" / "final.pt" for algorithm, runDir in desk_runs.items()
    }
    table = sweep_sigma(checkpoints, expand_preset("desk").env, DEFAULT_SIGMA_GRID, 20, seed=0)
    assert np.isfinite(table["mean"]).all()
    for trend in trend_test(table).values():
        assert trend.non_increasing
