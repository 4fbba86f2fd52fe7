"""Experiment orchestration: multi-seed runs, clean and confounded evaluation, sigma sweeps and reports.

A run directory holds::

    manifest.yaml        expanded configuration, code version and creation time
    aggregation.csv      mean and standard error of the final evaluations across seeds
    finals.csv           final evaluation of every seed
    seed_<k>/metrics.csv
    seed_<k>/checkpoints/{initial,final}.pt

Only the manifest carries a timestamp, so repeated runs of one configuration produce identical CSV files.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import datetime
import logging
import typing
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from scipy import stats

from .agent import evaluate_policy, load_policy, train
from .config import RunConfig
from .envs import EnvConfig, make_env, rollout_returns
from .errors import ParameterError
from .utils import numpy_stream, standard_error
from .version import code_version

log = logging.getLogger(__name__)

EVAL_REGIMES = ("clean", "confounded")

AGGREGATION_COLUMNS = ["algorithm", "env", "training_regime", "eval_regime", "sigma", "n_seeds", "mean", "stderr"]


@dataclasses.dataclass
class EvalResult:
    """Mean undiscounted return and its standard error over evaluation episodes."""

    mean: float
    stderr: float
    n_episodes: int
    confounded: bool
    sigma: float

    @classmethod
    def from_returns(cls, returns, confounded: bool, sigma: float) -> "EvalResult":
        returns = np.asarray(returns, dtype=float)
        return cls(float(returns.mean()), standard_error(returns), int(returns.size), confounded, float(sigma))


def training_regime(config: RunConfig) -> str:
    return "confounded" if config.env.confounded else "clean"


def run_name(config: RunConfig) -> str:
    return f"{config.algorithm.label}_{config.env.env_id.label}_{training_regime(config)}"


def _train_seed(configData: dict, seed: int, seedDir: str) -> str:
    config = RunConfig.from_dict(configData)
    return str(train(config.for_seed(seed), seedDir, seed).run_dir)


def _eval_env(env_config: EnvConfig, confounded: bool) -> EnvConfig:
    return dataclasses.replace(env_config, confounded=confounded)


def evaluate(checkpoint, env_config: EnvConfig, episodes: int, confounded: bool, seed: int) -> EvalResult:
    """Evaluate the mean action of a checkpointed policy.

    :param checkpoint: Trainer checkpoint file.
    :param env_config: Environment; ``confounded = False`` forces ``u = 0``.
    :param episodes: Number of seeded episodes.
    :param confounded: Whether the confounder is active.
    :param seed: Evaluation seed.
    :return: Mean and standard error of the episode returns.
    """
    policy = load_policy(checkpoint)
    returns = evaluate_policy(policy, _eval_env(env_config, confounded), episodes, seed)
    return EvalResult.from_returns(returns, confounded, env_config.confounder.sigma if confounded else 0.0)


def random_policy_baseline(env_config: EnvConfig, episodes: int, seed: int, confounded: bool = False) -> EvalResult:
    """Monte-Carlo returns of uniformly random nominal actions."""
    env = make_env(_eval_env(env_config, confounded), seed)
    rng = numpy_stream(seed, "random_policy")
    shape = env.action_space.shape

    def act(observation):
        return rng.uniform(-1.0, 1.0, size=shape)

    returns = rollout_returns(env, act, episodes, seed)
    return EvalResult.from_returns(returns, confounded, env_config.confounder.sigma if confounded else 0.0)


def run_experiment(config: RunConfig, jobs: int = 1) -> Path:
    """Train every seed of ``config``, then evaluate the final checkpoints and aggregate.

    :param config: The validated configuration.
    :param jobs: Number of worker processes; seeds run in parallel when above 1.
    :return: The run directory.
    """
    config.validate()
    runDir = config.output_root() / run_name(config)
    runDir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": config.to_dict(),
        "code_version": code_version(),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    (runDir / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    log.info(f"Starting {run_name(config)} with seeds {config.seeds} in {runDir}")

    seedDirs = {seed: runDir / f"seed_{seed}" for seed in config.seeds}
    if jobs > 1 and len(config.seeds) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_train_seed, config.to_dict(), seed, str(d)) for seed, d in seedDirs.items()]
            for future in futures:
                future.result()
    else:
        for seed, seedDir in seedDirs.items():
            _train_seed(config.to_dict(), seed, str(seedDir))

    finals = []
    for seed, seedDir in seedDirs.items():
        checkpoint = seedDir / "checkpoints" / ("final.pt" if config.total_steps > 0 else "initial.pt")
        for regime in EVAL_REGIMES:
            result = evaluate(checkpoint, config.env, config.eval.episodes, regime == "confounded", seed)
            finals.append({"seed": seed, "eval_regime": regime, "sigma": result.sigma, "mean": result.mean})
    finalFrame = pd.DataFrame(finals, columns=["seed", "eval_regime", "sigma", "mean"])
    finalFrame.to_csv(runDir / "finals.csv", index=False)

    rows = []
    for regime in EVAL_REGIMES:
        values = finalFrame.loc[finalFrame["eval_regime"] == regime, "mean"].to_numpy()
        rows.append(
            {
                "algorithm": config.algorithm.label,
                "env": config.env.env_id.label,
                "training_regime": training_regime(config),
                "eval_regime": regime,
                "sigma": config.env.confounder.sigma if regime == "confounded" else 0.0,
                "n_seeds": len(values),
                "mean": float(values.mean()),
                "stderr": standard_error(values),
            }
        )
    pd.DataFrame(rows, columns=AGGREGATION_COLUMNS).to_csv(runDir / "aggregation.csv", index=False)
    log.info(f"Finished {run_name(config)}")
    return runDir


def sweep_sigma(
    checkpoints: typing.Mapping[str, typing.Union[str, Path]],
    env_config: EnvConfig,
    sigmas: typing.Sequence[float],
    episodes: int,
    seed: int = 0,
) -> pd.DataFrame:
    """Evaluate fixed checkpoints under evaluation-time confounders of increasing strength.

    :param checkpoints: Checkpoint per algorithm label.
    :param env_config: Base environment; only the confounder std is swept.
    :param sigmas: Non-negative confounder standard deviations.
    :param episodes: Evaluation episodes per point.
    :param seed: Evaluation seed, shared by every point.
    :return: Table with columns ``algorithm, sigma, mean, stderr, n_episodes``.
    """
    if len(sigmas) == 0:
        raise ParameterError("The sweep needs at least one confounder strength.")
    if any(sigma < 0.0 for sigma in sigmas):
        raise ParameterError(f"Confounder strengths must be non-negative, got {list(sigmas)}.")
    rows = []
    for algorithm, checkpoint in checkpoints.items():
        for sigma in sigmas:
            result = evaluate(checkpoint, env_config.with_sigma(sigma), episodes, True, seed)
            rows.append(
                {
                    "algorithm": algorithm,
                    "sigma": float(sigma),
                    "mean": result.mean,
                    "stderr": result.stderr,
                    "n_episodes": result.n_episodes,
                }
            )
    return pd.DataFrame(rows, columns=["algorithm", "sigma", "mean", "stderr", "n_episodes"])


@dataclasses.dataclass
class TrendResult:
    """Least-squares trend of mean return against confounder strength."""

    slope: float
    intercept: float
    #: one-sided p-value against an increasing trend
    p_increasing: float
    #: one-sided p-value against a decreasing trend
    p_decreasing: float
    level: float = 0.05

    @property
    def non_increasing(self) -> bool:
        """No significant increase at the test level."""
        return self.p_increasing >= self.level

    @property
    def decreasing(self) -> bool:
        return self.p_decreasing < self.level


def trend_test(sweep: pd.DataFrame, level: float = 0.05) -> typing.Dict[str, TrendResult]:
    """One-sided linear trend tests of ``mean`` on ``sigma``, per algorithm."""
    results = {}
    for algorithm, group in sweep.groupby("algorithm", sort=True):
        sigma, mean = group["sigma"].to_numpy(float), group["mean"].to_numpy(float)
        if np.unique(sigma).size < 3:
            raise ParameterError(f"The trend test needs at least three distinct strengths, got {np.unique(sigma)}.")
        if np.ptp(mean) == 0.0:
            results[algorithm] = TrendResult(0.0, float(mean[0]), 1.0, 1.0, level)
            continue
        greater = stats.linregress(sigma, mean, alternative="greater")
        less = stats.linregress(sigma, mean, alternative="less")
        results[algorithm] = TrendResult(
            float(greater.slope), float(greater.intercept), float(greater.pvalue), float(less.pvalue), level
        )
    return results


def _read_run(run_dir: Path) -> pd.DataFrame:
    for name in ("manifest.yaml", "aggregation.csv"):
        if not (run_dir / name).exists():
            raise FileNotFoundError(f"{name} is missing")
    frame = pd.read_csv(run_dir / "aggregation.csv")
    missing = set(AGGREGATION_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"aggregation.csv lacks the columns {sorted(missing)}")
    return frame


def emit_report(run_dirs: typing.Sequence, out_dir) -> Path:
    """Summarize run directories into ``summary.csv`` and an aligned ``summary.txt``.

    There is one table per pair of training and evaluation regime, with algorithms as rows and
    environments as columns. Incomplete run directories are skipped with a warning line, and when
    several runs report the same cell the first one is shown and the others are noted.

    :return: The path of the text summary.
    """
    frames, notes = [], []
    for runDir in map(Path, run_dirs):
        try:
            frames.append(_read_run(runDir))
        except (OSError, ValueError) as error:
            log.warning(f"Skipping {runDir}: {error}")
            notes.append(f"skipped {runDir}: {error}")
    outDir = Path(out_dir)
    outDir.mkdir(parents=True, exist_ok=True)

    columns = ["training_regime", "eval_regime", "algorithm", "env", "mean", "stderr", "n_seeds"]
    summary = pd.concat(frames, ignore_index=True)[columns] if frames else pd.DataFrame(columns=columns)
    summary.to_csv(outDir / "summary.csv", index=False)

    keys = ["training_regime", "eval_regime", "algorithm", "env"]
    for row in summary[summary.duplicated(keys)].drop_duplicates(keys).itertuples(index=False):
        label = f"{row.algorithm} on {row.env} (trained {row.training_regime}, evaluated {row.eval_regime})"
        log.warning(f"Several runs report {label}; the table shows the first one.")
        notes.append(f"duplicate {label}: the table shows the first run")

    blocks = []
    for (trained, evaluated), group in summary.groupby(["training_regime", "eval_regime"], sort=True):
        cells = group.assign(cell=[f"{m:.2f} ± {s:.2f}" for m, s in zip(group["mean"], group["stderr"])])
        table = cells.pivot_table(index="algorithm", columns="env", values="cell", aggfunc="first")
        blocks.append(f"trained {trained}, evaluated {evaluated}\n{table.to_string()}")
    blocks += notes
    textPath = outDir / "summary.txt"
    textPath.write_text("\n\n".join(blocks) + "\n")
    return textPath


__all__ = [
    "EvalResult",
    "TrendResult",
    "emit_report",
    "evaluate",
    "random_policy_baseline",
    "run_experiment",
    "run_name",
    "sweep_sigma",
    "trend_test",
]
