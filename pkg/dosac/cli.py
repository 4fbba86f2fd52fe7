"""Command-line interface: ``dosac train|eval|sweep|report|oracle-check``."""

import argparse
import logging
import sys
import typing
from pathlib import Path

from .config import RunConfig, read_yaml, resolve_config
from .constants import DEFAULT_SIGMA_GRID, ExitCode
from .errors import ConfigError
from .function_approx import load_checkpoint
from .harness import emit_report, evaluate, run_experiment, sweep_sigma, trend_test
from .logger import UncaughtHook, log, set_log_level
from .tabular_scm import run_oracle_corpus

#: command-line flag destinations and the nested configuration keys they set
FLAG_KEYS = {
    "algorithm": ("algorithm",),
    "env": ("env", "env_id"),
    "mu": ("env", "confounder", "mu"),
    "sigma": ("env", "confounder", "sigma"),
    "rho": ("env", "confounder", "rho"),
    "total_steps": ("total_steps",),
    "warmup_steps": ("warmup_steps",),
    "batch_size": ("batch_size",),
    "buffer_capacity": ("buffer_capacity",),
    "gamma": ("gamma",),
    "tau": ("tau",),
    "alpha": ("alpha",),
    "alpha_mode": ("alpha_mode",),
    "k": ("n_log_prob_samples",),
    "anchor": ("anchor",),
    "eval_interval": ("eval", "interval"),
    "eval_episodes": ("eval", "episodes"),
    "seeds": ("seeds",),
    "output_dir": ("output_dir",),
}


def flags_to_config(args: argparse.Namespace) -> dict:
    """Nested settings of the flags that were given.

    >>> flags_to_config(argparse.Namespace(sigma=1.0, total_steps=None, lr=None))
    {'env': {'confounder': {'sigma': 1.0}}}
    """
    settings: dict = {}
    for dest, keys in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = settings
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    if getattr(args, "lr", None) is not None:
        settings.update({name: args.lr for name in ("actor_lr", "critic_lr", "recon_lr", "alpha_lr")})
    switches = {
        "clean_training": ("env", "confounded", False),
        "store_executed_action": (None, "stored_action", "executed"),
        "single_critic": (None, "twin_critics", False),
        "joint_training": (None, "joint_training", True),
    }
    for dest, (section, key, value) in switches.items():
        if getattr(args, dest, False):
            (settings.setdefault(section, {}) if section else settings)[key] = value
    return settings


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--preset", default="desk", help="base preset: desk or faithful")
    parser.add_argument("--config", type=Path, help="YAML file overriding preset and flags")
    parser.add_argument("--algorithm", help="dosac or sac")
    parser.add_argument("--env", help="pointmass or pendulum")
    parser.add_argument("--mu", type=float, help="confounder mean")
    parser.add_argument("--sigma", type=float, help="confounder standard deviation")
    parser.add_argument("--rho", type=float, help="confounder autocorrelation")
    parser.add_argument("--total-steps", type=int)
    parser.add_argument("--warmup-steps", type=int)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--buffer-capacity", type=int)
    parser.add_argument("--gamma", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--lr", type=float, help="learning rate of every optimizer")
    parser.add_argument("--alpha", type=float, help="(initial) entropy temperature")
    parser.add_argument("--alpha-mode", help="fixed or learned")
    parser.add_argument("-k", type=int, help="pseudo-past draws of the log-probability estimate")
    parser.add_argument("--anchor", help="current or marginal")
    parser.add_argument("--eval-interval", type=int)
    parser.add_argument("--eval-episodes", type=int)
    parser.add_argument("--seeds", type=int, nargs="+")
    parser.add_argument("--output-dir")
    parser.add_argument("--clean-training", action="store_true", help="train without the confounder")
    parser.add_argument("--store-executed-action", action="store_true")
    parser.add_argument("--single-critic", action="store_true")
    parser.add_argument("--joint-training", action="store_true")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for the seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dosac", description="Backdoor-adjusted soft actor-critic experiments.")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    _add_run_flags(commands.add_parser("train", help="train every seed of a configuration"))

    evalParser = commands.add_parser("eval", help="evaluate a checkpoint")
    evalParser.add_argument("checkpoint", type=Path)
    evalParser.add_argument("--episodes", type=int, default=10)
    evalParser.add_argument("--sigma", type=float, help="confounder std, the training value if not given")
    evalParser.add_argument("--clean", action="store_true", help="force u = 0")
    evalParser.add_argument("--seed", type=int, default=0)

    sweepParser = commands.add_parser("sweep", help="evaluate final checkpoints across confounder strengths")
    sweepParser.add_argument("run_dirs", type=Path, nargs="+")
    sweepParser.add_argument("--sigmas", type=float, nargs="+", default=list(DEFAULT_SIGMA_GRID))
    sweepParser.add_argument("--episodes", type=int, default=10)
    sweepParser.add_argument("--seed", type=int, default=0)
    sweepParser.add_argument("--out", type=Path, default=Path("sweep.csv"))

    reportParser = commands.add_parser("report", help="summarize run directories")
    reportParser.add_argument("run_dirs", type=Path, nargs="+")
    reportParser.add_argument("--out-dir", type=Path, default=Path("report"))

    oracleParser = commands.add_parser("oracle-check", help="run the tabular property corpus")
    oracleParser.add_argument("--n-specs", type=int, default=100)
    oracleParser.add_argument("--seed", type=int, default=0)
    return parser


def _checkpoint_config(path) -> RunConfig:
    return RunConfig.from_dict(load_checkpoint(path, "trainer")["config"])


def _final_checkpoint(run_dir: Path) -> typing.Tuple[RunConfig, Path]:
    config = RunConfig.from_dict(read_yaml(run_dir / "manifest.yaml")["config"])
    checkpoint = run_dir / f"seed_{config.seeds[0]}" / "checkpoints" / "final.pt"
    if not checkpoint.exists():
        raise ConfigError(f"run directory {run_dir} has no final checkpoint")
    return config, checkpoint


def _train(args) -> int:
    config = resolve_config(args.preset, flags_to_config(args), args.config)
    print(run_experiment(config, args.jobs))
    return ExitCode.Success


def _eval(args) -> int:
    envConfig = _checkpoint_config(args.checkpoint).env
    if args.sigma is not None:
        envConfig = envConfig.with_sigma(args.sigma)
    result = evaluate(args.checkpoint, envConfig, args.episodes, not args.clean, args.seed)
    print(f"{result.mean:.4f} ± {result.stderr:.4f} over {result.n_episodes} episodes (sigma {result.sigma})")
    return ExitCode.Success


def _sweep(args) -> int:
    checkpoints, envConfig = {}, None
    for runDir in args.run_dirs:
        config, checkpoint = _final_checkpoint(runDir)
        checkpoints[config.algorithm.label] = checkpoint
        envConfig = envConfig or config.env
    table = sweep_sigma(checkpoints, envConfig, args.sigmas, args.episodes, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(args.out, index=False)
    if len(set(args.sigmas)) >= 3:
        for algorithm, trend in trend_test(table).items():
            print(f"{algorithm}: slope {trend.slope:.4f}, non-increasing {trend.non_increasing}")
    print(args.out)
    return ExitCode.Success


def _report(args) -> int:
    print(emit_report(args.run_dirs, args.out_dir))
    return ExitCode.Success


def _oracle_check(args) -> int:
    report = run_oracle_corpus(args.n_specs, args.seed)
    print(report)
    return ExitCode.Success if report.passed else ExitCode.RuntimeFailure


COMMANDS = {"train": _train, "eval": _eval, "sweep": _sweep, "report": _report, "oracle-check": _oracle_check}


def main(argv: typing.Optional[typing.Sequence[str]] = None) -> int:
    """Run the command line and return the process exit code."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        set_log_level(logging.DEBUG)
    elif args.quiet:
        set_log_level(logging.WARNING)
    hook = UncaughtHook(install=False)
    try:
        return int(COMMANDS[args.command](args))
    except ConfigError as error:
        log.error(str(error))
        return int(ExitCode.ConfigError)
    except Exception as error:
        hook.exception_hook(type(error), error, error.__traceback__)
        return int(ExitCode.RuntimeFailure)


if __name__ == "__main__":
    sys.exit(main())
