from .agent import AgentState, ReplayBuffer, Trainer, dosac_update, sac_update, train  # noqa: F401
from .config import RunConfig, expand_preset, resolve_config  # noqa: F401
from .constants import *  # noqa: F401, F403
from .critic import TwinCritic  # noqa: F401
from .envs import ConfoundedEnv, PendulumEnv, PointMassEnv, make_env  # noqa: F401
from .errors import *  # noqa: F401, F403
from .harness import emit_report, evaluate, run_experiment, sweep_sigma  # noqa: F401
from .logger import *  # noqa: F401, F403
from .policy import DoSACPolicy  # noqa: F401
from .tabular_scm import TabularSCMSpec  # noqa: F401
from .version import __version__  # noqa: F401
