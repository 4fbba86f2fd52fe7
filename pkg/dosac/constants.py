from enum import IntEnum


class DoSACEnum(IntEnum):
    """Base class of the enumerations that appear in configuration files by lower-case name."""

    @classmethod
    def from_name(cls, name):
        """Return the member with the given (case-insensitive) name.

        :param name: The name of the member, or a member itself.
        :return: The enumeration member.

        >>> Algorithm.from_name("sac")
        <Algorithm.SAC: 1>
        """
        if isinstance(name, cls):
            return name
        for member in cls:
            if member.name.lower() == str(name).lower():
                return member
        raise ValueError(f"{name!r} is not a valid {cls.__name__}, expected one of {[m.label for m in cls]}")

    @property
    def label(self) -> str:
        """Lower-case name used in configuration files and CSV tables."""
        return self.name.lower()


class Algorithm(DoSACEnum):
    """The learning algorithm of a run."""

    DoSAC = 0
    SAC = 1


DoSAC = Algorithm.DoSAC
SAC = Algorithm.SAC


class Activation(DoSACEnum):
    """Hidden-layer activation of a multilayer perceptron."""

    Tanh = 0
    ReLU = 1
    Identity = 2


Tanh = Activation.Tanh
ReLU = Activation.ReLU
Identity = Activation.Identity


class AlphaMode(DoSACEnum):
    """Whether the entropy temperature is fixed or learned toward a target entropy."""

    Fixed = 0
    Learned = 1


Fixed = AlphaMode.Fixed
Learned = AlphaMode.Learned


class PseudoPastAnchor(DoSACEnum):
    """The state the backdoor reconstructor is conditioned on when drawing a pseudo-past.

    ``Current`` conditions on the queried state itself, ``Marginal`` on a state drawn from
    the replay buffer, which makes the pseudo-past a draw from its marginal distribution.
    """

    Current = 0
    Marginal = 1


Current = PseudoPastAnchor.Current
Marginal = PseudoPastAnchor.Marginal


class StoredAction(DoSACEnum):
    """Which action is written into the replay buffer."""

    Nominal = 0
    Executed = 1


Nominal = StoredAction.Nominal
Executed = StoredAction.Executed


class Preset(DoSACEnum):
    """Named hyperparameter presets shipped with the package."""

    Desk = 0
    Faithful = 1


Desk = Preset.Desk
Faithful = Preset.Faithful


class EnvironmentId(DoSACEnum):
    """Native environments."""

    PointMass = 0
    Pendulum = 1


PointMass = EnvironmentId.PointMass
Pendulum = EnvironmentId.Pendulum


class ExitCode(IntEnum):
    """Process exit codes of the command-line interface."""

    Success = 0
    ConfigError = 2
    RuntimeFailure = 3


#: bounds of the log standard deviation of every Gaussian head
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

#: stabilizer inside the tanh Jacobian correction log(1 - tanh(z)^2 + eps)
TANH_EPSILON = 1e-6

#: maximal number of entries of an enumerated joint distribution
JOINT_CAPACITY = 10**7

#: environment variable overriding the output root directory
OUTPUT_ROOT_ENV = "DOSAC_OUTPUT_ROOT"

#: version written into checkpoint containers
CHECKPOINT_FORMAT_VERSION = 1

#: the confounder strengths of the sensitivity sweep
DEFAULT_SIGMA_GRID = (0.3, 0.6, 0.9, 1.2, 1.5, 1.8, 2.1, 2.4)

#: columns of the per-run metric log
METRIC_COLUMNS = (
    "step",
    "episode",
    "train_return",
    "critic_loss",
    "actor_loss",
    "recon_loss",
    "alpha",
    "eval_clean_return",
    "eval_conf_return",
)
