import os
import zlib

import numpy as np
import torch


def DataFile(filename):
    """Return the path to a data file shipped with the package.

    :param filename: The filename of the data file, relative to the package directory.
    :return: The path to the data file.
    """
    return os.path.join(os.path.dirname(__file__), filename)


def stream_seed_sequence(seed: int, name: str) -> np.random.SeedSequence:
    """Seed sequence of the random stream ``name`` of a run.

    Streams with different names are statistically independent, and adding or removing
    consumers of one stream never shifts the numbers another stream produces.

    :param seed: The run seed.
    :param name: The stream name, e.g. ``"env"`` or ``"replay"``.
    :return: The seed sequence.
    """
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(name.encode("utf-8")),))


def numpy_stream(seed: int, name: str) -> np.random.Generator:
    """Return a numpy generator for the named stream of a run.

    >>> a = numpy_stream(0, "env").integers(1000, size=3)
    >>> b = numpy_stream(0, "env").integers(1000, size=3)
    >>> bool((a == b).all())
    True
    """
    return np.random.Generator(np.random.PCG64(stream_seed_sequence(seed, name)))


def torch_stream(seed: int, name: str) -> torch.Generator:
    """Return a CPU torch generator for the named stream of a run."""
    generator = torch.Generator()
    generator.manual_seed(int(stream_seed_sequence(seed, name).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))
    return generator


def standard_error(values) -> float:
    """Standard error of the mean (0 for a single value).

    >>> standard_error([1.0])
    0.0
    """
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        return 0.0
    return float(values.std(ddof=1) / np.sqrt(values.size))


def total_variation(p, q) -> float:
    """Total variation distance between two discrete distributions.

    >>> total_variation([0.5, 0.5], [1.0, 0.0])
    0.5
    """
    return float(0.5 * np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())
