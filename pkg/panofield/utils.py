"""
Utility functions for other submodules

"""

import os
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

mod_logger = logging.getLogger(__name__)

THREADS_ENV = "PANOFIELD_THREADS"


class PanofieldError(ValueError):
    """Base class for every error raised by the pipeline.

    Parameters
    ----------
    message : str
        Human readable description.
    context : str, optional
        Where the error happened (a scene directory, a parameter block, ...).
        When given it is framed as a header above the message.
    """

    code = "error"

    def __init__(self, message, context=None):
        self.context = context
        self.raw_message = message
        if context is None:
            self.msg = message
        else:
            indent = 10
            header = '{sep} {context} {sep}'.format(
                context=context, sep="".join(["-"] * indent)
            )
            self.msg = "\n{header}\n{indent}{message}\n{footer}".format(
                header=header,
                indent="".join([" "] * (indent + 1)),
                message=message,
                footer="".join(["-"] * len(header)),
            )
        super(PanofieldError, self).__init__(self.msg)


class InputError(PanofieldError):
    code = "input"


class ConfigError(PanofieldError):
    code = "config"


class SceneError(PanofieldError):
    code = "scene"

    def __init__(self, message, scene_dir=None):
        context = None if scene_dir is None else 'Scene folder: "{}"'.format(scene_dir)
        super(SceneError, self).__init__(message, context)
        self.scene_dir = scene_dir


class MissingFileError(SceneError):
    code = "missing-file"


class DimensionMismatchError(SceneError):
    code = "dimension-mismatch"


class InvalidPoseError(SceneError):
    code = "invalid-pose"


class UnwritablePathError(SceneError):
    code = "unwritable"


class EmptyCloudError(InputError):
    code = "empty-cloud"


class FreeSpaceError(PanofieldError):
    code = "free-space"


class NumericError(PanofieldError, ArithmeticError):
    code = "numeric"

    def __init__(self, message, where=None):
        super(NumericError, self).__init__(
            message if where is None else "{} (at {})".format(message, where)
        )
        self.where = where


class DivergenceError(NumericError):
    code = "divergence"


class CapacityError(PanofieldError):
    code = "capacity"

    def __init__(self, message, required_size):
        super(CapacityError, self).__init__(
            "{} (required atlas size: {})".format(message, required_size)
        )
        self.required_size = required_size


class RefinementError(PanofieldError):
    code = "refinement"

    def __init__(self, message, edge):
        super(RefinementError, self).__init__(
            "{} (edge {} - {})".format(message, edge[0], edge[1])
        )
        self.edge = tuple(int(e) for e in edge)


class EmptyBatch(PanofieldError):
    """Raised by the loss when a batch holds no supervised pixel."""

    code = "empty-batch"


class PanofieldWarning(RuntimeWarning):
    pass


def check_unit_vectors(vecs, atol=1e-6):
    """Validate an array of 3D unit vectors.

    Parameters
    ----------
    vecs : numpy.ndarray
        Array with shape (..., 3).

    Returns
    -------
    vecs : numpy.ndarray
        The same vectors as float64.
    """
    vecs = np.asarray(vecs, dtype=np.float64)
    if vecs.shape[-1] != 3:
        raise InputError("Input vectors must be 3D vectors")
    norms = np.linalg.norm(vecs, axis=-1)
    if np.any(norms == 0):
        raise InputError("Input vectors must be non-zero")
    if not np.allclose(1, norms, rtol=0, atol=atol):
        raise InputError("Input vectors must be unit vectors")
    return vecs


def seeded_rng(seed, *keys):
    """Independent numpy Generator for a (seed, key, ...) tuple."""
    entropy = [int(seed) & 0xFFFFFFFF] + [int(k) & 0xFFFFFFFF for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(x):
    x = x + _GOLDEN
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def hash_uniform(seed, *keys):
    """Counter-based uniform numbers in [0, 1).

    The value only depends on the seed and the broadcast integer keys, so a
    sample drawn for (seed, ray, k) is the same whatever batch or worker
    produced it.
    """
    shape = np.broadcast_shapes(*[np.shape(k) for k in keys]) if keys else ()
    with np.errstate(over="ignore"):
        h = _splitmix(np.full(1, int(seed) & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64))
        for key in keys:
            key = np.atleast_1d(np.asarray(key).astype(np.int64).astype(np.uint64))
            h = _splitmix(h ^ key)
    out = (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
    return out.reshape(shape)


def thread_count(threads=None):
    """Resolve the worker count from the argument or the environment."""
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigError(
                    "{} must be an integer, got {!r}".format(THREADS_ENV, env)
                )
    if threads is None:
        return 1
    if threads < 1:
        raise ConfigError("thread count must be >= 1, got {}".format(threads))
    return int(threads)


def ordered_map(func, items, threads=None):
    """Map ``func`` over ``items`` with up to ``threads`` workers.

    Results come back in input order, so reductions over them are performed
    in a fixed order regardless of the worker count.
    """
    items = list(items)
    threads = thread_count(threads)
    if threads == 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(func, items))


def chunk_slices(total, chunk):
    """Fixed partition of ``range(total)`` into slices of ``chunk`` items."""
    return [slice(start, min(start + chunk, total)) for start in range(0, total, chunk)]


def write_seed(directory, seed):
    """Record the root seed of a run in ``directory/seed.txt``."""
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, "seed.txt")
    with open(path, "w") as fid:
        fid.write("{}\n".format(int(seed)))
    return path


def warn(message):
    mod_logger.warning(message)
    warnings.warn(message, PanofieldWarning)
