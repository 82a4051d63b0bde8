# coding=utf-8
"""Top-level package for rffcl.

Residual-channel contrastive learning for radio frequency fingerprint identification:
simulated IQ-imbalanced OFDM transmitters, LS/MMSE equalised positive pairs, a small
numpy autodiff core, SimSiam pretraining and few-label fine-tuning.
"""

__author__ = """Andrew Bolster"""
__email__ = "me@andrewbolster.info"
__version__ = "0.1.0"

import logging
import os
from collections import Counter
from concurrent.futures import ThreadPoolExecutor, as_completed
from functools import partial
from typing import (
    Callable,
    Dict,
    Generator,
    Iterable,
    Optional,
    Sequence,
)

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

THREADS_ENV = "RFF_THREADS"


class RffError(Exception):
    """Base class for everything this package raises on purpose.

    Each subclass carries the process exit code the CLI uses for its failure class.
    """

    exit_code = 1


class ConfigError(RffError, ValueError):
    """Invalid configuration values (device profiles, channel or run config)"""

    exit_code = 3


class InputShapeError(RffError, ValueError):
    """Array or tensor shapes that do not agree with what an operation expects"""

    exit_code = 3


class StorageError(RffError, OSError):
    """Missing or unreadable inputs and outputs"""

    exit_code = 4


class FormatError(StorageError):
    """A file that exists but is not in the expected container format"""


class NumericError(RffError, ArithmeticError):
    """Numerical failure: zero norms, singular systems and the like"""

    exit_code = 5


class DegeneratePilotError(NumericError):
    """A transmitted pilot entry is zero, LS estimation is undefined"""


class DeepFadeError(NumericError):
    """A channel estimate is too small on some subcarrier to equalise against"""


class DivergenceError(NumericError):
    """Training produced a non-finite loss or gradient

    Args:
      msg: description
      epoch: epoch index in which it happened, if known
    """

    def __init__(self, msg: str, epoch: Optional[int] = None):
        super().__init__(msg if epoch is None else f"{msg} (epoch {epoch})")
        self.epoch = epoch


def _dumb_passthrough(x, **kwargs):
    """Pointless passthrough replacement for tqdm (and similar) fallback

    Args:
      x: return:

    Returns:

    """
    return x


def worker_count(max_workers: Optional[int] = None) -> int:
    """Resolve how many threads a pooled map may use

    An explicit `max_workers` wins, then the `RFF_THREADS` environment variable,
    then the CPU count.

    >>> worker_count(3)
    3
    """
    if max_workers is not None:
        return max(1, int(max_workers))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as e:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from e
    return os.cpu_count() or 1


def poolmap(
    f: Callable,
    iterable: Iterable,
    max_workers: Optional[int] = None,
    progress: Callable = None,
    **kwargs,
) -> Dict:
    """Helper function to encapsulate a ThreadPoolExecutor mapped function workflow
    Accepts (assumed to be `tqdm` style) progress monitor callback

    `kwargs` are passed identically to all `f(i)` calls for each i in `iterable`.
    With a single worker everything runs inline, in iteration order, which is what
    deterministic mode relies on.

    Args:
      f: function to map across
      iterable: hashable arguments
      max_workers: (Default value = None, see `worker_count`)
      progress: (Default value = None)
      **kwargs: passed as arguments to f

    Returns:
      dict of argument -> result

    >>> poolmap(lambda x: x * 2, range(4), max_workers=1)
    {0: 0, 1: 2, 2: 4, 3: 6}
    """
    results = {}

    if progress is None:
        progress = _dumb_passthrough

    workers = worker_count(max_workers)
    if workers == 1:
        args = list(dict.fromkeys(iterable))
        for arg in progress(args, total=len(args)):
            results[arg] = f(arg, **kwargs)
        return results

    futures = {}
    with ThreadPoolExecutor(max_workers=workers) as exc:
        for arg in iterable:
            if arg not in results:
                futures[exc.submit(f, arg, **kwargs)] = arg
        for future in progress(as_completed(futures), total=len(futures)):
            arg = futures[future]
            results[arg] = future.result()

    return results


def batch(seq: Sequence, n: int = 1) -> Generator[Iterable, None, None]:
    """Split a sequence into n-length batches (is still iterable, not list)

    Args:
      seq:
      n:  (Default value = 1)

    Returns:

    >>> next((b for b in batch(range(10), 2)))
    range(0, 2)
    >>> [b for b in batch(list(range(10)), 4)]
    [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9]]
    """
    parent_length = len(seq)
    for ndx in range(0, parent_length, n):
        yield seq[ndx : min(ndx + n, parent_length)]


class memoize(object):
    """cache the return value of a method

    This class is meant to be used as a decorator of methods. The return value
    from a given method invocation will be cached on the instance whose method
    was invoked. All arguments passed to a method decorated with memoize must
    be hashable.

    If a memoized method is invoked directly on its class the result will not
    be cached. Instead the method will be invoked like a static method.

    Source: http://code.activestate.com/recipes/577452-a-memoize-decorator-for-instance-methods/

    Augmented with cache hit/miss population Counters

    >>> class Obj(object):
    ...     @memoize
    ...     def add_to(self, arg):
    ...         return arg + 1
    >>> o = Obj()
    >>> o.add_to(1), o.add_to(1)
    (2, 2)
    """

    def __init__(self, func):
        self.func = func

    def __get__(self, obj, objtype=None):
        if obj is None:
            return self.func
        return partial(self, obj)

    def __call__(self, *args, **kw):
        obj = args[0]
        try:
            cache = obj.__cache
        except AttributeError:
            cache = obj.__cache = {}
            obj.__hits = Counter()
            obj.__misses = Counter()
        key = (self.func, args[1:], frozenset(kw.items()))
        try:
            res = cache[key]
            obj.__hits[key] += 1
        except KeyError:
            res = cache[key] = self.func(*args, **kw)
            obj.__misses[key] += 1
        return res
