"""
This module contains utility functions and classes that are used throughout the package.
"""
import logging
import time
from contextlib import contextmanager
from typing import Dict, Iterator

import tqdm

logger = logging.getLogger(__name__)


class TqdmLoggingHandler(logging.Handler):
    """
    Custom logging handler that uses tqdm to display log messages.
    i.e. `logging.getLogger().addHandler(TqdmLoggingHandler())`
    """

    def __init__(self, level=logging.NOTSET):
        super().__init__(level)

    def emit(self, record):
        try:
            msg = self.format(record)
            tqdm.tqdm.write(msg)
            self.flush()
        except Exception:
            self.handleError(record)


class PhaseTimer:
    """Wall-clock durations of named pipeline phases

    >>> timer = PhaseTimer()
    >>> with timer.phase("gen"):
    ...     pass
    >>> list(timer.durations)
    ['gen']
    """

    def __init__(self):
        self.durations: Dict[str, float] = {}

    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        logger.info(f"Launching {name}")
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.durations[name] = self.durations.get(name, 0.0) + elapsed
            logger.info(f"{name} ran in {round(elapsed, 2)}s")

