"""
Training loops: contrastive pretraining and supervised fine-tuning

The helpers here turn received packets into stacked (N, 2, 260) network inputs. Each
packet is augmented from its own seed, so the result does not depend on how the work
is spread over threads.
"""
from typing import Optional, Sequence, Tuple

import numpy as np

from .. import poolmap
from ..signals.chanest import Estimator, MmseStatistics, Mode, augment_view, make_pair
from ..signals.channel import ReceivedFrame

SeedKey = Tuple[int, ...]


def equalized_views(
    frames: Sequence[ReceivedFrame],
    indices: Sequence[int],
    stats: Optional[MmseStatistics],
    estimator: Estimator,
    max_workers: Optional[int] = None,
) -> np.ndarray:
    """Equalise packets as received, no extra noise and no mask"""
    indices = [int(i) for i in indices]
    views = poolmap(
        lambda i: augment_view(frames[i], estimator, stats, None, 0.0, 0).values,
        indices,
        max_workers=max_workers,
    )
    return _stack([views[i] for i in indices])


def positive_pairs(
    frames: Sequence[ReceivedFrame],
    indices: Sequence[int],
    stats: Optional[MmseStatistics],
    seed_key: SeedKey,
    mode: Mode = Mode.MIXED,
    snr_range_db: Optional[Sequence[int]] = (10, 20),
    mask_ratio: float = 0.1,
    max_workers: Optional[int] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Two augmented views per packet; packet i is seeded from `seed_key + (i,)`"""
    indices = [int(i) for i in indices]
    pairs = poolmap(
        lambda i: make_pair(frames[i], stats, snr_range_db, [*seed_key, i], mode, mask_ratio),
        indices,
        max_workers=max_workers,
    )
    first = _stack([pairs[i][0].values for i in indices])
    second = _stack([pairs[i][1].values for i in indices])
    return first, second


def _stack(values) -> np.ndarray:
    if not values:
        return np.zeros((0, 2, 0), dtype=np.float32)
    return np.stack(values).astype(np.float32, copy=False)
