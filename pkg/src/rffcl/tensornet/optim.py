"""
Adam over named parameter groups, and the cosine learning-rate schedule
"""
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .. import ConfigError, DivergenceError
from .tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class ParamGroup:
    """Parameters sharing a learning-rate multiplier"""

    name: str
    params: Dict[str, Tensor]
    lr_scale: float = 1.0


@dataclass
class Adam:
    groups: List[ParamGroup]
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    moments: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=OrderedDict)

    def __post_init__(self):
        names = [n for g in self.groups for n in g.params]
        if len(names) != len(set(names)):
            raise ConfigError("A parameter appears in more than one optimiser group")

    @classmethod
    def single(cls, params: Dict[str, Tensor], **kwargs) -> "Adam":
        return cls([ParamGroup("all", dict(params))], **kwargs)

    def zero_grad(self):
        for group in self.groups:
            for p in group.params.values():
                p.zero_grad()

    def step(self, lr: float, epoch: Optional[int] = None):
        """One bias-corrected Adam update; parameters without a gradient are left alone

        Raises:
          DivergenceError: if any gradient is NaN or infinite; nothing is updated
        """
        for group in self.groups:
            for name, p in group.params.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise DivergenceError(f"Non-finite gradient for {name}", epoch=epoch)

        self.step_count += 1
        b1, b2 = self.betas
        correction1 = 1 - b1**self.step_count
        correction2 = 1 - b2**self.step_count
        for group in self.groups:
            group_lr = lr * group.lr_scale
            for name, p in group.params.items():
                if p.grad is None:
                    continue
                g = p.grad.astype(p.dtype, copy=False)
                m, v = self.moments.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * g * g
                self.moments[name] = (m, v)
                p.data -= (group_lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)).astype(p.dtype)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        state = OrderedDict()
        for name, (m, v) in self.moments.items():
            state[f"m.{name}"] = m
            state[f"v.{name}"] = v
        return state

    def load_state_arrays(self, step_count: int, arrays: Dict[str, np.ndarray]):
        self.step_count = int(step_count)
        self.moments = OrderedDict()
        for key, m in arrays.items():
            if key.startswith("m."):
                name = key[2:]
                self.moments[name] = (np.array(m), np.array(arrays[f"v.{name}"]))


def cosine_lr(epoch: int, total_epochs: int, lr_max: float = 1e-3, lr_min: float = 1e-4) -> float:
    """Cosine decay from `lr_max` at epoch 0 to `lr_min` at `total_epochs`

    >>> round(cosine_lr(0, 10), 12)
    0.001
    >>> round(cosine_lr(10, 10), 12)
    0.0001
    >>> round(cosine_lr(5, 10), 12)
    0.00055
    """
    if total_epochs <= 0:
        return lr_max
    if not 0 <= epoch <= total_epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {total_epochs}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * epoch / total_epochs))
