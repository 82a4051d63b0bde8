"""
SimSiam pretraining on residual-channel positive pairs

Both views of a packet go through the encoder f (backbone + projection MLP) and the
prediction MLP h. The loss is the symmetrised negative cosine similarity between each
prediction and the other view's stop-gradient projection; there are no negative pairs.
"""
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import tqdm

from .. import ConfigError, DivergenceError, NumericError, batch
from ..signals.chanest import Estimator, MmseStatistics, Mode
from ..signals.channel import ReceivedFrame
from ..stats.metrics import FeatureMatrix, average_nmi, clustering_nmi
from ..tensornet.functional import l2_normalize, l2_normalize_forward
from ..tensornet.model import BackboneConfig, ModelState
from ..tensornet.optim import Adam, cosine_lr
from ..tensornet.tensor import Tensor
from . import equalized_views, positive_pairs

logger = logging.getLogger(__name__)

TRAIN_STREAM = 2
VAL_STREAM = 3
SPLIT_STREAM = 4


@dataclass
class PretrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr_max: float = 1e-3
    lr_min: float = 1e-4
    snr_range_db: Tuple[int, int] = (10, 20)
    mask_ratio: float = 0.1
    train_fraction: float = 0.9
    val_fraction: float = 0.1
    mode: Mode = Mode.MIXED
    nmi_restarts: int = 10
    nmi_window: int = 10
    seed: int = 0
    workers: Optional[int] = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        self.snr_range_db = tuple(int(s) for s in self.snr_range_db)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not 0 < self.train_fraction < 1 or abs(self.train_fraction + self.val_fraction - 1) > 1e-9:
            raise ConfigError(
                f"Split fractions must lie in (0, 1) and sum to 1, got {self.train_fraction}/{self.val_fraction}"
            )
        if len(self.snr_range_db) != 2 or self.snr_range_db[1] < self.snr_range_db[0]:
            raise ConfigError(f"Invalid SNR range {self.snr_range_db}")
        if not 0 <= self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ConfigError(f"Need 0 < lr_min <= lr_max, got {self.lr_min}, {self.lr_max}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["snr_range_db"] = list(self.snr_range_db)
        return d


@dataclass
class PretrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    nmi: List[float] = field(default_factory=list)
    lr: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    best_nmi_epoch: int = -1
    nmi_window: int = 10

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    @property
    def average_nmi(self) -> float:
        return average_nmi(self.nmi, self.nmi_window)

    def record(self, train_loss: float, val_loss: float, nmi: float, lr: float, seconds: float) -> bool:
        """Append one epoch; True if it is the best NMI so far

        Without labels every NMI is NaN and the latest epoch counts as the best.
        """
        self.train_loss.append(train_loss)
        self.val_loss.append(val_loss)
        self.nmi.append(nmi)
        self.lr.append(lr)
        self.seconds.append(seconds)
        epoch = self.epochs - 1
        best = self.nmi[self.best_nmi_epoch] if self.best_nmi_epoch >= 0 else float("nan")
        if np.isnan(best) or (not np.isnan(nmi) and nmi > best):
            self.best_nmi_epoch = epoch
        return self.best_nmi_epoch == epoch

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "epoch": np.arange(self.epochs),
                "train_loss": self.train_loss,
                "val_loss": self.val_loss,
                "nmi": self.nmi,
                "lr": self.lr,
                "seconds": self.seconds,
            }
        )

    def summary(self) -> dict:
        """Everything but wall-clock time, which lives in the timings file"""
        return {
            "epochs": self.epochs,
            "final_train_loss": self.train_loss[-1] if self.train_loss else None,
            "final_val_loss": self.val_loss[-1] if self.val_loss else None,
            "best_nmi_epoch": self.best_nmi_epoch,
            "best_nmi": self.nmi[self.best_nmi_epoch] if self.best_nmi_epoch >= 0 else None,
            "average_nmi": self.average_nmi,
            "nmi_window": self.nmi_window,
        }


def neg_cosine(p: Tensor, z: Tensor) -> Tensor:
    """Mean over rows of -(p/|p|).(z/|z|); `z` is a constant

    >>> x = Tensor(np.array([[1.0, 2.0], [3.0, -1.0]]))
    >>> round(neg_cosine(x, x).item(), 12)
    -1.0
    """
    for name, t in (("p", p), ("z", z)):
        if np.any(np.sqrt((t.data * t.data).sum(axis=1)) == 0):
            raise NumericError(f"Zero-norm row in {name}")
    z_unit, _ = l2_normalize_forward(z.data)
    return -((l2_normalize(p) * z_unit).sum(axis=1).mean())


def symmetrized_loss(x1, x2, state: ModelState) -> Tensor:
    """L = D(p1, sg(z2)) / 2 + D(p2, sg(z1)) / 2

    Calling `.backward()` on the result fills the parameter gradients; they reach the
    encoder only through the prediction branches.
    """
    if len(x1) != len(x2):
        raise ConfigError(f"Views differ in batch size: {len(x1)} vs {len(x2)}")
    z1 = state.forward_projector(state.forward_encoder(x1))
    z2 = state.forward_projector(state.forward_encoder(x2))
    p1 = state.forward_predictor(z1)
    p2 = state.forward_predictor(z2)
    return neg_cosine(p1, z2.detach()) * 0.5 + neg_cosine(p2, z1.detach()) * 0.5


def split_indices(n: int, val_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Shuffled train/val index split; both sides get at least one packet"""
    if n < 2:
        raise ConfigError(f"Need at least two packets to split, got {n}")
    order = np.random.default_rng([seed, SPLIT_STREAM]).permutation(n)
    n_val = min(max(1, int(round(n * val_fraction))), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def feature_estimator(mode: Mode) -> Estimator:
    """Which equalisation feeds the NMI features"""
    return Estimator.MMSE if Mode(mode) is Mode.MMSE_ONLY else Estimator.LS


def _validation_loss(state: ModelState, x1: np.ndarray, x2: np.ndarray, batch_size: int) -> float:
    state.eval()
    total = 0.0
    for start in range(0, len(x1), batch_size):
        stop = start + batch_size
        total += symmetrized_loss(x1[start:stop], x2[start:stop], state).item() * len(x1[start:stop])
    return total / len(x1)


def pretrain(
    frames: Sequence[ReceivedFrame],
    cfg: PretrainConfig,
    stats: Optional[MmseStatistics],
    labels: Optional[np.ndarray] = None,
    state: Optional[ModelState] = None,
    arch: Optional[BackboneConfig] = None,
    on_epoch: Optional[Callable[[int, ModelState, bool], None]] = None,
    progress: bool = False,
) -> Tuple[ModelState, PretrainReport]:
    """Contrastive pretraining over residual-channel pairs

    Each epoch reshuffles the training packets, builds a fresh positive pair per packet,
    and takes one Adam step per mini-batch at the cosine-scheduled learning rate. The
    validation pairs are drawn once from a fixed seed so val losses are comparable.
    When `labels` are given, the NMI of k-means clusters of validation features is
    recorded each epoch. `on_epoch(epoch, state, is_best_nmi)` runs after every epoch.

    Raises:
      DivergenceError: on a non-finite loss or gradient
    """
    if cfg.mode is Mode.SUPERVISED:
        raise ConfigError("Supervised mode does not pretrain; use finetune.train_supervised")
    if cfg.mode is not Mode.LS_ONLY and stats is None:
        raise ConfigError(f"{cfg.mode.value} pretraining needs MMSE statistics")

    train_idx, val_idx = split_indices(len(frames), cfg.val_fraction, cfg.seed)
    if state is None:
        state = ModelState(arch, seed=cfg.seed)
    state.optimizer = Adam.single(dict(state.named_parameters(("backbone", "projector", "predictor"))))
    report = PretrainReport(nmi_window=cfg.nmi_window)
    logger.info(
        f"Pretraining {cfg.mode.value} on {len(train_idx)} packets ({len(val_idx)} held out) for {cfg.epochs} epochs"
    )

    val_x1, val_x2 = positive_pairs(
        frames, val_idx, stats, (cfg.seed, VAL_STREAM), cfg.mode, cfg.snr_range_db, cfg.mask_ratio, cfg.workers
    )
    features_x = None
    if labels is not None:
        features_x = equalized_views(frames, val_idx, stats, feature_estimator(cfg.mode), cfg.workers)
        val_labels = np.asarray(labels)[val_idx]
        n_clusters = len(np.unique(labels))

    for epoch in tqdm.tqdm(range(cfg.epochs), desc=f"pretrain[{cfg.mode.value}]", disable=not progress):
        start = time.perf_counter()
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = train_idx[np.random.default_rng([cfg.seed, TRAIN_STREAM, epoch]).permutation(len(train_idx))]
        state.train()
        total, count = 0.0, 0
        for chunk in batch(order, cfg.batch_size):
            if len(chunk) < 2:
                logger.debug(f"Skipping a trailing batch of {len(chunk)}")
                continue
            x1, x2 = positive_pairs(
                frames,
                chunk,
                stats,
                (cfg.seed, TRAIN_STREAM, epoch),
                cfg.mode,
                cfg.snr_range_db,
                cfg.mask_ratio,
                cfg.workers,
            )
            loss = symmetrized_loss(x1, x2, state)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"Non-finite pretraining loss {value}", epoch=epoch)
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step(lr, epoch=epoch)
            total += value * len(chunk)
            count += len(chunk)
        if count == 0:
            raise ConfigError(f"No training batch of at least two packets in {len(train_idx)} packets")

        val_loss = _validation_loss(state, val_x1, val_x2, cfg.batch_size)
        epoch_nmi = float("nan")
        if features_x is not None and len(val_idx) >= n_clusters:
            features = state.encode(features_x, batch_size=max(cfg.batch_size, 256))
            epoch_nmi = clustering_nmi(FeatureMatrix(features, val_labels), n_clusters, cfg.nmi_restarts, cfg.seed)
        state.epoch = epoch + 1
        is_best = report.record(total / count, val_loss, epoch_nmi, lr, time.perf_counter() - start)
        logger.info(
            f"epoch {epoch}: loss {total / count:.4f} val {val_loss:.4f} nmi {epoch_nmi:.4f} lr {lr:.2e}"
        )
        if on_epoch is not None:
            on_epoch(epoch, state, is_best)

    state.train()
    return state, report
