"""
Few-label fine-tuning of a pretrained backbone, and the supervised baseline

A fresh classifier head is trained with cross-entropy on a small labelled split of the
target-domain packets while the backbone follows at a fraction of the head learning
rate. Every labelled packet contributes an LS- and an MMSE-equalised view with fresh
noise each epoch. Validation fuses the softmax outputs of both equalisations with
equal weights and early-stops on that accuracy.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import tqdm
from scipy import special

from .. import ConfigError, DivergenceError, InputShapeError, batch
from ..signals.chanest import Estimator, MmseStatistics, Mode, augment_view
from ..signals.channel import ReceivedFrame
from ..stats.metrics import accuracy, confusion, per_class_accuracy
from ..tensornet.model import BackboneConfig, ModelState
from ..tensornet.optim import Adam, ParamGroup
from ..tensornet.tensor import Tensor
from . import equalized_views, positive_pairs

logger = logging.getLogger(__name__)

SPLIT_STREAM = 7
AUGMENT_STREAM = 8
SHUFFLE_STREAM = 9

BRANCHES = ("ls", "mmse", "hybrid")


@dataclass
class FinetuneConfig:
    finetune_batch: int = 10
    val_batch: int = 512
    head_lr: float = 1e-3
    backbone_lr_ratio: float = 0.01
    patience: int = 30
    max_epochs: int = 200
    label_fraction: float = 0.01
    supervised_fraction: float = 0.7
    snr_range_db: Tuple[int, int] = (10, 20)
    freeze_bn_stats: bool = False
    seed: int = 0
    workers: Optional[int] = None

    def __post_init__(self):
        self.snr_range_db = tuple(int(s) for s in self.snr_range_db)
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        for name in ("label_fraction", "supervised_fraction"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in (0, 1), got {getattr(self, name)}")
        if self.finetune_batch < 2 or self.val_batch < 1:
            raise ConfigError(f"Invalid batch sizes {self.finetune_batch}/{self.val_batch}")
        if self.head_lr < 0 or self.backbone_lr_ratio < 0:
            raise ConfigError("Learning rates must be non-negative")
        if len(self.snr_range_db) != 2 or self.snr_range_db[1] < self.snr_range_db[0]:
            raise ConfigError(f"Invalid SNR range {self.snr_range_db}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_range_db"] = list(self.snr_range_db)
        return d


@dataclass
class FinetuneReport:
    n_classes: int
    n_labeled: int
    n_validation: int
    train_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    best_epoch: int = -1
    final_accuracy: float = float("nan")
    branch_accuracy: Dict[str, float] = field(default_factory=dict)
    per_class_accuracy: Optional[np.ndarray] = None
    confusion: Optional[np.ndarray] = None

    @property
    def epochs(self) -> int:
        return len(self.val_accuracy)

    def record(self, train_loss: float, val_accuracy: float) -> bool:
        """Append one epoch; True if it strictly improves on the best so far"""
        best = self.val_accuracy[self.best_epoch] if self.best_epoch >= 0 else -np.inf
        self.train_loss.append(train_loss)
        self.val_accuracy.append(val_accuracy)
        if val_accuracy > best:
            self.best_epoch = self.epochs - 1
            return True
        return False

    def finish(self, probabilities: Dict[str, np.ndarray], labels: np.ndarray):
        """Final numbers from the restored model's validation probabilities"""
        predictions = {name: decide(p) for name, p in probabilities.items()}
        self.branch_accuracy = {name: accuracy(predictions[name], labels) for name in BRANCHES}
        self.final_accuracy = self.branch_accuracy["hybrid"]
        self.confusion = confusion(predictions["hybrid"], labels, self.n_classes)
        self.per_class_accuracy = per_class_accuracy(predictions["hybrid"], labels, self.n_classes)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"epoch": np.arange(self.epochs), "train_loss": self.train_loss, "val_accuracy": self.val_accuracy}
        )

    def summary(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "n_labeled": self.n_labeled,
            "n_validation": self.n_validation,
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.val_accuracy[self.best_epoch] if self.best_epoch >= 0 else None,
            "final_accuracy": self.final_accuracy,
            "branch_accuracy": self.branch_accuracy,
            "per_class_accuracy": self.per_class_accuracy,
        }


def softmax(z) -> np.ndarray:
    """Row-wise softmax, scipy subtracts the row max first

    >>> softmax(np.zeros((1, 4))).tolist()
    [[0.25, 0.25, 0.25, 0.25]]
    >>> np.round(softmax(np.array([[1.0, 0.0]])), 4).tolist()
    [[0.7311, 0.2689]]
    """
    return special.softmax(np.asarray(z), axis=-1)


def _check_labels(labels, n: int, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise InputShapeError(f"Expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputShapeError(f"Labels must lie in [0, {n_classes})")
    return labels


def cross_entropy_forward(logits: np.ndarray, labels):
    """Mean of -log softmax(z)[label], via log-sum-exp

    >>> round(cross_entropy_forward(np.zeros((3, 7)), [0, 3, 6])[0], 4)
    1.9459
    """
    logits = np.asarray(logits)
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    rows = np.arange(n)
    loss = float(np.mean(special.logsumexp(logits, axis=1) - logits[rows, labels]))
    return loss, (softmax(logits), labels)


def cross_entropy_backward(grad: float, cache) -> np.ndarray:
    """(softmax(z) - onehot) / N, scaled by the upstream gradient"""
    probs, labels = cache
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1
    return d * (grad / len(labels))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    loss, cache = cross_entropy_forward(logits.data, labels)
    dtype = logits.dtype
    return Tensor.from_op(
        np.asarray(loss, dtype=dtype),
        (logits,),
        lambda g: (cross_entropy_backward(float(g), cache).astype(dtype),),
        "cross_entropy",
    )


def stratified_split(labels, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per device, round(fraction * n) packets (at least one) go to the first split

    >>> a, b = stratified_split(np.repeat([0, 1], 100), 0.01, seed=0)
    >>> len(a), len(b)
    (2, 198)
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, SPLIT_STREAM])
    first, second = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        k = max(1, int(round(fraction * len(members))))
        if k >= len(members):
            raise ConfigError(f"Device {c} has {len(members)} packets, too few to split at {fraction}")
        first.append(members[:k])
        second.append(members[k:])
    if not first:
        raise ConfigError("Cannot split an empty dataset")
    return np.sort(np.concatenate(first)), np.sort(np.concatenate(second))


def fuse_probabilities(p_ls: np.ndarray, p_mmse: np.ndarray) -> np.ndarray:
    """Equal-weight average of the two branches' softmax outputs"""
    if p_ls.shape != p_mmse.shape:
        raise InputShapeError(f"Branch shapes differ: {p_ls.shape} vs {p_mmse.shape}")
    return 0.5 * (p_ls + p_mmse)


def decide(probabilities: np.ndarray) -> np.ndarray:
    """Most probable device; ties go to the lowest index

    >>> decide(np.array([[0.4, 0.6], [0.5, 0.5]])).tolist()
    [1, 0]
    """
    return np.argmax(probabilities, axis=-1)


def predict_batch(state: ModelState, x_ls: np.ndarray, x_mmse: np.ndarray, batch_size: int = 512) -> Dict[str, np.ndarray]:
    """Eval-mode class probabilities for the LS branch, the MMSE branch and their fusion"""
    p_ls = softmax(state.logits(x_ls, batch_size))
    p_mmse = softmax(state.logits(x_mmse, batch_size))
    return {"ls": p_ls, "mmse": p_mmse, "hybrid": fuse_probabilities(p_ls, p_mmse)}


def hybrid_predict(state: ModelState, packet: ReceivedFrame, stats: MmseStatistics) -> Tuple[int, np.ndarray]:
    """Device decision for one packet from both equalisations at its own SNR

    Raises:
      DeepFadeError: if either estimate cannot be equalised against
    """
    x_ls = augment_view(packet, Estimator.LS, stats, None, 0.0, 0).values[None]
    x_mmse = augment_view(packet, Estimator.MMSE, stats, None, 0.0, 0).values[None]
    probs = predict_batch(state, x_ls, x_mmse, 1)["hybrid"][0]
    return int(decide(probs)), probs


def _fit(
    state: ModelState,
    frames: Sequence[ReceivedFrame],
    labels: np.ndarray,
    train_idx: np.ndarray,
    val_idx: np.ndarray,
    stats: MmseStatistics,
    cfg: FinetuneConfig,
    backbone_lr_ratio: float,
    progress: bool = False,
) -> FinetuneReport:
    """Train backbone + classifier with early stopping, then restore the best epoch"""
    state.optimizer = Adam(
        [
            ParamGroup("classifier", dict(state.named_parameters(("classifier",))), 1.0),
            ParamGroup("backbone", dict(state.named_parameters(("backbone",))), backbone_lr_ratio),
        ]
    )
    val_ls = equalized_views(frames, val_idx, stats, Estimator.LS, cfg.workers)
    val_mmse = equalized_views(frames, val_idx, stats, Estimator.MMSE, cfg.workers)
    val_labels = labels[val_idx]
    train_labels = np.concatenate([labels[train_idx], labels[train_idx]])
    report = FinetuneReport(state.n_classes, len(train_idx), len(val_idx))
    best_snapshot, stale = None, 0

    for epoch in tqdm.tqdm(range(cfg.max_epochs), desc="finetune", disable=not progress):
        x_ls, x_mmse = positive_pairs(
            frames,
            train_idx,
            stats,
            (cfg.seed, AUGMENT_STREAM, epoch),
            Mode.MIXED,
            cfg.snr_range_db,
            0.0,
            cfg.workers,
        )
        x = np.concatenate([x_ls, x_mmse])
        order = np.random.default_rng([cfg.seed, SHUFFLE_STREAM, epoch]).permutation(len(x))
        state.train()
        state.freeze_batch_norm(cfg.freeze_bn_stats)
        total, count = 0.0, 0
        for chunk in batch(order, cfg.finetune_batch):
            if len(chunk) < 2:
                continue
            loss = cross_entropy(state.forward_classifier(state.forward_encoder(x[chunk])), train_labels[chunk])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"Non-finite fine-tuning loss {value}", epoch=epoch)
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step(cfg.head_lr, epoch=epoch)
            total += value * len(chunk)
            count += len(chunk)
        if count == 0:
            raise ConfigError("No fine-tuning batch of at least two samples")

        probs = predict_batch(state, val_ls, val_mmse, cfg.val_batch)
        val_acc = accuracy(decide(probs["hybrid"]), val_labels)
        state.epoch = epoch + 1
        if report.record(total / count, val_acc):
            best_snapshot = state.snapshot(("backbone", "classifier"))
            stale = 0
        else:
            stale += 1
        logger.info(f"epoch {epoch}: loss {total / count:.4f} val accuracy {val_acc:.4f}")
        if stale >= cfg.patience:
            logger.info(f"No improvement in {cfg.patience} epochs, stopping after epoch {epoch}")
            break

    state.restore(best_snapshot)
    state.freeze_batch_norm(False)
    state.epoch = report.best_epoch + 1
    report.finish(predict_batch(state, val_ls, val_mmse, cfg.val_batch), val_labels)
    logger.info(f"Restored epoch {report.best_epoch}: hybrid accuracy {report.final_accuracy:.4f}")
    return report


def _prepare(frames: Sequence[ReceivedFrame], labels, stats: Optional[MmseStatistics]) -> Tuple[np.ndarray, int]:
    if stats is None:
        raise ConfigError("Fine-tuning equalises with MMSE as well and needs channel statistics")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(frames),):
        raise InputShapeError(f"{len(labels)} labels for {len(frames)} packets")
    return labels, int(labels.max()) + 1


def finetune(
    state: ModelState,
    frames: Sequence[ReceivedFrame],
    labels,
    cfg: FinetuneConfig,
    stats: MmseStatistics,
    progress: bool = False,
) -> Tuple[ModelState, FinetuneReport]:
    """Fine-tune a pretrained backbone on `label_fraction` of the packets of each device

    The projection and prediction MLPs are discarded and a new classifier head attached.
    The rest of the packets are the validation set.
    """
    labels, n_classes = _prepare(frames, labels, stats)
    train_idx, val_idx = stratified_split(labels, cfg.label_fraction, cfg.seed)
    logger.info(f"Fine-tuning on {len(train_idx)} labelled packets, validating on {len(val_idx)}")
    state.drop_ssl_heads()
    state.attach_classifier(n_classes, cfg.seed)
    report = _fit(state, frames, labels, train_idx, val_idx, stats, cfg, cfg.backbone_lr_ratio, progress)
    return state, report


def train_supervised(
    frames: Sequence[ReceivedFrame],
    labels,
    cfg: FinetuneConfig,
    stats: MmseStatistics,
    arch: Optional[BackboneConfig] = None,
    progress: bool = False,
) -> Tuple[ModelState, FinetuneReport]:
    """Fully supervised baseline: random backbone and head trained together on
    `supervised_fraction` of the packets, everything at the head learning rate"""
    labels, n_classes = _prepare(frames, labels, stats)
    train_idx, val_idx = stratified_split(labels, cfg.supervised_fraction, cfg.seed)
    logger.info(f"Supervised training on {len(train_idx)} labelled packets, validating on {len(val_idx)}")
    state = ModelState(arch, n_classes=n_classes, seed=cfg.seed, ssl_heads=False)
    report = _fit(state, frames, labels, train_idx, val_idx, stats, cfg, 1.0, progress)
    return state, report
