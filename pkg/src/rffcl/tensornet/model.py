"""
The fingerprinting network: a four-block 1D CNN backbone, the projection and prediction
MLPs used during contrastive pretraining, and the classifier head used for fine-tuning.

`ModelState` owns all of them plus the optimiser moments, epoch counter and training rng,
and is what checkpoints store.
"""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .. import ConfigError, FormatError, InputShapeError, NumericError
from ..signals.waveform import N_SYMBOLS
from ..utils.io import PathLike, read_container, write_container
from .layers import (
    AdaptiveAvgPool1d,
    BatchNorm1d,
    Conv1d,
    Flatten,
    L2Normalize,
    Linear,
    MaxPool1d,
    Module,
    ReLU,
    Sequential,
)
from .optim import Adam, ParamGroup
from .tensor import DEFAULT_DTYPE, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RFFCKPT1"
CHECKPOINT_VERSION = 1
N_BLOCKS = 4
BYTES_PER_PARAMETER = 4

COMPONENTS = ("backbone", "projector", "predictor", "classifier")


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture of the backbone and the heads hanging off it

    Each block is conv(k, same padding) -> batchnorm -> ReLU -> maxpool, followed by
    adaptive average pooling to length 1, flatten and L2 normalisation. With the
    default widths the backbone holds about 618k parameters, 2.47 MB at 32 bits.
    """

    in_channels: int = 2
    input_length: int = N_SYMBOLS
    widths: Tuple[int, ...] = (64, 128, 256, 640)
    kernel_sizes: Tuple[int, ...] = (3, 3, 3, 3)
    pool_factors: Tuple[int, ...] = (2, 2, 2, 2)
    projection_dim: int = 512
    prediction_hidden: int = 128
    classifier_hidden: int = 128

    def __post_init__(self):
        for name in ("widths", "kernel_sizes", "pool_factors"):
            value = tuple(int(v) for v in getattr(self, name))
            object.__setattr__(self, name, value)
            if len(value) != N_BLOCKS:
                raise ConfigError(f"{name} needs {N_BLOCKS} entries, got {len(value)}")
            if min(value) < 1:
                raise ConfigError(f"{name} must be positive, got {value}")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ConfigError(f"Kernel sizes must be odd for same padding, got {self.kernel_sizes}")
        length = self.input_length
        for pool in self.pool_factors:
            length //= pool
        if length < 1:
            raise ConfigError(f"Input length {self.input_length} is pooled away by {self.pool_factors}")
        if min(self.in_channels, self.projection_dim, self.prediction_hidden, self.classifier_hidden) < 1:
            raise ConfigError("Layer sizes must be positive")

    @property
    def embedding_dim(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown backbone keys: {sorted(unknown)}")
        try:
            return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
        except TypeError as e:
            raise ConfigError(f"Bad backbone config {d}: {e}") from e


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.config = config
        blocks, in_ch = [], config.in_channels
        for width, kernel, pool in zip(config.widths, config.kernel_sizes, config.pool_factors):
            blocks.append(
                Sequential(
                    Conv1d(in_ch, width, kernel, rng, dtype=dtype),
                    BatchNorm1d(width, dtype=dtype),
                    ReLU(),
                    MaxPool1d(pool),
                )
            )
            in_ch = width
        self.blocks = Sequential(*blocks)
        self.pool = AdaptiveAvgPool1d(1)
        self.flatten = Flatten()
        self.normalize = L2Normalize()

    def forward(self, x: Tensor) -> Tensor:
        expected = (self.config.in_channels, self.config.input_length)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise InputShapeError(f"Backbone expects (N, {expected[0]}, {expected[1]}), got {x.shape}")
        return self.normalize(self.flatten(self.pool(self.blocks(x))))


class ProjectionMLP(Sequential):
    """Linear -> BN -> ReLU -> Linear -> BN"""

    def __init__(self, in_dim: int, dim: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__(
            Linear(in_dim, dim, rng, dtype),
            BatchNorm1d(dim, dtype=dtype),
            ReLU(),
            Linear(dim, dim, rng, dtype),
            BatchNorm1d(dim, dtype=dtype),
        )


class PredictionMLP(Sequential):
    """Bottleneck MLP: Linear -> BN -> ReLU -> Linear"""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__(
            Linear(dim, hidden, rng, dtype),
            BatchNorm1d(hidden, dtype=dtype),
            ReLU(),
            Linear(hidden, dim, rng, dtype),
        )


class ClassifierHead(Sequential):
    def __init__(self, in_dim: int, hidden: int, n_classes: int, rng: np.random.Generator, dtype=DEFAULT_DTYPE):
        super().__init__(
            Linear(in_dim, hidden, rng, dtype),
            ReLU(),
            Linear(hidden, n_classes, rng, dtype),
        )


class ModelState:
    """Everything a training run mutates

    >>> state = ModelState(seed=0)
    >>> round(state.parameter_bytes() / 1e6, 2)
    2.47
    """

    def __init__(
        self,
        config: Optional[BackboneConfig] = None,
        n_classes: Optional[int] = None,
        seed: int = 0,
        dtype=DEFAULT_DTYPE,
        ssl_heads: bool = True,
    ):
        self.config = config or BackboneConfig()
        self.dtype = np.dtype(dtype)
        self.seed = int(seed)
        init_rng = np.random.default_rng([self.seed, 0])
        self.backbone = Backbone(self.config, init_rng, self.dtype)
        self.projector: Optional[Module] = None
        self.predictor: Optional[Module] = None
        self.classifier: Optional[Module] = None
        self.n_classes: Optional[int] = None
        if ssl_heads:
            self.projector = ProjectionMLP(self.config.embedding_dim, self.config.projection_dim, init_rng, self.dtype)
            self.predictor = PredictionMLP(self.config.projection_dim, self.config.prediction_hidden, init_rng, self.dtype)
        if n_classes is not None:
            self.attach_classifier(n_classes, seed=self.seed)
        self.optimizer: Optional[Adam] = None
        self.epoch = 0
        self.rng = np.random.default_rng([self.seed, 1])

    def attach_classifier(self, n_classes: int, seed: int = 0):
        """Fresh, randomly initialised classifier head for `n_classes` devices"""
        if n_classes < 2:
            raise ConfigError(f"Need at least two classes, got {n_classes}")
        self.n_classes = int(n_classes)
        rng = np.random.default_rng([int(seed), 2])
        self.classifier = ClassifierHead(
            self.config.embedding_dim, self.config.classifier_hidden, self.n_classes, rng, self.dtype
        )

    def drop_ssl_heads(self):
        """Keep the backbone, discard the projection and prediction MLPs"""
        self.projector = None
        self.predictor = None

    def components(self) -> Dict[str, Module]:
        return OrderedDict((name, getattr(self, name)) for name in COMPONENTS if getattr(self, name) is not None)

    def named_parameters(self, components=COMPONENTS) -> Iterator[Tuple[str, Tensor]]:
        for name, module in self.components().items():
            if name in components:
                yield from module.named_parameters(f"{name}.")

    def parameter_count(self, component: str = "backbone") -> int:
        return self.components()[component].parameter_count()

    def parameter_bytes(self, component: str = "backbone") -> int:
        return self.parameter_count(component) * BYTES_PER_PARAMETER

    def train(self, mode: bool = True) -> "ModelState":
        for module in self.components().values():
            module.train(mode)
        return self

    def eval(self) -> "ModelState":
        return self.train(False)

    def freeze_batch_norm(self, frozen: bool = True, component: str = "backbone"):
        for _, module in self.components()[component].named_modules():
            if isinstance(module, BatchNorm1d):
                module.frozen = frozen

    def _as_tensor(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.dtype)

    def forward_encoder(self, x: Union[Tensor, np.ndarray]) -> Tensor:
        """(N, 2, 260) -> L2-normalised (N, D) features"""
        return self.backbone(self._as_tensor(x))

    def forward_projector(self, features: Tensor) -> Tensor:
        if self.projector is None:
            raise ConfigError("This model has no projection MLP")
        return self.projector(features)

    def forward_predictor(self, z: Tensor) -> Tensor:
        if self.predictor is None:
            raise ConfigError("This model has no prediction MLP")
        return self.predictor(z)

    def forward_classifier(self, features: Tensor) -> Tensor:
        """Raw logits (N, C)"""
        if self.classifier is None:
            raise ConfigError("This model has no classifier head")
        return self.classifier(features)

    def _batched(self, x: np.ndarray, batch_size: int, fn) -> np.ndarray:
        was_training = self.backbone.training
        self.eval()
        try:
            out = [fn(self._as_tensor(x[i : i + batch_size])).data for i in range(0, len(x), batch_size)]
        finally:
            self.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, 0), dtype=self.dtype)

    def encode(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        """Eval-mode encoder features for a stack of equalised samples"""
        return self._batched(x, batch_size, self.forward_encoder)

    def logits(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        return self._batched(x, batch_size, lambda t: self.forward_classifier(self.forward_encoder(t)))

    def state_arrays(self, components=COMPONENTS) -> Dict[str, np.ndarray]:
        arrays = OrderedDict()
        for name, module in self.components().items():
            if name not in components:
                continue
            for key, value in module.state_dict().items():
                arrays[f"{name}.{key}"] = value
        return arrays

    def snapshot(self, components=COMPONENTS) -> Dict[str, Dict[str, np.ndarray]]:
        """Detached copies of the weights, for restoring the best epoch later"""
        return {
            name: {k: v.copy() for k, v in module.state_dict().items()}
            for name, module in self.components().items()
            if name in components
        }

    def restore(self, snapshot: Dict[str, Dict[str, np.ndarray]]):
        for name, state in snapshot.items():
            self.components()[name].load_state_dict(state)


def save_checkpoint(
    state: ModelState, path: PathLike, extra: Optional[dict] = None, components: Optional[Sequence[str]] = None
) -> Path:
    """JSON manifest plus one little-endian float32 blob, tensors in manifest order

    Restricting `components` (e.g. to the backbone alone) also leaves out the optimiser.
    """
    kept = [name for name in state.components() if components is None or name in components]
    arrays = OrderedDict(state.state_arrays(kept))
    optimizer = None
    if state.optimizer is not None and components is None:
        optimizer = {
            "step_count": state.optimizer.step_count,
            "betas": list(state.optimizer.betas),
            "eps": state.optimizer.eps,
            "groups": [
                {"name": g.name, "lr_scale": g.lr_scale, "params": list(g.params)} for g in state.optimizer.groups
            ],
        }
        for key, value in state.optimizer.state_arrays().items():
            arrays[f"optimizer.{key}"] = value

    tensors, chunks, offset = [], [], 0
    for name, value in arrays.items():
        flat = np.ascontiguousarray(value, dtype="<f4").ravel()
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset, "count": int(flat.size)})
        chunks.append(flat)
        offset += flat.size
    if not all(np.all(np.isfinite(c)) for c in chunks):
        raise NumericError("Refusing to checkpoint non-finite weights")

    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": state.config.to_dict(),
        "n_classes": state.n_classes if "classifier" in kept else None,
        "components": kept,
        "seed": state.seed,
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
        "optimizer": optimizer,
        "tensors": tensors,
        "extra": extra or {},
    }
    blob = np.concatenate(chunks).tobytes() if chunks else b""
    logger.debug(f"Writing {len(tensors)} tensors ({offset} floats) to {path}")
    return write_container(path, CHECKPOINT_MAGIC, manifest, blob)


def read_manifest(path: PathLike) -> Tuple[dict, np.ndarray]:
    manifest, payload = read_container(path, CHECKPOINT_MAGIC)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {manifest.get('format_version')}")
    blob = np.frombuffer(payload, dtype="<f4")
    expected = sum(t["count"] for t in manifest["tensors"])
    if blob.size != expected:
        raise FormatError(f"{path}: expected {expected} floats, found {blob.size}")
    return manifest, blob


def load_checkpoint(path: PathLike) -> ModelState:
    manifest, blob = read_manifest(path)
    components = manifest["components"]
    state = ModelState(
        BackboneConfig.from_dict(manifest["architecture"]),
        n_classes=manifest["n_classes"] if "classifier" in components else None,
        seed=manifest.get("seed", 0),
        ssl_heads="projector" in components,
    )
    if "predictor" not in components:
        state.predictor = None

    arrays = {
        t["name"]: blob[t["offset"] : t["offset"] + t["count"]].reshape(t["shape"]).astype(state.dtype)
        for t in manifest["tensors"]
    }
    for name, module in state.components().items():
        prefix = f"{name}."
        module.load_state_dict({k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)})

    state.epoch = int(manifest["epoch"])
    state.rng.bit_generator.state = manifest["rng_state"]
    opt = manifest.get("optimizer")
    if opt is not None:
        params = dict(state.named_parameters())
        state.optimizer = Adam(
            [ParamGroup(g["name"], {n: params[n] for n in g["params"]}, g["lr_scale"]) for g in opt["groups"]],
            betas=tuple(opt["betas"]),
            eps=opt["eps"],
        )
        prefix = "optimizer."
        state.optimizer.load_state_arrays(
            opt["step_count"], {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
        )
    return state
