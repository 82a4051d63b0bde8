"""
Run configuration

One JSON document describes a whole experiment. Absent keys take the dataclass
defaults below, unknown keys are rejected, and the CLI may override the mode, seed,
deterministic flag and output directory. The resolved configuration is hashed into
every output file.

Example::

    {
      "devices": {"count": 7},
      "dataset": {"packets_per_device": 200},
      "pretrain": {"epochs": 40},
      "mode": "mixed",
      "seed": 1
    }
"""
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

from .. import ConfigError
from ..learning.finetune import FinetuneConfig
from ..learning.simsiam import PretrainConfig
from ..signals.chanest import MIN_STATISTICS_SAMPLES, Mode
from ..signals.channel import ChannelConfig
from ..signals.waveform import DeviceSet
from ..tensornet.model import BackboneConfig
from ..utils.io import PathLike, config_hash, read_json

logger = logging.getLogger(__name__)


@dataclass
class DeviceSetSpec:
    """Either `count` evenly spaced devices or explicit profiles"""

    count: int = 7
    profiles: Optional[List[Dict[str, float]]] = None

    def build(self) -> DeviceSet:
        if self.profiles is not None:
            return DeviceSet.from_dicts(self.profiles)
        return DeviceSet.default(self.count)


@dataclass
class DatasetSpec:
    packets_per_device: int = 1000
    mmse_samples: int = MIN_STATISTICS_SAMPLES

    def __post_init__(self):
        if self.packets_per_device < 2:
            raise ConfigError(f"packets_per_device must be >= 2, got {self.packets_per_device}")
        if self.mmse_samples < MIN_STATISTICS_SAMPLES:
            raise ConfigError(f"mmse_samples must be >= {MIN_STATISTICS_SAMPLES}, got {self.mmse_samples}")


@dataclass
class EvalConfig:
    snr_grid_db: List[float] = field(default_factory=lambda: [0.0, 5.0, 10.0, 15.0, 20.0])
    export_features: bool = True
    batch_size: int = 512

    def __post_init__(self):
        self.snr_grid_db = [float(s) for s in self.snr_grid_db]
        if not self.snr_grid_db:
            raise ConfigError("snr_grid_db must not be empty")


def _default_target_channel() -> ChannelConfig:
    # a different multipath and Doppler regime from the pretraining channel
    return ChannelConfig(rms_delay_ns=50.0, doppler_hz_range=(5.0, 10.0))


@dataclass
class RunConfig:
    devices: DeviceSetSpec = field(default_factory=DeviceSetSpec)
    source_channel: ChannelConfig = field(default_factory=ChannelConfig)
    target_channel: ChannelConfig = field(default_factory=_default_target_channel)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    mode: Mode = Mode.MIXED
    seed: int = 0
    deterministic: bool = False
    out: str = "runs/default"

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.source_channel == self.target_channel:
            logger.warning("Source and target channels are identical; evaluation is not cross-scenario")
        self.sync()

    def sync(self):
        """Push the run-level mode, seed and threading choice into the phase configs"""
        self.pretrain.mode = self.mode if self.mode is not Mode.SUPERVISED else Mode.MIXED
        self.pretrain.seed = self.seed
        self.finetune.seed = self.seed
        workers = 1 if self.deterministic else None
        self.pretrain.workers = workers
        self.finetune.workers = workers

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def n_devices(self) -> int:
        return len(self.devices.build())

    def to_dict(self) -> Dict[str, Any]:
        d = {
            "devices": dataclasses.asdict(self.devices),
            "source_channel": self.source_channel.to_dict(),
            "target_channel": self.target_channel.to_dict(),
            "dataset": dataclasses.asdict(self.dataset),
            "backbone": self.backbone.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "mode": self.mode.value,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "out": self.out,
        }
        # derived from the run-level fields above
        for phase in ("pretrain", "finetune"):
            for key in ("seed", "workers", "mode"):
                d[phase].pop(key, None)
        return d

    @property
    def hash(self) -> str:
        """Identifies the experiment; the output directory does not take part"""
        d = self.to_dict()
        d.pop("out")
        return config_hash(d)


_SECTIONS = {
    "devices": DeviceSetSpec,
    "dataset": DatasetSpec,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "eval": EvalConfig,
}


def _build(cls, values: Dict[str, Any], section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"Section {section!r} must be an object")
    unknown = set(values) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"Unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Bad {section!r} section: {e}") from e


def from_dict(d: Dict[str, Any], **overrides) -> RunConfig:
    """Build a RunConfig from a parsed document; `None` overrides are ignored"""
    d = dict(d)
    d.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(d) - {f.name for f in dataclasses.fields(RunConfig)}
    if unknown:
        raise ConfigError(f"Unknown configuration keys: {sorted(unknown)}")
    kwargs: Dict[str, Any] = {}
    for key, cls in _SECTIONS.items():
        if key in d:
            kwargs[key] = _build(cls, d[key], key)
    for key in ("source_channel", "target_channel"):
        if key in d:
            kwargs[key] = ChannelConfig.from_dict(d[key])
    if "backbone" in d:
        kwargs["backbone"] = BackboneConfig.from_dict(d["backbone"])
    for key in ("mode", "seed", "deterministic", "out"):
        if key in d:
            kwargs[key] = d[key]
    try:
        return RunConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def load_config(path: Optional[PathLike] = None, **overrides) -> RunConfig:
    """Read a JSON run configuration (or start from defaults) and apply CLI overrides"""
    document = read_json(path) if path is not None else {}
    if not isinstance(document, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object")
    config = from_dict(document, **overrides)
    logger.debug(f"Resolved configuration {config.hash}")
    return config
