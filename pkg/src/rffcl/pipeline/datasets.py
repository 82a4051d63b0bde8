"""
Simulated packet datasets and their on-disk format

A dataset file is the shared container framing with magic `RFFDSET1`. The JSON header
holds the version, device profiles, channel config, packets per device, seed and
creation time. The payload is, per packet, `pilot_rx` (52) then `data_rx` (5 x 52) as
little-endian float32 interleaved re/im, followed by one int32 label per packet.
"""
import datetime
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import tqdm

from .. import FormatError, NumericError, poolmap
from ..signals.chanest import DEEP_FADE_EPS, ls_estimate
from ..signals.channel import ChannelConfig, ReceivedFrame, transmit
from ..signals.waveform import N_DATA_FRAMES, N_SUBCARRIERS, DeviceSet, build_frame
from ..utils.io import PathLike, read_container, write_container

logger = logging.getLogger(__name__)

DATASET_MAGIC = b"RFFDSET1"
DATASET_VERSION = 1
ROWS_PER_PACKET = 1 + N_DATA_FRAMES
MAX_ATTEMPTS = 16


@dataclass
class PacketDataset:
    """Received packets of every device, labels are device ids"""

    frames: List[ReceivedFrame]
    labels: np.ndarray
    devices: DeviceSet
    channel: ChannelConfig
    packets_per_device: int
    seed: int
    role: str = "source"
    created: Optional[str] = None
    config_hash: Optional[str] = None

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def n_classes(self) -> int:
        return len(self.devices)

    def header(self) -> Dict:
        return {
            "version": DATASET_VERSION,
            "role": self.role,
            "devices": self.devices.to_dicts(),
            "channel": self.channel.to_dict(),
            "packets_per_device": self.packets_per_device,
            "n_packets": len(self),
            "seed": self.seed,
            "created": self.created,
            "config_hash": self.config_hash,
        }

    def counts(self) -> Dict[int, int]:
        ids, counts = np.unique(self.labels, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}


def _packet(key: Tuple[int, int], devices: DeviceSet, channel: ChannelConfig, seed_key: Sequence[int]) -> Tuple[ReceivedFrame, int]:
    """One packet of device `k`, redrawn while its LS estimate is in a deep fade"""
    k, j = key
    for attempt in range(MAX_ATTEMPTS):
        frame_seed, link_seed = np.random.SeedSequence([*seed_key, k, j, attempt]).spawn(2)
        y = transmit(build_frame(frame_seed), devices[k], channel, link_seed)
        if np.min(np.abs(ls_estimate(y.pilot_rx).h_hat)) > DEEP_FADE_EPS:
            return y, attempt
    raise NumericError(f"Device {k} packet {j} stayed in a deep fade for {MAX_ATTEMPTS} draws")


def generate_dataset(
    devices: DeviceSet,
    channel: ChannelConfig,
    packets_per_device: int,
    seed: int,
    role: str = "source",
    stream: int = 0,
    max_workers: Optional[int] = None,
    progress: bool = False,
    config_hash: Optional[str] = None,
) -> PacketDataset:
    """Simulate `packets_per_device` packets for every device

    Packet j of device k is seeded from (seed, stream, k, j), so the result does not
    depend on the number of workers.
    """
    keys = [(k, j) for k in range(len(devices)) for j in range(packets_per_device)]
    results = poolmap(
        _packet,
        keys,
        max_workers=max_workers,
        progress=(lambda it, total: tqdm.tqdm(it, total=total, desc=f"gen[{role}]")) if progress else None,
        devices=devices,
        channel=channel,
        seed_key=(seed, stream),
    )
    frames = [results[key][0] for key in keys]
    redraws = sum(results[key][1] for key in keys)
    if redraws:
        logger.warning(f"Redrew {redraws} deep-faded packets in the {role} dataset")
    labels = np.array([k for k, _ in keys], dtype=np.int64)
    logger.info(f"Generated {len(frames)} {role} packets from {len(devices)} devices")
    return PacketDataset(
        frames,
        labels,
        devices,
        channel,
        packets_per_device,
        seed,
        role=role,
        created=datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds"),
        config_hash=config_hash,
    )


def write_dataset(dataset: PacketDataset, path: PathLike) -> Path:
    stacked = np.stack([f.stacked() for f in dataset.frames]).astype("<c8")
    payload = stacked.view("<f4").tobytes() + dataset.labels.astype("<i4").tobytes()
    logger.debug(f"Writing {len(dataset)} packets to {path}")
    return write_container(path, DATASET_MAGIC, dataset.header(), payload)


def read_dataset_header(path: PathLike) -> Tuple[Dict, bytes]:
    header, payload = read_container(path, DATASET_MAGIC)
    if header.get("version") != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {header.get('version')}")
    return header, payload


def read_dataset(path: PathLike) -> PacketDataset:
    header, payload = read_dataset_header(path)
    n = int(header["n_packets"])
    floats = n * ROWS_PER_PACKET * N_SUBCARRIERS * 2
    expected = floats * 4 + n * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected} for {n} packets")
    samples = np.frombuffer(payload[: floats * 4], dtype="<f4").view("<c8")
    samples = samples.astype(np.complex64).reshape(n, ROWS_PER_PACKET, N_SUBCARRIERS)
    labels = np.frombuffer(payload[floats * 4 :], dtype="<i4").astype(np.int64)

    devices = DeviceSet.from_dicts(header["devices"])
    channel = ChannelConfig.from_dict(header["channel"])
    if labels.size and (labels.min() < 0 or labels.max() >= len(devices)):
        raise FormatError(f"{path}: labels outside [0, {len(devices)})")
    frames = [
        ReceivedFrame.from_stacked(samples[i], source_device=int(labels[i]), snr_db=channel.base_snr_db)
        for i in range(n)
    ]
    return PacketDataset(
        frames,
        labels,
        devices,
        channel,
        int(header["packets_per_device"]),
        int(header["seed"]),
        role=header.get("role", "source"),
        created=header.get("created"),
        config_hash=header.get("config_hash"),
    )
