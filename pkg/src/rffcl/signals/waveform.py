"""
QPSK/OFDM packet construction and transmitter IQ imbalance

Everything stays in the frequency domain: a packet is one long training sequence (LTS)
on the 52 active subcarriers of a 64-point FFT grid, followed by five QPSK data frames
on the same subcarriers. The FFT itself is never materialised because the channel model
downstream is per-subcarrier multiplicative.

The device fingerprint is the (A dB, P degree) IQ imbalance pair, applied as

    x_BB = (g_I cos(theta) x_I - g_Q sin(theta) x_Q) + j (g_I sin(theta) x_I + g_Q cos(theta) x_Q)

with g_I = 10^(0.5 A / 20), g_Q = 10^(-0.5 A / 20) and theta = 0.5 P pi / 180.
"""
import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Sequence

import numpy as np

from .. import ConfigError, InputShapeError
from . import Seed

logger = logging.getLogger(__name__)

FFT_LEN = 64
N_SUBCARRIERS = 52
N_DATA_FRAMES = 5
N_SYMBOLS = N_SUBCARRIERS * N_DATA_FRAMES

# Wi-Fi style occupancy: +-1..26, DC and the guard band left empty
ACTIVE_SUBCARRIERS = np.concatenate(
    [np.arange(-N_SUBCARRIERS // 2, 0), np.arange(1, N_SUBCARRIERS // 2 + 1)]
)

AMP_IMBALANCE_RANGE_DB = (-0.9, 0.9)
PHASE_IMBALANCE_RANGE_DEG = (-3.0, 3.0)

_LTS_SEED = 0x4C5453  # "LTS"


def qpsk_modulate(bits: np.ndarray, count: int) -> np.ndarray:
    """Gray-mapped, unit-modulus QPSK

    00 -> (1+j)/sqrt2, 01 -> (1-j)/sqrt2, 11 -> (-1-j)/sqrt2, 10 -> (-1+j)/sqrt2

    Args:
      bits: 0/1 vector of length 2 * count, consumed in (I, Q) pairs
      count: number of symbols

    Returns:
      complex128 vector of `count` symbols

    >>> qpsk_modulate(np.array([0, 0, 1, 1]), 2) * np.sqrt(2)
    array([ 1.+1.j, -1.-1.j])
    """
    bits = np.asarray(bits)
    if bits.ndim != 1 or bits.shape[0] != 2 * count:
        raise InputShapeError(
            f"Need exactly {2 * count} bits for {count} QPSK symbols, got shape {bits.shape}"
        )
    if np.any((bits != 0) & (bits != 1)):
        raise InputShapeError("QPSK bits must be 0 or 1")
    pairs = bits.reshape(count, 2).astype(np.float64)
    return ((1.0 - 2.0 * pairs[:, 0]) + 1j * (1.0 - 2.0 * pairs[:, 1])) / np.sqrt(2.0)


def _make_lts() -> np.ndarray:
    rng = np.random.default_rng(_LTS_SEED)
    lts = qpsk_modulate(rng.integers(0, 2, 2 * N_SUBCARRIERS), N_SUBCARRIERS)
    lts.setflags(write=False)
    return lts


#: Known pilot, identical for every packet and every device
LTS = _make_lts()


@dataclass(frozen=True)
class DeviceProfile:
    """Per-device IQ imbalance, the ground-truth fingerprint

    >>> DeviceProfile(0, 0.0, 0.0).g_i
    1.0
    """

    device_id: int
    amp_imbalance_db: float
    phase_imbalance_deg: float

    def __post_init__(self):
        lo, hi = AMP_IMBALANCE_RANGE_DB
        if not lo <= self.amp_imbalance_db <= hi:
            raise ConfigError(
                f"Amplitude imbalance {self.amp_imbalance_db} dB outside [{lo}, {hi}]"
            )
        lo, hi = PHASE_IMBALANCE_RANGE_DEG
        if not lo <= self.phase_imbalance_deg <= hi:
            raise ConfigError(
                f"Phase imbalance {self.phase_imbalance_deg} deg outside [{lo}, {hi}]"
            )
        if self.device_id < 0:
            raise ConfigError(f"device_id must be non-negative, got {self.device_id}")

    @property
    def g_i(self) -> float:
        return float(10 ** (0.5 * self.amp_imbalance_db / 20))

    @property
    def g_q(self) -> float:
        return float(10 ** (-0.5 * self.amp_imbalance_db / 20))

    @property
    def theta(self) -> float:
        return float(0.5 * self.phase_imbalance_deg * np.pi / 180)

    def to_dict(self) -> dict:
        return {
            "device_id": self.device_id,
            "amp_imbalance_db": self.amp_imbalance_db,
            "phase_imbalance_deg": self.phase_imbalance_deg,
        }


@dataclass(frozen=True)
class DeviceSet:
    """Ordered set of transmitters; labels are positions in [0, C)"""

    devices: List[DeviceProfile] = field(default_factory=list)

    def __post_init__(self):
        ids = [d.device_id for d in self.devices]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"Duplicate device ids in {ids}")
        if sorted(ids) != list(range(len(ids))):
            raise ConfigError(f"Device ids must cover 0..C-1, got {ids}")

    @classmethod
    def default(cls, n_devices: int = 7) -> "DeviceSet":
        """Evenly spaced grid across both imbalance ranges, A_k paired with P_k

        >>> [d.phase_imbalance_deg for d in DeviceSet.default(7)]
        [-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]
        """
        if n_devices < 2:
            raise ConfigError(f"Need at least two devices, got {n_devices}")
        amps = np.linspace(*AMP_IMBALANCE_RANGE_DB, n_devices)
        phases = np.linspace(*PHASE_IMBALANCE_RANGE_DEG, n_devices)
        return cls(
            [
                DeviceProfile(k, round(float(a), 12), round(float(p), 12))
                for k, (a, p) in enumerate(zip(amps, phases))
            ]
        )

    @classmethod
    def from_dicts(cls, records: Sequence[dict]) -> "DeviceSet":
        return cls([DeviceProfile(**r) for r in records])

    def to_dicts(self) -> List[dict]:
        return [d.to_dict() for d in self.devices]

    def __len__(self) -> int:
        return len(self.devices)

    def __iter__(self) -> Iterator[DeviceProfile]:
        return iter(self.devices)

    def __getitem__(self, item: int) -> DeviceProfile:
        return self.devices[item]


@dataclass(frozen=True)
class FrequencyFrame:
    """One packet on the active subcarriers: LTS pilot plus five QPSK data frames"""

    pilot: np.ndarray
    data: np.ndarray
    fft_len: int = FFT_LEN

    def __post_init__(self):
        if self.pilot.shape != (N_SUBCARRIERS,):
            raise InputShapeError(f"pilot must be ({N_SUBCARRIERS},), got {self.pilot.shape}")
        if self.data.shape != (N_DATA_FRAMES, N_SUBCARRIERS):
            raise InputShapeError(
                f"data must be ({N_DATA_FRAMES}, {N_SUBCARRIERS}), got {self.data.shape}"
            )

    def stacked(self) -> np.ndarray:
        """Pilot row followed by the data rows, (1 + frames) x subcarriers"""
        return np.vstack([self.pilot[None, :], self.data])


@dataclass(frozen=True)
class ImpairedFrame(FrequencyFrame):
    """A FrequencyFrame after the transmitter's IQ imbalance"""

    source_device: int = -1


def build_frame(rng_seed: Seed) -> FrequencyFrame:
    """Assemble the fixed LTS and seeded random QPSK data into a packet

    >>> build_frame(3).data.shape
    (5, 52)
    """
    rng = np.random.default_rng(rng_seed)
    bits = rng.integers(0, 2, 2 * N_SYMBOLS)
    data = qpsk_modulate(bits, N_SYMBOLS).reshape(N_DATA_FRAMES, N_SUBCARRIERS)
    return FrequencyFrame(pilot=LTS.copy(), data=data)


def iq_imbalance(x: np.ndarray, profile: DeviceProfile) -> np.ndarray:
    """Elementwise IQ imbalance of any complex array"""
    g_i, g_q, theta = profile.g_i, profile.g_q, profile.theta
    x_i, x_q = np.real(x), np.imag(x)
    c, s = np.cos(theta), np.sin(theta)
    return (g_i * c * x_i - g_q * s * x_q) + 1j * (g_i * s * x_i + g_q * c * x_q)


def apply_iq_imbalance(frame: FrequencyFrame, profile: DeviceProfile) -> ImpairedFrame:
    """Impair everything the transmitter sends, pilot included

    >>> f = build_frame(0)
    >>> bool(np.array_equal(apply_iq_imbalance(f, DeviceProfile(0, 0.0, 0.0)).data, f.data))
    True
    """
    return ImpairedFrame(
        pilot=iq_imbalance(frame.pilot, profile),
        data=iq_imbalance(frame.data, profile),
        fft_len=frame.fft_len,
        source_device=profile.device_id,
    )
