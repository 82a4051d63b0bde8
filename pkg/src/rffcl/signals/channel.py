"""
Tapped delay line (TDL) fading channel with exponential power delay profile and Jakes
Doppler, applied per subcarrier, plus AWGN

A packet spans 1 + 5 frame-times (LTS then the five data frames). Each tap starts as a
circularly symmetric complex Gaussian with variance p_l and evolves between frame-times
as a first-order Gauss-Markov process whose one-step correlation is the Jakes
autocorrelation J0(2 pi f_d dt). The frequency response on the active subcarriers is the
DFT of the taps on the 64-point grid.
"""
import logging
from dataclasses import asdict, dataclass, field
from functools import lru_cache, singledispatch
from typing import Optional, Tuple

import numpy as np
from scipy import optimize, special

from .. import ConfigError, InputShapeError
from . import Seed, child_rngs
from .waveform import (
    ACTIVE_SUBCARRIERS,
    FFT_LEN,
    N_DATA_FRAMES,
    N_SUBCARRIERS,
    DeviceProfile,
    FrequencyFrame,
    ImpairedFrame,
    apply_iq_imbalance,
)

logger = logging.getLogger(__name__)

N_FRAME_TIMES = 1 + N_DATA_FRAMES


@dataclass(frozen=True)
class ChannelConfig:
    """TDL channel settings

    The defaults are a 20 MHz, 64-FFT grid (50 ns tap spacing, 8 taps) with 30 ns RMS
    delay spread, Doppler uniform in [0, 5] Hz and 1 ms between frame-times.
    """

    rms_delay_ns: float = 30.0
    sample_period_ns: float = 50.0
    num_taps: int = 8
    doppler_hz_range: Tuple[float, float] = (0.0, 5.0)
    frame_interval_s: float = 1e-3
    base_snr_db: float = 20.0

    def __post_init__(self):
        # JSON round trips hand back lists
        object.__setattr__(self, "doppler_hz_range", tuple(float(d) for d in self.doppler_hz_range))
        if self.rms_delay_ns <= 0:
            raise ConfigError(f"rms_delay_ns must be positive, got {self.rms_delay_ns}")
        if self.sample_period_ns <= 0:
            raise ConfigError(f"sample_period_ns must be positive, got {self.sample_period_ns}")
        if self.num_taps < 1:
            raise ConfigError(f"num_taps must be >= 1, got {self.num_taps}")
        lo, hi = self.doppler_hz_range
        if lo < 0 or hi < lo:
            raise ConfigError(f"Invalid doppler range {self.doppler_hz_range}")
        if self.frame_interval_s < 0:
            raise ConfigError(f"frame_interval_s must be >= 0, got {self.frame_interval_s}")
        if not np.isfinite(self.base_snr_db):
            raise ConfigError("base_snr_db must be finite")
        if self.num_taps > 1:
            uniform = rms_delay_spread(np.ones(self.num_taps), self.sample_period_ns)
            if self.rms_delay_ns >= uniform:
                raise ConfigError(
                    f"rms_delay_ns {self.rms_delay_ns} not reachable with {self.num_taps} taps "
                    f"at {self.sample_period_ns} ns (max {uniform:.1f} ns)"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["doppler_hz_range"] = list(self.doppler_hz_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelConfig":
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(f"Bad channel config {d}: {e}") from e


@dataclass(frozen=True)
class ChannelRealization:
    """One packet's channel: taps and subcarrier gains per frame-time (row 0 is the LTS)"""

    taps: np.ndarray
    h_freq: np.ndarray
    doppler_hz: float

    @property
    def pilot_gain(self) -> np.ndarray:
        return self.h_freq[0]

    @property
    def data_gain(self) -> np.ndarray:
        return self.h_freq[1:]


@dataclass(frozen=True)
class ReceivedFrame:
    """What the receiver sees; `truth`, `source_device` are simulation-only metadata

    `snr_db` is the SNR of the noise already present (inf for a noiseless frame).
    """

    pilot_rx: np.ndarray
    data_rx: np.ndarray
    source_device: int = -1
    snr_db: float = float("inf")
    truth: Optional[ChannelRealization] = field(default=None, repr=False)

    def __post_init__(self):
        if self.pilot_rx.shape != (N_SUBCARRIERS,):
            raise InputShapeError(f"pilot_rx must be ({N_SUBCARRIERS},), got {self.pilot_rx.shape}")
        if self.data_rx.shape != (N_DATA_FRAMES, N_SUBCARRIERS):
            raise InputShapeError(
                f"data_rx must be ({N_DATA_FRAMES}, {N_SUBCARRIERS}), got {self.data_rx.shape}"
            )

    def stacked(self) -> np.ndarray:
        return np.vstack([self.pilot_rx[None, :], self.data_rx])

    @classmethod
    def from_stacked(cls, stacked: np.ndarray, **kwargs) -> "ReceivedFrame":
        return cls(pilot_rx=stacked[0], data_rx=stacked[1:], **kwargs)


def rms_delay_spread(powers: np.ndarray, sample_period_ns: float) -> float:
    """RMS delay spread of a discrete power delay profile

    >>> rms_delay_spread(np.array([1.0]), 50.0)
    0.0
    >>> rms_delay_spread(np.array([1.0, 1.0]), 50.0)
    25.0
    """
    p = np.asarray(powers, dtype=np.float64)
    p = p / p.sum()
    tau = np.arange(p.shape[0]) * sample_period_ns
    mean = float(np.sum(p * tau))
    return float(np.sqrt(max(np.sum(p * tau**2) - mean**2, 0.0)))


@lru_cache(maxsize=32)
def _decay_constant_ns(rms_delay_ns: float, sample_period_ns: float, num_taps: int) -> float:
    taps = np.arange(num_taps)

    def mismatch(decay_ns):
        return rms_delay_spread(np.exp(-taps * sample_period_ns / decay_ns), sample_period_ns) - rms_delay_ns

    try:
        return optimize.brentq(mismatch, 1e-3 * sample_period_ns, 1e4 * sample_period_ns, xtol=1e-12)
    except ValueError as e:
        raise ConfigError(
            f"Cannot fit an exponential PDP with {rms_delay_ns} ns RMS spread on {num_taps} taps"
        ) from e


def power_delay_profile(cfg: ChannelConfig) -> np.ndarray:
    """Normalised exponential PDP, p_l proportional to exp(-l T_s / tau_d)

    tau_d is calibrated so the truncated profile has exactly `cfg.rms_delay_ns` of RMS
    delay spread.

    >>> round(rms_delay_spread(power_delay_profile(ChannelConfig()), 50.0), 6)
    30.0
    """
    if cfg.num_taps == 1:
        return np.ones(1)
    decay = _decay_constant_ns(cfg.rms_delay_ns, cfg.sample_period_ns, cfg.num_taps)
    p = np.exp(-np.arange(cfg.num_taps) * cfg.sample_period_ns / decay)
    return p / p.sum()


def dft_matrix(num_taps: int) -> np.ndarray:
    """Taps -> active subcarrier gains, (num_taps, 52)"""
    lags = np.arange(num_taps)[:, None]
    return np.exp(-2j * np.pi * lags * ACTIVE_SUBCARRIERS[None, :] / FFT_LEN)


def _complex_gaussian(rng: np.random.Generator, shape, variance) -> np.ndarray:
    scale = np.sqrt(np.asarray(variance) / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def sample_channels(
    cfg: ChannelConfig,
    n: int,
    rng: np.random.Generator,
    doppler_hz: Optional[float] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised draw of `n` packet channels

    Returns:
      taps (n, frame-times, L), h_freq (n, frame-times, 52), doppler (n,)
    """
    p = power_delay_profile(cfg)
    if doppler_hz is None:
        doppler = rng.uniform(*cfg.doppler_hz_range, size=n)
    else:
        doppler = np.full(n, float(doppler_hz))
    rho = special.j0(2 * np.pi * doppler * cfg.frame_interval_s)
    innovation_scale = np.sqrt(np.clip(1.0 - rho**2, 0.0, None))

    taps = np.empty((n, N_FRAME_TIMES, cfg.num_taps), dtype=np.complex128)
    taps[:, 0] = _complex_gaussian(rng, (n, cfg.num_taps), p)
    for t in range(1, N_FRAME_TIMES):
        innovation = _complex_gaussian(rng, (n, cfg.num_taps), p)
        taps[:, t] = rho[:, None] * taps[:, t - 1] + innovation_scale[:, None] * innovation
    h_freq = taps @ dft_matrix(cfg.num_taps)
    return taps, h_freq, doppler


def sample_channel(
    cfg: ChannelConfig, rng_seed: Seed, doppler_hz: Optional[float] = None
) -> ChannelRealization:
    """Draw one packet's channel; `doppler_hz` pins f_d instead of drawing it"""
    rng = np.random.default_rng(rng_seed)
    taps, h_freq, doppler = sample_channels(cfg, 1, rng, doppler_hz)
    return ChannelRealization(taps=taps[0], h_freq=h_freq[0], doppler_hz=float(doppler[0]))


def apply_channel(frame: FrequencyFrame, ch: ChannelRealization) -> ReceivedFrame:
    """Noiseless y = h x_BB per subcarrier, pilot row for the LTS and row r for data frame r"""
    if ch.h_freq.shape != (N_FRAME_TIMES, N_SUBCARRIERS):
        raise InputShapeError(
            f"h_freq must be ({N_FRAME_TIMES}, {N_SUBCARRIERS}), got {ch.h_freq.shape}"
        )
    return ReceivedFrame(
        pilot_rx=ch.pilot_gain * frame.pilot,
        data_rx=ch.data_gain * frame.data,
        source_device=getattr(frame, "source_device", -1),
        truth=ch,
    )


@singledispatch
def add_awgn(signal, snr_db: float, rng_seed: Seed):
    """Add circular complex Gaussian noise

    For an array, sigma^2 = P_sig / 10^(snr/10) with P_sig the mean symbol power of the
    input. For a `ReceivedFrame` that already carries noise at `snr_db` s_0, noise is
    topped up so the result sits at `snr_db` overall; asking for an SNR at or above s_0
    returns the frame unchanged.
    """
    raise InputShapeError(f"Cannot add noise to {type(signal).__name__}")


def _check_snr(snr_db: float):
    if not np.isfinite(snr_db):
        raise ConfigError(f"snr_db must be finite, got {snr_db}")


@add_awgn.register
def _(signal: np.ndarray, snr_db: float, rng_seed: Seed) -> np.ndarray:
    _check_snr(snr_db)
    rng = np.random.default_rng(rng_seed)
    p_sig = float(np.mean(np.abs(signal) ** 2))
    variance = p_sig / 10 ** (snr_db / 10)
    return signal + _complex_gaussian(rng, signal.shape, variance)


@add_awgn.register
def _(signal: ReceivedFrame, snr_db: float, rng_seed: Seed) -> ReceivedFrame:
    _check_snr(snr_db)
    current = signal.snr_db
    if np.isfinite(current) and snr_db >= current:
        return signal
    stacked = signal.stacked()
    if np.isfinite(current):
        p_clean = float(np.mean(np.abs(stacked) ** 2)) / (1 + 10 ** (-current / 10))
        variance = p_clean * (10 ** (-snr_db / 10) - 10 ** (-current / 10))
        noisy = stacked + _complex_gaussian(np.random.default_rng(rng_seed), stacked.shape, variance)
    else:
        noisy = add_awgn(stacked, snr_db, rng_seed)
    return ReceivedFrame.from_stacked(
        noisy, source_device=signal.source_device, snr_db=float(snr_db), truth=signal.truth
    )


def transmit(
    frame: FrequencyFrame,
    profile: DeviceProfile,
    cfg: ChannelConfig,
    rng_seed: Seed,
    doppler_hz: Optional[float] = None,
) -> ReceivedFrame:
    """IQ imbalance -> fading channel -> AWGN at the configured base SNR"""
    channel_rng, noise_rng = child_rngs(rng_seed, 2)
    impaired: ImpairedFrame = apply_iq_imbalance(frame, profile)
    taps, h_freq, doppler = sample_channels(cfg, 1, channel_rng, doppler_hz)
    ch = ChannelRealization(taps=taps[0], h_freq=h_freq[0], doppler_hz=float(doppler[0]))
    clean = apply_channel(impaired, ch)
    return add_awgn(clean, cfg.base_snr_db, noise_rng)
