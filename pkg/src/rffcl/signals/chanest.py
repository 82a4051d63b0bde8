"""
Pilot-based channel estimation, equalisation and the residual-channel augmentation

LS divides the received LTS by the known one. MMSE filters the LS estimate with channel
statistics, W = R_hhls (R_hh + I / SNR)^-1. Equalising a packet with an imperfect
estimate leaves x_hat = x_BB + dh, and it is this residual dh, different for LS and
MMSE, that makes the two halves of a positive pair.

An equalised packet is laid out as a real 2 x 260 array: row 0 is I, row 1 is Q, columns
run frame-major over the 5 data frames of 52 subcarriers.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .. import (
    ConfigError,
    DeepFadeError,
    DegeneratePilotError,
    FormatError,
    InputShapeError,
    NumericError,
    memoize,
)
from ..utils.io import PathLike, read_container, write_container
from . import Seed, child_rngs
from .channel import ChannelConfig, ReceivedFrame, add_awgn, sample_channels
from .waveform import LTS, N_DATA_FRAMES, N_SUBCARRIERS, N_SYMBOLS

logger = logging.getLogger(__name__)

DEEP_FADE_EPS = 1e-9
MIN_STATISTICS_SAMPLES = 10_000
MMSE_MAGIC = b"RFFMMSE1"


class Estimator(str, Enum):
    LS = "ls"
    MMSE = "mmse"


class Mode(str, Enum):
    """Which estimators produce the two views of a positive pair"""

    LS_ONLY = "ls_only"
    MMSE_ONLY = "mmse_only"
    MIXED = "mixed"
    SUPERVISED = "supervised"

    @property
    def estimators(self) -> Tuple[Estimator, Estimator]:
        if self is Mode.LS_ONLY:
            return Estimator.LS, Estimator.LS
        if self is Mode.MMSE_ONLY:
            return Estimator.MMSE, Estimator.MMSE
        return Estimator.LS, Estimator.MMSE


@dataclass(frozen=True)
class ChannelEstimate:
    h_hat: np.ndarray
    method: Estimator
    snr_db_used: float = float("nan")

    def __post_init__(self):
        if not np.all(np.isfinite(self.h_hat)):
            raise NumericError(f"Non-finite {self.method.value} channel estimate")


class MmseStatistics:
    """Channel second-order statistics for MMSE estimation

    Treated as immutable once built; the per-SNR weight matrices are memoised on the
    instance.
    """

    def __init__(
        self,
        r_hh: np.ndarray,
        r_h_hls: np.ndarray,
        sample_count: int,
        channel_config: Optional[dict] = None,
        seed: Optional[int] = None,
    ):
        if r_hh.shape != (N_SUBCARRIERS, N_SUBCARRIERS) or r_h_hls.shape != r_hh.shape:
            raise InputShapeError(
                f"Covariances must be {N_SUBCARRIERS}x{N_SUBCARRIERS}, got {r_hh.shape}, {r_h_hls.shape}"
            )
        self.r_hh = r_hh
        self.r_h_hls = r_h_hls
        self.sample_count = int(sample_count)
        self.channel_config = channel_config
        self.seed = seed
        self.r_hh.setflags(write=False)
        self.r_h_hls.setflags(write=False)

    @memoize
    def weight(self, snr_db: float) -> np.ndarray:
        """W = R_hhls (R_hh + I / SNR)^-1"""
        if not np.isfinite(snr_db):
            raise NumericError(f"MMSE weights need a finite SNR, got {snr_db}")
        snr = 10 ** (snr_db / 10)
        regularised = self.r_hh + np.eye(N_SUBCARRIERS) / snr
        try:
            # W A = R  <=>  A^H W^H = R^H
            w = linalg.solve(regularised.conj().T, self.r_h_hls.conj().T, assume_a="gen").conj().T
        except (linalg.LinAlgError, ValueError) as e:
            raise NumericError(f"Singular MMSE system at {snr_db} dB") from e
        if not np.all(np.isfinite(w)):
            raise NumericError(f"Singular MMSE system at {snr_db} dB")
        return w

    def header(self) -> dict:
        return {
            "dims": [N_SUBCARRIERS, N_SUBCARRIERS],
            "sample_count": self.sample_count,
            "channel_config": self.channel_config,
            "seed": self.seed,
        }

    def save(self, path: PathLike) -> Path:
        payload = np.concatenate([self.r_hh.ravel(), self.r_h_hls.ravel()]).astype("<c16")
        # complex128 is stored as interleaved little-endian float64 (re, im)
        return write_container(path, MMSE_MAGIC, self.header(), payload.view("<f8").tobytes())

    @classmethod
    def load(cls, path: PathLike) -> "MmseStatistics":
        header, payload = read_container(path, MMSE_MAGIC)
        n = header["dims"][0]
        values = np.frombuffer(payload, dtype="<f8")
        if values.shape[0] != 2 * 2 * n * n:
            raise FormatError(f"{path}: expected {4 * n * n} floats, got {values.shape[0]}")
        mats = values.view("<c16").astype(np.complex128).reshape(2, n, n)
        return cls(
            mats[0].copy(),
            mats[1].copy(),
            header["sample_count"],
            header.get("channel_config"),
            header.get("seed"),
        )


@dataclass(frozen=True)
class EqualizedSample:
    """Real 2 x 260 view of an equalised packet"""

    values: np.ndarray
    method: Estimator
    label: Optional[int] = None
    mask_spec: Optional[List[Tuple[int, int]]] = None

    def __post_init__(self):
        if self.values.shape != (2, N_SYMBOLS):
            raise InputShapeError(f"values must be (2, {N_SYMBOLS}), got {self.values.shape}")


def ls_estimate(pilot_rx: np.ndarray, pilot_tx: np.ndarray = LTS) -> ChannelEstimate:
    """h_LS = y_p / x_p

    >>> bool(np.allclose(ls_estimate(LTS, LTS).h_hat, 1.0))
    True
    """
    if pilot_rx.shape != pilot_tx.shape:
        raise InputShapeError(f"Pilot shapes differ: {pilot_rx.shape} vs {pilot_tx.shape}")
    if np.any(pilot_tx == 0):
        raise DegeneratePilotError("Transmitted pilot has zero entries")
    return ChannelEstimate(pilot_rx / pilot_tx, Estimator.LS)


def mmse_statistics_from_samples(
    h: np.ndarray, channel_config: Optional[dict] = None, seed: Optional[int] = None
) -> MmseStatistics:
    """Empirical R_hh from channel samples (n, 52), Hermitian by construction

    The LS error is independent of h, so R_hhls = R_hh; it is stored separately anyway.
    """
    if h.ndim != 2 or h.shape[1] != N_SUBCARRIERS:
        raise InputShapeError(f"Need (n, {N_SUBCARRIERS}) channel samples, got {h.shape}")
    r_hh = (h.T @ h.conj()) / h.shape[0]
    r_hh = 0.5 * (r_hh + r_hh.conj().T)
    return MmseStatistics(r_hh, r_hh.copy(), h.shape[0], channel_config, seed)


def estimate_mmse_statistics(
    cfg: ChannelConfig, n: int = MIN_STATISTICS_SAMPLES, seed: int = 0
) -> MmseStatistics:
    """R_hh over `n` fresh pilot-time channel realisations of `cfg`"""
    if n < MIN_STATISTICS_SAMPLES:
        raise ConfigError(f"Need at least {MIN_STATISTICS_SAMPLES} realisations, got {n}")
    _, h_freq, _ = sample_channels(cfg, n, np.random.default_rng(seed))
    logger.debug(f"Estimated MMSE statistics from {n} realisations")
    return mmse_statistics_from_samples(h_freq[:, 0], cfg.to_dict(), seed)


def mmse_estimate(ls: ChannelEstimate, stats: MmseStatistics, snr_db: float) -> ChannelEstimate:
    """h_MMSE = W(snr) h_LS"""
    if ls.method is not Estimator.LS:
        raise InputShapeError(f"MMSE filters an LS estimate, got {ls.method.value}")
    return ChannelEstimate(stats.weight(float(snr_db)) @ ls.h_hat, Estimator.MMSE, float(snr_db))


def equalize(
    frames_rx: np.ndarray, estimate: ChannelEstimate, label: Optional[int] = None
) -> EqualizedSample:
    """x_hat = y / h_hat for every data frame, reshaped to the 2 x 260 layout"""
    if frames_rx.shape != (N_DATA_FRAMES, N_SUBCARRIERS):
        raise InputShapeError(
            f"frames_rx must be ({N_DATA_FRAMES}, {N_SUBCARRIERS}), got {frames_rx.shape}"
        )
    if np.any(np.abs(estimate.h_hat) <= DEEP_FADE_EPS):
        raise DeepFadeError(f"Channel estimate below {DEEP_FADE_EPS} on some subcarrier")
    x_hat = (frames_rx / estimate.h_hat[None, :]).ravel()
    values = np.stack([x_hat.real, x_hat.imag]).astype(np.float32)
    return EqualizedSample(values, estimate.method, label)


def block_mask(sample: EqualizedSample, ratio: float, rng_seed: Seed) -> EqualizedSample:
    """Zero one contiguous run of round(ratio * 260) columns in both rows"""
    if not 0 <= ratio < 1:
        raise ConfigError(f"Mask ratio must be in [0, 1), got {ratio}")
    width = int(np.floor(ratio * N_SYMBOLS + 0.5))
    if width == 0:
        return sample
    rng = np.random.default_rng(rng_seed)
    start = int(rng.integers(0, N_SYMBOLS - width + 1))
    values = sample.values.copy()
    values[:, start : start + width] = 0
    spec = list(sample.mask_spec or []) + [(start, start + width)]
    return EqualizedSample(values, sample.method, sample.label, spec)


def estimate(
    y: ReceivedFrame, estimator: Estimator, stats: Optional[MmseStatistics], snr_db: float
) -> ChannelEstimate:
    ls = ls_estimate(y.pilot_rx)
    if estimator is Estimator.LS:
        return ls
    if stats is None:
        raise ConfigError("MMSE estimation needs channel statistics")
    return mmse_estimate(ls, stats, snr_db)


def augment_view(
    y: ReceivedFrame,
    estimator: Estimator,
    stats: Optional[MmseStatistics],
    snr_db: Optional[float],
    mask_ratio: float,
    rng_seed: Seed,
) -> EqualizedSample:
    """One branch of the augmentation: AWGN -> estimate -> equalise -> mask

    `snr_db=None` skips the noise step and uses the SNR the frame already carries.
    """
    noise_rng, mask_rng = child_rngs(rng_seed, 2)
    if snr_db is not None:
        y = add_awgn(y, float(snr_db), noise_rng)
    h = estimate(y, estimator, stats, y.snr_db)
    sample = equalize(y.data_rx, h, label=y.source_device if y.source_device >= 0 else None)
    return block_mask(sample, mask_ratio, mask_rng)


def make_pair(
    y: ReceivedFrame,
    stats: Optional[MmseStatistics],
    snr_range_db: Optional[Sequence[int]] = (10, 20),
    seed: Seed = 0,
    mode: Mode = Mode.MIXED,
    mask_ratio: float = 0.1,
) -> Tuple[EqualizedSample, EqualizedSample]:
    """Residual-channel positive pair from one received packet

    Two integer SNRs are drawn uniformly (inclusive) from `snr_range_db`, each view gets
    its own noise, estimator and mask. In mixed mode the first view is LS and the second
    MMSE; the ablation modes use one estimator for both.
    """
    rng = np.random.default_rng(seed)
    if snr_range_db is None:
        snrs = (None, None)
    else:
        lo, hi = int(snr_range_db[0]), int(snr_range_db[1])
        if hi < lo:
            raise ConfigError(f"Invalid SNR range {snr_range_db}")
        snrs = tuple(int(s) for s in rng.integers(lo, hi + 1, size=2))
    first_seed, second_seed = child_rngs(rng, 2)
    est1, est2 = Mode(mode).estimators
    return (
        augment_view(y, est1, stats, snrs[0], mask_ratio, first_seed),
        augment_view(y, est2, stats, snrs[1], mask_ratio, second_seed),
    )
