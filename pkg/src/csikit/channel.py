"""CSI generation, angular-delay transforms, normalisation and dataset files.

Spatial-frequency CSI is an ``n_c x n_t`` complex matrix. The angular-delay
form is ``F_c @ H @ F_t^H`` with unitary DFT matrices; only its first
``n_a`` delay rows are kept. The network consumes the truncated matrix as a
real ``n_a x 2 n_t`` array (real parts, then imaginary parts) mapped into
``[0, 1]``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class ChannelConfigError(ValueError):
    pass


class DatasetError(IOError):
    """Base class for dataset file problems."""


class DatasetMagicError(DatasetError):
    pass


class DatasetVersionError(DatasetError):
    pass


class DatasetTruncatedError(DatasetError):
    pass


@dataclass(frozen=True)
class ChannelConfig:
    n_t: int = 32
    n_c: int = 1024
    n_a: int = 32
    n_r: int = 1
    paths: int = 6
    max_delay_tap: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.n_r != 1:
            raise ChannelConfigError("only single receive-antenna channels are supported")
        if min(self.n_t, self.n_c, self.n_a) < 1:
            raise ChannelConfigError("dimensions must be positive")
        if self.n_a > self.n_c:
            raise ChannelConfigError(f"n_a={self.n_a} exceeds n_c={self.n_c}")
        if self.paths < 1:
            raise ChannelConfigError("paths must be >= 1")
        if not 0 <= self.max_delay_tap < self.n_a:
            raise ChannelConfigError(f"max_delay_tap must lie in [0, {self.n_a})")


def dft_forward(h: np.ndarray) -> np.ndarray:
    """Angular-delay transform ``F_c @ h @ F_t^H`` with unitary scaling."""
    h = np.asarray(h)
    if h.ndim < 2:
        raise ChannelConfigError(f"expected a (..., n_c, n_t) array, got shape {h.shape}")
    # F_c applied on the left is an orthonormal FFT down the columns; right
    # multiplication by F_t^H is an orthonormal inverse FFT along the rows.
    return np.fft.ifft(np.fft.fft(h, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def dft_inverse(hp: np.ndarray) -> np.ndarray:
    """Inverse of :func:`dft_forward`: ``F_c^H @ hp @ F_t``."""
    hp = np.asarray(hp)
    return np.fft.fft(np.fft.ifft(hp, axis=-2, norm="ortho"), axis=-1, norm="ortho")


def truncate(hp: np.ndarray, n_a: int) -> np.ndarray:
    """Keep the first ``n_a`` delay rows."""
    if n_a > hp.shape[-2]:
        raise ChannelConfigError(f"n_a={n_a} exceeds n_c={hp.shape[-2]}")
    return hp[..., :n_a, :].copy()


def reconstruct_full(ha: np.ndarray, n_c: int) -> np.ndarray:
    """Zero-fill the dropped delay rows and return to the spatial-frequency domain."""
    n_a = ha.shape[-2]
    if n_a > n_c:
        raise ChannelConfigError(f"n_a={n_a} exceeds n_c={n_c}")
    full = np.zeros(ha.shape[:-2] + (n_c, ha.shape[-1]), dtype=np.complex128)
    full[..., :n_a, :] = ha
    return dft_inverse(full)


def channel_from_paths(
    gains: Sequence[complex],
    delay_taps: Sequence[int],
    angles: Sequence[float],
    n_c: int,
    n_t: int,
) -> np.ndarray:
    """Spatial-frequency CSI of a sum of discrete paths on a half-wavelength ULA.

    Each path contributes ``g * exp(2j*pi*n*tau/n_c) * exp(-1j*pi*m*sin(theta))``
    at subcarrier ``n`` and antenna ``m``. With integer taps ``tau`` the
    angular-delay energy of a path sits entirely in delay row ``tau``.
    """
    n = np.arange(n_c)[:, None]
    m = np.arange(n_t)[None, :]
    h = np.zeros((n_c, n_t), dtype=np.complex128)
    for g, tau, theta in zip(gains, delay_taps, angles):
        h += g * np.exp(2j * np.pi * n * tau / n_c) * np.exp(-1j * np.pi * m * np.sin(theta))
    return h


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent counter-based stream for sample ``index`` of a seeded dataset."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


def synthetic_sample(cfg: ChannelConfig, index: int) -> np.ndarray:
    rng = sample_rng(cfg.seed, index)
    gains = (rng.standard_normal(cfg.paths) + 1j * rng.standard_normal(cfg.paths)) / np.sqrt(2 * cfg.paths)
    taps = rng.integers(0, cfg.max_delay_tap + 1, size=cfg.paths)
    angles = rng.uniform(-np.pi / 2, np.pi / 2, size=cfg.paths)
    return channel_from_paths(gains, taps, angles, cfg.n_c, cfg.n_t)


def generate_synthetic(cfg: ChannelConfig, count: int, start: int = 0) -> list[np.ndarray]:
    """``count`` multipath channels drawn from streams ``start .. start+count-1``.

    Every sample depends only on ``(cfg.seed, index)`` so any partition of
    the index range reproduces the same samples.
    """
    if count < 1:
        raise ChannelConfigError("count must be >= 1")
    return [synthetic_sample(cfg, start + i) for i in range(count)]


@dataclass
class RealCSI:
    """Real network input: ``n_a x 2 n_t`` array in ``[0, 1]`` and its scale."""

    matrix: np.ndarray
    scale: float


def to_real(ha: np.ndarray, scale: float) -> RealCSI:
    """Concatenate real/imag parts and map ``[-scale, scale]`` onto ``[0, 1]``."""
    if scale <= 0:
        raise ChannelConfigError("scale must be positive")
    stacked = np.concatenate([ha.real, ha.imag], axis=-1)
    return RealCSI(stacked / (2.0 * scale) + 0.5, float(scale))


def from_real(r: RealCSI) -> np.ndarray:
    m = (np.asarray(r.matrix, dtype=np.float64) - 0.5) * (2.0 * r.scale)
    n_t = m.shape[-1] // 2
    return m[..., :n_t] + 1j * m[..., n_t:]


def max_abs_scale(has: Iterable[np.ndarray]) -> float:
    """Global max |Re|, |Im| over a collection of angular-delay matrices."""
    s = 0.0
    for ha in has:
        s = max(s, float(np.abs(ha.real).max()), float(np.abs(ha.imag).max()))
    return s if s > 0 else 1.0


def prepare(samples: Sequence[np.ndarray], n_a: int, scale: Optional[float] = None) -> tuple[np.ndarray, float]:
    """Spatial-frequency samples -> stacked ``[0, 1]`` real arrays plus the scale."""
    has = [truncate(dft_forward(h), n_a) for h in samples]
    if scale is None:
        scale = max_abs_scale(has)
    return np.stack([to_real(ha, scale).matrix for ha in has]), scale


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

MAGIC = b"CSID"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHd")


def save_dataset(path, samples: np.ndarray, scale: float) -> None:
    """Write ``(count, n_a, 2 n_t)`` real samples as a CSID file."""
    samples = np.asarray(samples)
    if samples.ndim != 3 or samples.shape[2] % 2:
        raise DatasetError(f"expected (count, n_a, 2*n_t) samples, got {samples.shape}")
    count, n_a, two_nt = samples.shape
    header = _HEADER.pack(MAGIC, VERSION, count, n_a, two_nt // 2, float(scale))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(samples, dtype="<f4").tobytes())


def load_dataset(path) -> tuple[np.ndarray, float]:
    """Read a CSID file; returns ``(samples as float64, scale)``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DatasetTruncatedError(f"{path}: file shorter than header")
    magic, version, count, n_a, n_t, scale = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatasetVersionError(f"{path}: unsupported version {version}")
    expected = count * n_a * 2 * n_t * 4
    payload = raw[_HEADER.size:]
    if len(payload) != expected:
        raise DatasetTruncatedError(
            f"{path}: header declares {count} samples ({expected} bytes), payload has {len(payload)}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(count, n_a, 2 * n_t)
    return data.astype(np.float64), float(scale)


def import_raw(path, count: int, n_a: int, n_t: int, scale: Optional[float] = None) -> tuple[np.ndarray, float]:
    """Load a headerless little-endian float32 ``(count, n_a, 2 n_t)`` export.

    Values are taken as already normalised into ``[0, 1]`` and ``scale``
    (default 1.0) records how to undo that mapping.
    """
    raw = Path(path).read_bytes()
    expected = count * n_a * 2 * n_t * 4
    if len(raw) != expected:
        raise DatasetTruncatedError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4").reshape(count, n_a, 2 * n_t)
    return data.astype(np.float64), 1.0 if scale is None else float(scale)
