"""Codeword quantizers and the CSIQ feedback bitstream.

Four schemes share one interface:

* ``SvqVaeQuantizer`` lifts every codeword element to a D-vector with a
  1x1 up-channel conv, snaps it to the nearest codebook row, and maps the
  selected rows back with a 1x1 down-channel conv.
* ``BaseVVQuantizer`` snaps contiguous D-element blocks of the codeword
  directly to codebook rows.
* ``UniformQuantizer`` and ``MuLawQuantizer`` are scalar quantizers over a
  calibrated range whose training gradient is the constant one.

Calling a quantizer on a batch of codewords returns the dequantized
codewords plus the codebook and commitment loss terms (``None`` for the
scalar schemes).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.cluster.vq import kmeans2

from . import autodiff as ad
from .autodiff import ConfigError, DimensionError, Parameter, Tensor
from .layers import Module, uniform_init

SVQVAE, UNIFORM, MULAW, BASEVV = 0, 1, 2, 3
QUANTIZER_IDS = {"svqvae": SVQVAE, "uniform": UNIFORM, "mulaw": MULAW, "basevv": BASEVV}
QUANTIZER_NAMES = {v: k for k, v in QUANTIZER_IDS.items()}


class BitstreamError(ValueError):
    """A feedback bitstream is malformed or inconsistent with its decoder."""


# ---------------------------------------------------------------------------
# Bit packing and framing
# ---------------------------------------------------------------------------


def pack_indices(indices, bits: int) -> bytes:
    """MSB-first packing of ``bits``-wide unsigned indices, zero-padded to a byte."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if bits < 1 or bits > 16:
        raise BitstreamError(f"unsupported index width {bits}")
    if idx.size and (idx.min() < 0 or idx.max() >= 1 << bits):
        raise BitstreamError(f"index out of range for {bits}-bit packing")
    shifts = np.arange(bits - 1, -1, -1)
    bitmat = ((idx[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1)).tobytes()


def unpack_indices(payload: bytes, count: int, bits: int) -> np.ndarray:
    need = -(-count * bits // 8)
    if len(payload) != need:
        raise BitstreamError(f"payload holds {len(payload)} bytes, expected {need}")
    flat = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))[: count * bits]
    weights = 1 << np.arange(bits - 1, -1, -1)
    return flat.reshape(count, bits).astype(np.int64) @ weights


BITSTREAM_MAGIC = b"CSIQ"
_FRAME = struct.Struct(">4sBHBH")


@dataclass
class Bitstream:
    """One codeword's feedback payload.

    ``length`` is the codeword length L. SVQ-VAE and the scalar schemes send
    L indices; base-VV sends L/D.
    """

    quantizer_id: int
    length: int
    bits: int
    dim: int
    indices: np.ndarray

    @property
    def index_count(self) -> int:
        return self.length // self.dim if self.quantizer_id == BASEVV else self.length

    @property
    def payload_bits(self) -> int:
        return self.index_count * self.bits

    def to_bytes(self) -> bytes:
        if len(self.indices) != self.index_count:
            raise BitstreamError(f"{len(self.indices)} indices for a frame declaring {self.index_count}")
        head = _FRAME.pack(BITSTREAM_MAGIC, self.quantizer_id, self.length, self.bits, self.dim)
        return head + pack_indices(self.indices, self.bits)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _FRAME.size:
            raise BitstreamError("bitstream shorter than its header")
        magic, qid, length, bits, dim = _FRAME.unpack_from(data)
        if magic != BITSTREAM_MAGIC:
            raise BitstreamError(f"bad bitstream magic {magic!r}")
        if qid not in QUANTIZER_NAMES:
            raise BitstreamError(f"unknown quantizer id {qid}")
        if not 1 <= bits <= 16:
            raise BitstreamError(f"invalid index width {bits}")
        if qid == BASEVV and (dim == 0 or length % dim):
            raise BitstreamError(f"base-VV frame with D={dim} does not tile L={length}")
        frame = cls(qid, length, bits, dim, np.zeros(0, dtype=np.int64))
        frame.indices = unpack_indices(data[_FRAME.size:], frame.index_count, bits)
        return frame


# ---------------------------------------------------------------------------
# Vector quantization primitives
# ---------------------------------------------------------------------------


def nearest_neighbor(vectors: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the closest table row (Euclidean) for each vector; ties go to the lowest index."""
    table = np.asarray(table, dtype=np.float64)
    if table.shape[0] == 0:
        raise ConfigError("empty codebook")
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[-1] != table.shape[1]:
        raise DimensionError(f"vector dim {vectors.shape[-1]} != codebook dim {table.shape[1]}")
    diff = vectors[..., None, :] - table
    return np.argmin(np.einsum("...kd,...kd->...k", diff, diff), axis=-1)


def vq_loss(q_s: Tensor, q_r: Tensor, beta: float = 0.25) -> tuple[Tensor, Tensor]:
    """Codebook term ``|sg[q_s] - e|^2`` and commitment term ``beta |q_s - sg[e]|^2``.

    Both are summed over positions and averaged over any leading batch axes.
    """
    if q_s.shape != q_r.shape:
        raise DimensionError(f"vq_loss shape mismatch {q_s.shape} vs {q_r.shape}")
    n = int(np.prod(q_s.shape[:-2])) if q_s.ndim > 2 else 1
    codebook = ad.sum_(ad.square(ad.detach(q_s) - q_r)) * (1.0 / n)
    commit = ad.sum_(ad.square(q_s - ad.detach(q_r))) * (beta / n)
    return codebook, commit


class Codebook(Module):
    def __init__(self, size: int, dim: int, rng: np.random.Generator):
        if size < 1 or dim < 1:
            raise ConfigError("codebook size and dim must be positive")
        if size & (size - 1):
            raise ConfigError(f"codebook size must be a power of two, got {size}")
        self.size, self.dim = size, dim
        self.embeddings = Parameter(rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim)))

    @property
    def bits(self) -> int:
        return self.size.bit_length() - 1

    def fit(self, vectors: np.ndarray, init: np.ndarray, max_rows: int = 50_000) -> None:
        """Replace the rows with k-means centroids of ``vectors`` seeded at ``init``."""
        vectors = vectors.reshape(-1, self.dim)
        if len(vectors) < self.size:
            return
        vectors = vectors[::-(-len(vectors) // max_rows)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # an emptied cluster keeps its seed row
            centroids, _ = kmeans2(vectors, init, iter=25, minit="matrix", missing="warn")
        self.embeddings.assign(centroids)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2, stream)))


class Quantizer(Module):
    quantizer_id: int
    bits: int
    length: int

    def bits_per_csi(self) -> int:
        raise NotImplementedError

    def calibrate(self, codewords: np.ndarray) -> None:
        """Adjust any data-dependent range from a batch of encoder outputs."""

    def meta(self) -> dict:
        raise NotImplementedError

    def _check_length(self, n: int) -> None:
        if n != self.length:
            raise DimensionError(f"codeword length {n} != quantizer length {self.length}")

    def _check_frame(self, bs: Bitstream) -> None:
        if bs.quantizer_id != self.quantizer_id:
            raise BitstreamError(f"frame is for quantizer {bs.quantizer_id}, decoder is {self.quantizer_id}")
        if bs.length != self.length or bs.bits != self.bits:
            raise BitstreamError(
                f"frame L={bs.length}, B={bs.bits} does not match decoder L={self.length}, B={self.bits}")


class SvqVaeQuantizer(Quantizer):
    """Per-element lifting, codebook lookup, and per-element restoration."""

    quantizer_id = SVQVAE
    beta = 0.25

    def __init__(self, length: int, bits: int = 5, dim: int = 32, seed: int = 0):
        rng = _rng(seed, SVQVAE)
        self.length, self.bits, self.dim = length, bits, dim
        self.up_weight = Parameter(uniform_init(rng, (1, dim), 1))
        self.up_bias = Parameter(uniform_init(rng, (dim,), 1))
        self.codebook = Codebook(1 << bits, dim, rng)
        self.down_weight = Parameter(uniform_init(rng, (dim, 1), dim))
        self.down_bias = Parameter(uniform_init(rng, (1,), dim))
        self.assign_names()

    def lift(self, cw: Tensor) -> Tensor:
        """Up-channel 1x1 conv: ``(..., L)`` -> ``(..., L, D)``."""
        self._check_length(cw.shape[-1])
        return ad.matmul(cw.reshape(*cw.shape, 1), self.up_weight) + self.up_bias

    def restore(self, q: Tensor) -> Tensor:
        """Down-channel 1x1 conv: ``(..., L, D)`` -> ``(..., L)``."""
        y = ad.matmul(q, self.down_weight) + self.down_bias
        return y.reshape(*q.shape[:-1])

    def lookup(self, indices: np.ndarray) -> Tensor:
        return ad.gather_rows(self.codebook.embeddings, indices)

    def calibrate(self, codewords: np.ndarray) -> None:
        """Seed the codebook at the lifted quantiles of the codeword values and refine by k-means."""
        values = np.sort(np.asarray(codewords, dtype=np.float64).ravel())
        if values.size < self.codebook.size:
            return
        quantiles = values[((np.arange(self.codebook.size) + 0.5) / self.codebook.size * values.size).astype(int)]
        with ad.no_grad():
            lift = lambda v: (Tensor(v.reshape(-1, 1)) @ self.up_weight + self.up_bias).data
            lifted = lift(values)
            self.codebook.fit(lifted, lift(quantiles))
        # least-squares down-conv so a restored codebook row reproduces the values it stands for
        rows = self.codebook.embeddings.data[nearest_neighbor(lifted, self.codebook.embeddings.data)]
        design = np.hstack([rows, np.ones((len(rows), 1))])
        coef = np.linalg.lstsq(design, values, rcond=None)[0]
        self.down_weight.assign(coef[:-1].reshape(-1, 1))
        self.down_bias.assign(coef[-1:])

    def __call__(self, cw: Tensor):
        q_s = self.lift(cw)
        z = nearest_neighbor(q_s.data, self.codebook.embeddings.data)
        q_r = self.lookup(z)
        codebook_term, commit_term = vq_loss(q_s, q_r, self.beta)
        return self.restore(ad.straight_through(q_s, q_r)), codebook_term, commit_term

    def quantize(self, cw) -> tuple[Bitstream, Tensor]:
        cw = cw if isinstance(cw, Tensor) else Tensor(cw)
        q_s = self.lift(cw)
        z = nearest_neighbor(q_s.data, self.codebook.embeddings.data)
        return Bitstream(SVQVAE, self.length, self.bits, 0, z), q_s

    def dequantize(self, bs: Bitstream) -> np.ndarray:
        self._check_frame(bs)
        if bs.indices.size and bs.indices.max() >= self.codebook.size:
            raise BitstreamError("index exceeds codebook size")
        with ad.no_grad():
            return self.restore(self.lookup(bs.indices)).data

    def encode(self, cw: np.ndarray) -> Bitstream:
        with ad.no_grad():
            return self.quantize(cw)[0]

    def bits_per_csi(self) -> int:
        return self.length * self.bits

    def meta(self) -> dict:
        return {"kind": "svqvae", "length": self.length, "bits": self.bits, "dim": self.dim}


class BaseVVQuantizer(Quantizer):
    """Vector quantization of contiguous D-element codeword blocks."""

    quantizer_id = BASEVV
    beta = 0.25

    def __init__(self, length: int, bits: int = 5, dim: int = 4, seed: int = 0):
        if dim < 1 or length % dim:
            raise ConfigError(f"block size D={dim} must divide codeword length {length}")
        rng = _rng(seed, BASEVV)
        self.length, self.bits, self.dim = length, bits, dim
        self.codebook = Codebook(1 << bits, dim, rng)
        self.assign_names()

    def blocks(self, cw: Tensor) -> Tensor:
        self._check_length(cw.shape[-1])
        return cw.reshape(*cw.shape[:-1], self.length // self.dim, self.dim)

    def __call__(self, cw: Tensor):
        q_s = self.blocks(cw)
        z = nearest_neighbor(q_s.data, self.codebook.embeddings.data)
        q_r = ad.gather_rows(self.codebook.embeddings, z)
        codebook_term, commit_term = vq_loss(q_s, q_r, self.beta)
        return ad.straight_through(q_s, q_r).reshape(*cw.shape), codebook_term, commit_term

    def calibrate(self, codewords: np.ndarray) -> None:
        """k-means codebook over the codeword blocks, seeded at evenly spaced blocks."""
        blocks = np.asarray(codewords, dtype=np.float64).reshape(-1, self.dim)
        if len(blocks) < self.codebook.size:
            return
        order = np.argsort(blocks.sum(axis=1), kind="stable")
        seeds = blocks[order[((np.arange(self.codebook.size) + 0.5) / self.codebook.size * len(blocks)).astype(int)]]
        self.codebook.fit(blocks, seeds)

    def encode(self, cw: np.ndarray) -> Bitstream:
        q_s = self.blocks(Tensor(cw)).data
        z = nearest_neighbor(q_s, self.codebook.embeddings.data)
        return Bitstream(BASEVV, self.length, self.bits, self.dim, z)

    def dequantize(self, bs: Bitstream) -> np.ndarray:
        self._check_frame(bs)
        if bs.dim != self.dim:
            raise BitstreamError(f"frame D={bs.dim} does not match decoder D={self.dim}")
        return self.codebook.embeddings.data[bs.indices].reshape(self.length)

    def bits_per_csi(self) -> int:
        return (self.length // self.dim) * self.bits

    def meta(self) -> dict:
        return {"kind": "basevv", "length": self.length, "bits": self.bits, "dim": self.dim}


# ---------------------------------------------------------------------------
# Scalar quantizers
# ---------------------------------------------------------------------------


def uniform_levels(x, bits: int, lo: float, hi: float) -> np.ndarray:
    """Clamp to ``[lo, hi]`` and bin into ``2**bits`` equal cells."""
    if not lo < hi:
        raise ConfigError(f"need lo < hi, got [{lo}, {hi}]")
    n = 1 << bits
    pos = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.floor(pos * n), 0, n - 1).astype(np.int64)


def uniform_values(levels, bits: int, lo: float, hi: float) -> np.ndarray:
    """Centre of each cell."""
    n = 1 << bits
    return lo + (np.asarray(levels, dtype=np.float64) + 0.5) / n * (hi - lo)


def mulaw_compand(u, mu: float = 255.0) -> np.ndarray:
    """``sign(u) ln(1 + mu |u|) / ln(1 + mu)`` for ``u`` in ``[-1, 1]``."""
    if mu <= 0:
        raise ConfigError("mu must be positive")
    u = np.asarray(u, dtype=np.float64)
    return np.sign(u) * np.log1p(mu * np.abs(u)) / np.log1p(mu)


def mulaw_expand(y, mu: float = 255.0) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(mu)) / mu


class _ScalarQuantizer(Quantizer):
    def __init__(self, length: int, bits: int, lo: float = 0.0, hi: float = 1.0):
        if bits < 1:
            raise ConfigError("bits must be >= 1")
        self.length, self.bits = length, bits
        self.lo, self.hi = float(lo), float(hi)
        self._seen: Optional[tuple[float, float]] = None

    def levels(self, x) -> np.ndarray:
        raise NotImplementedError

    def values(self, levels) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, cw: Tensor):
        self._check_length(cw.shape[-1])
        if self.training:
            lo, hi = float(cw.data.min()), float(cw.data.max())
            self._seen = (lo, hi) if self._seen is None else (min(lo, self._seen[0]), max(hi, self._seen[1]))
        q = Tensor(self.values(self.levels(cw.data)))
        return ad.straight_through(cw, q), None, None

    def calibrate(self, codewords: np.ndarray) -> None:
        lo, hi = float(np.min(codewords)), float(np.max(codewords))
        if hi <= lo:
            hi = lo + 1e-12
        self.lo, self.hi = lo, hi

    def end_epoch(self) -> None:
        """Adopt the range of encoder outputs observed since the last call."""
        if self._seen is not None:
            self.calibrate(np.array(self._seen))
            self._seen = None

    def encode(self, cw: np.ndarray) -> Bitstream:
        self._check_length(np.shape(cw)[-1])
        return Bitstream(self.quantizer_id, self.length, self.bits, 0, self.levels(cw))

    def dequantize(self, bs: Bitstream) -> np.ndarray:
        self._check_frame(bs)
        return self.values(bs.indices)

    def bits_per_csi(self) -> int:
        return self.length * self.bits


class UniformQuantizer(_ScalarQuantizer):
    quantizer_id = UNIFORM

    def levels(self, x) -> np.ndarray:
        return uniform_levels(x, self.bits, self.lo, self.hi)

    def values(self, levels) -> np.ndarray:
        return uniform_values(levels, self.bits, self.lo, self.hi)

    def meta(self) -> dict:
        return {"kind": "uniform", "length": self.length, "bits": self.bits, "lo": self.lo, "hi": self.hi}


class MuLawQuantizer(_ScalarQuantizer):
    """Map ``[lo, hi]`` onto ``[-1, 1]``, compand, then quantize uniformly."""

    quantizer_id = MULAW

    def __init__(self, length: int, bits: int, mu: float = 255.0, lo: float = 0.0, hi: float = 1.0):
        if mu <= 0:
            raise ConfigError("mu must be positive")
        super().__init__(length, bits, lo, hi)
        self.mu = float(mu)

    def to_unit(self, x) -> np.ndarray:
        u = 2.0 * (np.asarray(x, dtype=np.float64) - self.lo) / (self.hi - self.lo) - 1.0
        return np.clip(u, -1.0, 1.0)

    def from_unit(self, u) -> np.ndarray:
        return self.lo + (np.asarray(u) + 1.0) * 0.5 * (self.hi - self.lo)

    def levels(self, x) -> np.ndarray:
        return uniform_levels(mulaw_compand(self.to_unit(x), self.mu), self.bits, -1.0, 1.0)

    def values(self, levels) -> np.ndarray:
        return self.from_unit(mulaw_expand(uniform_values(levels, self.bits, -1.0, 1.0), self.mu))

    def meta(self) -> dict:
        return {"kind": "mulaw", "length": self.length, "bits": self.bits, "mu": self.mu,
                "lo": self.lo, "hi": self.hi}


def make_quantizer(kind: str, length: int, bits: int, *, dim: Optional[int] = None,
                   mu: float = 255.0, seed: int = 0) -> Quantizer:
    if kind == "svqvae":
        return SvqVaeQuantizer(length, bits, 32 if dim is None else dim, seed)
    if kind == "basevv":
        return BaseVVQuantizer(length, bits, 4 if dim is None else dim, seed)
    if kind == "uniform":
        return UniformQuantizer(length, bits)
    if kind == "mulaw":
        return MuLawQuantizer(length, bits, mu)
    raise ConfigError(f"unknown quantizer {kind!r}")


def quantizer_from_meta(meta: dict, params: dict[str, np.ndarray], seed: int = 0) -> Quantizer:
    q = make_quantizer(meta["kind"], meta["length"], meta["bits"], dim=meta.get("dim"),
                       mu=meta.get("mu", 255.0), seed=seed)
    if isinstance(q, _ScalarQuantizer):
        q.lo, q.hi = meta["lo"], meta["hi"]
    else:
        q.load_state_dict(params)
    return q
