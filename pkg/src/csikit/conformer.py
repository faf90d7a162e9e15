"""CsiConformer encoder/decoder, FLOPs accounting and checkpoint files."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, DimensionError, Tensor
from .layers import DepthwiseConv1d, Dropout, LayerNorm, Linear, Module

VALID_CRS = (4, 8, 16, 32, 64)


@dataclass(frozen=True)
class ConformerConfig:
    n_layers: int = 4
    d_model: int = 64
    seq_len: int = 32
    n_heads: int = 8
    ff_expansion: int = 4
    conv_expansion: int = 2
    conv_kernel: int = 31
    dropout_rate: float = 0.1
    conv_module_enabled: bool = True
    cr: int = 4
    ln_eps: float = 1e-5
    final_norm: bool = False  # extra LayerNorm closing each layer, as in the generic Conformer block
    input_center: float = 0.5
    input_gain: float = 1.0  # fixed; see fit_input_gain
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.conv_expansion * self.d_model % 2:
            raise ConfigError("conv_expansion * d_model must be even for the GLU split")
        if self.cr < 1 or (self.seq_len * self.d_model) % self.cr:
            raise ConfigError(f"cr={self.cr} does not divide {self.seq_len * self.d_model}")
        if self.n_layers < 0:
            raise ConfigError("n_layers must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if not (np.isfinite(self.input_gain) and self.input_gain > 0):
            raise ConfigError(f"input_gain must be positive and finite, got {self.input_gain}")

    @property
    def flat_dim(self) -> int:
        return self.seq_len * self.d_model

    @property
    def codeword_len(self) -> int:
        return self.flat_dim // self.cr

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def replace(self, **changes) -> "ConformerConfig":
        return ConformerConfig(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, data: dict) -> "ConformerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def fit_input_gain(data: np.ndarray, center: float = 0.5) -> float:
    """Gain that brings the centred training samples to unit RMS.

    Normalised sparse channels sit in a narrow band around the centre, far
    below the unit scale the layer norms and initialisation assume.
    """
    rms = float(np.sqrt(np.mean((np.asarray(data) - center) ** 2)))
    if not rms > 0:
        raise ConfigError("cannot fit an input gain to constant data")
    return 1.0 / rms


def ablation_config(name: str, base: Optional[ConformerConfig] = None) -> ConformerConfig:
    """Configurations of the structural ablations (``baseline``, ``none_conv``, ``conformer2``)."""
    base = base or ConformerConfig()
    if name == "baseline":
        return base
    if name == "none_conv":
        return base.replace(conv_module_enabled=False)
    if name in ("conformer2", "csiconformer2"):
        return base.replace(n_layers=3, ff_expansion=6)
    raise ConfigError(f"unknown ablation {name!r}")


class FeedForward(Module):
    """LayerNorm -> expand -> Swish -> dropout -> project back -> dropout."""

    def __init__(self, cfg: ConformerConfig, rng, drop_rng):
        hidden = cfg.ff_expansion * cfg.d_model
        self.norm = LayerNorm(cfg.d_model, cfg.ln_eps)
        self.expand = Linear(cfg.d_model, hidden, rng)
        self.project = Linear(hidden, cfg.d_model, rng)
        self.drop1 = Dropout(cfg.dropout_rate, drop_rng)
        self.drop2 = Dropout(cfg.dropout_rate, drop_rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.drop1(ad.swish(self.expand(self.norm(x))))
        return self.drop2(self.project(h))


class SelfAttention(Module):
    """Pre-norm multi-head self-attention; no positional encoding is added."""

    def __init__(self, cfg: ConformerConfig, rng, drop_rng):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.norm = LayerNorm(d, cfg.ln_eps)
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.attn_drop = Dropout(cfg.dropout_rate, drop_rng)

    def _heads(self, x: Tensor) -> Tensor:
        *lead, t, _ = x.shape
        return ad.transpose(x.reshape(*lead, t, self.n_heads, self.head_dim),
                            tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2)))

    def __call__(self, x: Tensor) -> Tensor:
        *lead, t, d = x.shape
        h = self.norm(x)
        q, k, v = self._heads(self.query(h)), self._heads(self.key(h)), self._heads(self.value(h))
        scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(self.head_dim))
        weights = self.attn_drop(ad.softmax(scores))
        ctx = ad.matmul(weights, v)  # (..., heads, t, head_dim)
        n = len(lead)
        ctx = ad.transpose(ctx, tuple(range(n)) + (n + 1, n, n + 2)).reshape(*lead, t, d)
        return self.out(ctx)


class ConvModule(Module):
    """LayerNorm -> pointwise expand -> GLU -> depthwise conv -> norm -> Swish -> pointwise -> dropout.

    The depthwise convolution runs along the token (delay) axis. A layer norm
    stands where the usual batch norm would be.
    """

    def __init__(self, cfg: ConformerConfig, rng, drop_rng):
        d = cfg.d_model
        inner = cfg.conv_expansion * d // 2
        self.norm = LayerNorm(d, cfg.ln_eps)
        self.pointwise1 = Linear(d, cfg.conv_expansion * d, rng)
        self.depthwise = DepthwiseConv1d(inner, cfg.conv_kernel, rng)
        self.conv_norm = LayerNorm(inner, cfg.ln_eps)
        self.pointwise2 = Linear(inner, d, rng)
        self.drop = Dropout(cfg.dropout_rate, drop_rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.glu(self.pointwise1(self.norm(x)))
        h = ad.swish(self.conv_norm(self.depthwise(h)))
        return self.drop(self.pointwise2(h))


class ConformerLayer(Module):
    def __init__(self, cfg: ConformerConfig, rng, drop_rng):
        self.ff1 = FeedForward(cfg, rng, drop_rng)
        self.mhsa = SelfAttention(cfg, rng, drop_rng)
        self.conv = ConvModule(cfg, rng, drop_rng) if cfg.conv_module_enabled else None
        self.ff2 = FeedForward(cfg, rng, drop_rng)
        self.final_norm = LayerNorm(cfg.d_model, cfg.ln_eps) if cfg.final_norm else None

    def conv_module(self, x: Tensor) -> Tensor:
        if self.conv is None:
            raise ad.UsageError("convolution module is disabled in this configuration")
        return self.conv(x)

    def __call__(self, x: Tensor) -> Tensor:
        y = x + self.ff1(x) * 0.5
        y = y + self.mhsa(y)
        if self.conv is not None:
            y = y + self.conv(y)
        y = y + self.ff2(y) * 0.5
        return y if self.final_norm is None else self.final_norm(y)


class CsiConformer(Module):
    """Encoder (UE side) and decoder (BS side) of the feedback autoencoder.

    Inputs are batches shaped ``(batch, seq_len, d_model)``: delay rows as
    tokens, concatenated real/imaginary angular columns as features.
    """

    def __init__(self, cfg: ConformerConfig = ConformerConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
        self.drop_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1,)))
        self.encoder_layers = [ConformerLayer(cfg, rng, self.drop_rng) for _ in range(cfg.n_layers)]
        self.encoder_fc = Linear(cfg.flat_dim, cfg.codeword_len, rng)
        self.decoder_fc = Linear(cfg.codeword_len, cfg.flat_dim, rng)
        self.decoder_layers = [ConformerLayer(cfg, rng, self.drop_rng) for _ in range(cfg.n_layers)]
        self.assign_names()

    def encode(self, h) -> Tensor:
        h = h if isinstance(h, Tensor) else Tensor(h)
        cfg = self.cfg
        if h.shape[-2:] != (cfg.seq_len, cfg.d_model):
            raise DimensionError(f"expected (..., {cfg.seq_len}, {cfg.d_model}) input, got {h.shape}")
        h = (h - cfg.input_center) * cfg.input_gain
        for layer in self.encoder_layers:
            h = layer(h)
        flat = h.reshape(*h.shape[:-2], cfg.flat_dim)
        if flat.ndim == 1:
            return self.encoder_fc(flat.reshape(1, -1)).reshape(-1)
        return self.encoder_fc(flat)

    def decode(self, cw) -> Tensor:
        cw = cw if isinstance(cw, Tensor) else Tensor(cw)
        cfg = self.cfg
        if cw.shape[-1] != cfg.codeword_len:
            raise DimensionError(f"codeword length {cw.shape[-1]} != {cfg.codeword_len} for cr={cfg.cr}")
        lead = cw.shape[:-1]
        h = self.decoder_fc(cw if lead else cw.reshape(1, -1)).reshape(*lead, cfg.seq_len, cfg.d_model)
        for layer in self.decoder_layers:
            h = layer(h)
        return h * (1.0 / cfg.input_gain) + cfg.input_center

    def __call__(self, h) -> Tensor:
        return self.decode(self.encode(h))


# ---------------------------------------------------------------------------
# Complexity accounting
# ---------------------------------------------------------------------------


def param_count(model: Module) -> int:
    return model.num_parameters()


def flops_breakdown(cfg: ConformerConfig) -> list[tuple[str, str, int]]:
    """Multiply-accumulates of one encode+decode pass as ``(layer, kind, macs)`` rows.

    ``kind`` is one of ``fc``, ``feed_forward``, ``attention_proj``,
    ``attention_product``, ``conv``. Elementwise ops are not counted.
    """
    t, d = cfg.seq_len, cfg.d_model
    hidden = cfg.ff_expansion * d
    inner = cfg.conv_expansion * d // 2
    per_layer = [
        ("ff1", "feed_forward", 2 * t * d * hidden),
        ("mhsa.qkv", "attention_proj", 3 * t * d * d),
        ("mhsa.scores", "attention_product", t * t * d),
        ("mhsa.context", "attention_product", t * t * d),
        ("mhsa.out", "attention_proj", t * d * d),
    ]
    if cfg.conv_module_enabled:
        per_layer += [
            ("conv.pointwise1", "conv", t * d * cfg.conv_expansion * d),
            ("conv.depthwise", "conv", t * inner * cfg.conv_kernel),
            ("conv.pointwise2", "conv", t * inner * d),
        ]
    per_layer.append(("ff2", "feed_forward", 2 * t * d * hidden))
    rows = [("encoder_fc", "fc", cfg.flat_dim * cfg.codeword_len)]
    for side in ("encoder", "decoder"):
        for i in range(cfg.n_layers):
            rows += [(f"{side}_layers.{i}.{name}", kind, macs) for name, kind, macs in per_layer]
    rows.append(("decoder_fc", "fc", cfg.codeword_len * cfg.flat_dim))
    return rows


def flops_count(cfg: ConformerConfig, exclude: tuple[str, ...] = ()) -> int:
    """Total MACs (1 MAC = 1 FLOP), optionally skipping some ``kind`` values."""
    return sum(macs for _, kind, macs in flops_breakdown(cfg) if kind not in exclude)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSCM"
CHECKPOINT_VERSION = 1


class CheckpointError(IOError):
    pass


def encode_checkpoint(meta: dict, params: dict[str, np.ndarray]) -> bytes:
    """Serialise a JSON-able metadata dict and named float64 arrays."""
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        if data[:4] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {data[:4]!r}")
        version, blen = struct.unpack_from("<HI", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 10
        meta = json.loads(data[pos:pos + blen])
        pos += blen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode()
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(data):
                raise CheckpointError(f"checkpoint truncated inside {name}")
            params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
            pos += 8 * n
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return meta, params


def save_model(path, model: CsiConformer, extra: Optional[dict] = None,
               extra_params: Optional[dict[str, np.ndarray]] = None) -> None:
    meta = {"model": asdict(model.cfg), **(extra or {})}
    params = model.state_dict()
    params.update(extra_params or {})
    Path(path).write_bytes(encode_checkpoint(meta, params))


def load_model(path) -> tuple[CsiConformer, dict, dict[str, np.ndarray]]:
    """Rebuild a model; returns it with the metadata and any non-model parameters."""
    meta, params = decode_checkpoint(Path(path).read_bytes())
    model = CsiConformer(ConformerConfig.from_dict(meta["model"]))
    own = {name for name, _ in model.named_parameters()}
    model.load_state_dict({k: v for k, v in params.items() if k in own})
    rest = {k: v for k, v in params.items() if k not in own}
    return model, meta, rest
