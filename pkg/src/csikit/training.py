"""Losses, optimiser, learning-rate schedule and the end-to-end training loop."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, DimensionError, NumericError, Parameter, Tensor, UsageError
from .channel import RealCSI, from_real
from .conformer import CsiConformer, load_model, save_model
from .quantizers import Bitstream, Quantizer, _ScalarQuantizer, quantizer_from_meta

logger = logging.getLogger(__name__)

NMSE_FLOOR_DB = -120.0

# Full-scale schedule; the desk defaults below are what actually runs.
FULL_SCALE = {"epochs": 1000, "batch_size": 200, "warmup_epochs": 30,
               "train_samples": 100_000, "val_samples": 30_000, "test_samples": 20_000}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr_min: float = 5e-5
    lr_max: float = 2e-4
    warmup_epochs: Optional[int] = None  # None: 30/1000 of the epochs, at least 1
    beta: float = 0.25
    seed: int = 0
    quantizer: Optional[str] = None
    bits: int = 5
    codebook_dim: Optional[int] = None
    mu: float = 255.0

    def __post_init__(self):
        if self.warmup_epochs is None:
            self.warmup_epochs = max(1, round(self.epochs * FULL_SCALE["warmup_epochs"] / FULL_SCALE["epochs"]))
            if self.warmup_epochs >= self.epochs:
                self.warmup_epochs = 0
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if not self.lr_min < self.lr_max:
            raise ConfigError(f"need lr_min < lr_max, got {self.lr_min} / {self.lr_max}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} must be < epochs={self.epochs}")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossReport:
    epoch: int
    mse: float
    vq_codebook: float
    vq_commit: float
    val_nmse_db: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------------------
# Losses and metric
# ---------------------------------------------------------------------------


def mse_loss(batch_true, batch_pred: Tensor) -> Tensor:
    """Squared Frobenius error per sample, averaged over the leading batch axis."""
    batch_true = batch_true if isinstance(batch_true, Tensor) else Tensor(batch_true)
    if batch_true.shape != batch_pred.shape:
        raise DimensionError(f"mse_loss shape mismatch {batch_true.shape} vs {batch_pred.shape}")
    n = batch_true.shape[0] if batch_true.ndim > 2 else 1
    return ad.sum_(ad.square(batch_pred - batch_true)) * (1.0 / n)


def total_loss(mse: Tensor, vq: Optional[Tensor] = None) -> Tensor:
    return mse if vq is None else mse + vq


def nmse_db(true_ha: np.ndarray, pred_ha: np.ndarray) -> float:
    """``10 log10`` of the mean per-sample ``|H - H_hat|^2 / |H|^2``.

    Zero-energy samples are skipped with a warning; a perfect reconstruction
    reports the floor instead of ``-inf``.
    """
    axes = tuple(range(1, true_ha.ndim))
    power = np.sum(np.abs(true_ha) ** 2, axis=axes)
    err = np.sum(np.abs(true_ha - pred_ha) ** 2, axis=axes)
    keep = power > 0
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} zero-energy samples in NMSE", RuntimeWarning)
    if not keep.any():
        raise ValueError("no sample with nonzero energy")
    ratio = float(np.mean(err[keep] / power[keep]))
    if ratio <= 0.0:
        return NMSE_FLOOR_DB
    return max(10.0 * math.log10(ratio), NMSE_FLOOR_DB)


# ---------------------------------------------------------------------------
# Schedule and optimiser
# ---------------------------------------------------------------------------


def cosine_warmup_lr(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp lr_min -> lr_max over the warm-up epochs, then one cosine decay."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * epoch / w
    progress = (epoch - w) / (cfg.epochs - w)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: Sequence[Parameter], **kw) -> "AdamState":
        state = cls(**kw)
        for p in params:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        return state


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, applied in order to ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g in zip(params, grads):
        if p.name not in state.m:
            raise UsageError(f"Adam state not initialised for parameter {p.name!r}")
        m = state.m[p.name] = b1 * state.m[p.name] + (1.0 - b1) * g
        v = state.v[p.name] = b2 * state.v[p.name] + (1.0 - b2) * g * g
        p.assign(p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))


# ---------------------------------------------------------------------------
# Forward pass through the feedback chain
# ---------------------------------------------------------------------------


def feedback_forward(model: CsiConformer, quantizer: Optional[Quantizer], x: Tensor):
    """encode -> (quantize, straight-through, dequantize)? -> decode."""
    cw = model.encode(x)
    codebook_term = commit_term = None
    if quantizer is not None:
        cw, codebook_term, commit_term = quantizer(cw)
    return model.decode(cw), codebook_term, commit_term


def _raise_nonfinite(loss: Tensor) -> None:
    node = ad.Tape(loss).first_nonfinite()
    where = f"first non-finite tensor is the output of '{node.op}'" if node else "non-finite input data"
    raise NumericError(f"training loss became {loss.item()}: {where}")


def reconstruct(model: CsiConformer, quantizer: Optional[Quantizer], data: np.ndarray,
                batch_size: int = 64, through_bitstream: bool = True) -> np.ndarray:
    """Eval-mode reconstruction of normalised samples.

    With a quantizer attached and ``through_bitstream`` set, each codeword
    is serialised to a CSIQ frame and parsed back before dequantization.
    """
    model.eval()
    if quantizer is not None:
        quantizer.eval()
    outs = []
    with ad.no_grad():
        for i in range(0, len(data), batch_size):
            x = Tensor(data[i:i + batch_size])
            if quantizer is None:
                out = model.decode(model.encode(x))
            elif through_bitstream:
                cw = model.encode(x).data
                frames = [Bitstream.from_bytes(quantizer.encode(c).to_bytes()) for c in cw]
                out = model.decode(Tensor(np.stack([quantizer.dequantize(f) for f in frames])))
            else:
                out = feedback_forward(model, quantizer, x)[0]
            outs.append(out.data)
    return np.concatenate(outs)


def evaluate_nmse(model: CsiConformer, quantizer: Optional[Quantizer], data: np.ndarray,
                  scale: float = 1.0, batch_size: int = 64, through_bitstream: bool = True) -> float:
    """NMSE in dB on de-normalised angular-delay matrices."""
    pred = reconstruct(model, quantizer, data, batch_size, through_bitstream)
    return nmse_db(from_real(RealCSI(data, scale)), from_real(RealCSI(pred, scale)))


def encoder_outputs(model: CsiConformer, data: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    with ad.no_grad():
        return np.concatenate([model.encode(Tensor(data[i:i + batch_size])).data
                               for i in range(0, len(data), batch_size)])


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(
    model: CsiConformer,
    quantizer: Optional[Quantizer],
    train_data: np.ndarray,
    cfg: TrainConfig,
    val_data: Optional[np.ndarray] = None,
    scale: float = 1.0,
    run_dir=None,
    restore_best: bool = True,
) -> tuple[CsiConformer, list[LossReport]]:
    """Train encoder, decoder and (optionally) quantizer end to end.

    One report per epoch. When ``run_dir`` is given, reports stream to
    ``losses.jsonl`` there and the best-validation weights go to
    ``best.ckpt``.
    """
    if len(train_data) == 0:
        raise ValueError("empty training set")
    cfg_m = model.cfg
    if train_data.shape[1:] != (cfg_m.seq_len, cfg_m.d_model):
        raise DimensionError(f"training samples {train_data.shape[1:]} do not match the model input")
    val_data = train_data if val_data is None else val_data
    modules = [model] + ([quantizer] if quantizer is not None else [])
    params = [p for m in modules for p in m.parameters()]
    if len({p.name for p in params}) != len(params):
        raise ConfigError("model and quantizer parameter names collide")
    state = AdamState.init(params)
    if quantizer is not None and hasattr(quantizer, "beta"):
        quantizer.beta = cfg.beta
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(3,)))

    if quantizer is not None:
        quantizer.calibrate(encoder_outputs(model, train_data))

    run_path = Path(run_dir) if run_dir is not None else None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "losses.jsonl").write_text("")

    reports: list[LossReport] = []
    best_db, best_state = math.inf, None
    n = len(train_data)
    for epoch in range(cfg.epochs):
        lr = cosine_warmup_lr(epoch, cfg)
        for m in modules:
            m.train()
        order = rng.permutation(n)
        sums = np.zeros(3)
        for start in range(0, n, cfg.batch_size):
            x = Tensor(train_data[order[start:start + cfg.batch_size]])
            out, cb_term, cm_term = feedback_forward(model, quantizer, x)
            mse = mse_loss(x, out)
            vq = None if cb_term is None else cb_term + cm_term
            loss = total_loss(mse, vq)
            if not np.isfinite(loss.item()):
                _raise_nonfinite(loss)
            for p in params:
                p.zero_grad()
            ad.backward(loss)
            adam_step(params, [p.grad for p in params], state, lr)
            w = len(x.data)
            sums += w * np.array([mse.item(),
                                  0.0 if cb_term is None else cb_term.item(),
                                  0.0 if cm_term is None else cm_term.item()])
        if isinstance(quantizer, _ScalarQuantizer):
            quantizer.end_epoch()
        val_db = evaluate_nmse(model, quantizer, val_data, scale)
        report = LossReport(epoch, *(sums / n).tolist(), val_db, lr)
        reports.append(report)
        logger.info("epoch %d mse %.3e val %.2f dB lr %.2e", epoch, report.mse, val_db, lr)
        if run_path is not None:
            with open(run_path / "losses.jsonl", "a") as fh:
                fh.write(report.to_json() + "\n")
        if val_db < best_db:
            best_db = val_db
            best_state = [m.state_dict() for m in modules]
            best_meta = quantizer.meta() if quantizer is not None else None
            if run_path is not None:
                save_checkpoint(run_path / "best.ckpt", model, quantizer)

    if restore_best and best_state is not None:
        for m, s in zip(modules, best_state):
            m.load_state_dict(s)
        if isinstance(quantizer, _ScalarQuantizer) and best_meta is not None:
            quantizer.lo, quantizer.hi = best_meta["lo"], best_meta["hi"]
    return model, reports


def save_checkpoint(path, model: CsiConformer, quantizer: Optional[Quantizer] = None,
                    extra: Optional[dict] = None) -> None:
    meta = dict(extra or {})
    extra_params = {}
    if quantizer is not None:
        meta["quantizer"] = quantizer.meta()
        extra_params = {f"quantizer.{k}": v for k, v in quantizer.state_dict().items()}
    save_model(path, model, meta, extra_params)


def load_checkpoint(path):
    """Returns ``(model, quantizer or None, metadata)``."""
    model, meta, rest = load_model(path)
    quantizer = None
    if "quantizer" in meta:
        qparams = {k[len("quantizer."):]: v for k, v in rest.items() if k.startswith("quantizer.")}
        quantizer = quantizer_from_meta(meta["quantizer"], qparams)
    return model, quantizer, meta
