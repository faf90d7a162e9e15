"""``csikit`` command line: data generation, training, evaluation, quantizer grid, FLOPs."""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .autodiff import ConfigError, DimensionError, NumericError
from .channel import (ChannelConfig, ChannelConfigError, DatasetError, generate_synthetic, load_dataset, prepare,
                      save_dataset)
from .conformer import (VALID_CRS, CheckpointError, ConformerConfig, CsiConformer, ablation_config, fit_input_gain,
                        flops_count, param_count)
from .quantizers import BitstreamError, make_quantizer
from .training import TrainConfig, evaluate_nmse, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("csikit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
QUANTIZER_KINDS = ("svqvae", "uniform", "mulaw", "basevv")
SPLITS = ("train", "val", "test")


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

DEFAULTS = {
    "channel": asdict(ChannelConfig()),
    "data": {"count": 2000, "split": [10, 3, 2]},
    "model": {**asdict(ConformerConfig()), "ablation": "baseline", "input_gain": None},  # None: fit to train split
    "quantizer": {"kind": "none", "bits": 5, "dim": None, "mu": 255.0},
    "training": {k: v for k, v in asdict(TrainConfig()).items()
                 if k not in ("quantizer", "bits", "codebook_dim", "mu")},
    "compare": {"kinds": list(QUANTIZER_KINDS), "bits": [3, 4, 5], "epochs": None},
    "paths": {"run_dir": None, "data_dir": None, "checkpoint": None},
}
DEFAULTS["training"]["warmup_epochs"] = None


@dataclass
class RunConfig:
    channel: dict
    data: dict
    model: dict
    quantizer: dict
    training: dict
    compare: dict
    paths: dict
    explicit: frozenset = frozenset()  # "section.key" entries the user actually set

    @classmethod
    def build(cls, raw: Optional[dict] = None, overrides: tuple[str, ...] = ()) -> "RunConfig":
        merged = copy.deepcopy(DEFAULTS)
        explicit = set()
        for section, values in (raw or {}).items():
            if section not in merged:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be a mapping")
            for key, value in values.items():
                _set(merged, section, key, value)
                explicit.add(f"{section}.{key}")
        for item in overrides:
            path, sep, text = item.partition("=")
            if not sep or path.count(".") != 1:
                raise ConfigError(f"--set expects section.key=value, got {item!r}")
            section, key = path.split(".")
            if section not in merged:
                raise ConfigError(f"unknown config section {section!r}")
            _set(merged, section, key, yaml.safe_load(text))
            explicit.add(path)
        cfg = cls(**merged, explicit=frozenset(explicit))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.channel_config()
        except ChannelConfigError as exc:
            raise ConfigError(str(exc)) from exc
        self.model_config()
        self.train_config()
        split = self.data["split"]
        if len(split) != 3 or any(int(s) < 0 for s in split) or sum(split) <= 0:
            raise ConfigError(f"data.split must be three non-negative weights, got {split}")
        if int(self.data["count"]) < 3:
            raise ConfigError("data.count must be at least 3")
        if self.quantizer["kind"] not in ("none",) + QUANTIZER_KINDS:
            raise ConfigError(f"unknown quantizer kind {self.quantizer['kind']!r}")
        for kind in self.compare["kinds"]:
            if kind not in QUANTIZER_KINDS:
                raise ConfigError(f"unknown quantizer kind {kind!r} in compare.kinds")
        if self.channel["n_a"] != self.model["seq_len"] or 2 * self.channel["n_t"] != self.model["d_model"]:
            raise ConfigError("model.seq_len/d_model must equal channel.n_a / 2*channel.n_t")

    def channel_config(self) -> ChannelConfig:
        return ChannelConfig(**self.channel)

    def model_config(self, input_gain: Optional[float] = None) -> ConformerConfig:
        fields_ = {k: v for k, v in self.model.items() if k != "ablation"}
        fields_["input_gain"] = fields_["input_gain"] or input_gain or 1.0
        return ablation_config(self.model["ablation"], ConformerConfig.from_dict(fields_))

    def train_config(self, **changes) -> TrainConfig:
        q = self.quantizer
        kind = None if q["kind"] == "none" else q["kind"]
        values = {**self.training, "quantizer": kind, "bits": q["bits"], "codebook_dim": q["dim"], "mu": q["mu"]}
        values.update(changes)
        return TrainConfig.from_dict(values)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "explicit"}

    def config_hash(self) -> str:
        """Hash of everything that affects results (paths excluded)."""
        body = {k: v for k, v in self.to_dict().items() if k != "paths"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.training["seed"])

    def run_root(self) -> Path:
        root = self.paths["run_dir"] or os.environ.get("CSIKIT_RUN_DIR") or "runs"
        return Path(root)

    def data_dir(self) -> Path:
        return Path(self.paths["data_dir"]) if self.paths["data_dir"] else self.run_root() / "data"


def _set(merged: dict, section: str, key: str, value) -> None:
    if key not in merged[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    merged[section][key] = _coerce(value)


def _coerce(value):
    """YAML 1.1 reads exponent floats without a dot (``5e-5``) as strings."""
    if isinstance(value, list):
        return [_coerce(v) for v in value]
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}  # JSON is a subset of YAML
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("top level of the config must be a mapping")
    return data


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def split_counts(count: int, weights) -> tuple[int, int, int]:
    total = sum(weights)
    n_train = count * weights[0] // total
    n_val = count * weights[1] // total
    return n_train, n_val, count - n_train - n_val


def append_reports(cfg: RunConfig, records: list[dict]) -> None:
    """Append records to ``reports.jsonl`` and a readable table to ``reports.txt``."""
    root = cfg.run_root()
    root.mkdir(parents=True, exist_ok=True)
    stamped = [{"config_hash": cfg.config_hash(), "seed": cfg.seed, **r} for r in records]
    with open(root / "reports.jsonl", "a") as fh:
        for r in stamped:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    table = format_table(stamped)
    with open(root / "reports.txt", "a") as fh:
        fh.write(table + "\n\n")
    print(table)


def format_table(records: list[dict]) -> str:
    cols = [c for c in ("command", "ablation", "cr", "quantizer", "bits", "nmse_db", "bits_per_csi",
                        "flops", "flops_no_attention", "params", "split", "count") if any(c in r for r in records)]
    cell = lambda v: f"{v:.2f}" if isinstance(v, float) else ("-" if v is None else str(v))
    rows = [[cell(r.get(c)) for c in cols] for r in records]
    widths = [max(len(c), *(len(row[i]) for row in rows)) for i, c in enumerate(cols)]
    line = lambda items: "  ".join(s.rjust(w) for s, w in zip(items, widths))
    return "\n".join([line(cols), line(["-" * w for w in widths])] + [line(r) for r in rows])


def _new_run_dir(cfg: RunConfig, prefix: str) -> Path:
    base = cfg.run_root() / f"{prefix}-{cfg.config_hash()[:8]}"
    path, n = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{n}")
        n += 1
    return path


def _load_split(cfg: RunConfig, name: str):
    path = cfg.data_dir() / f"{name}.csid"
    try:
        data, scale = load_dataset(path)
    except DatasetError as exc:
        raise DataError(f"{path}: {exc}") from exc
    if data.shape[1:] != (cfg.channel["n_a"], 2 * cfg.channel["n_t"]):
        raise DataError(f"{path} holds {data.shape[1:]} samples, config expects "
                        f"({cfg.channel['n_a']}, {2 * cfg.channel['n_t']})")
    return data, scale


def _quantizer_for(cfg: RunConfig, kind: str, bits: int, mcfg: ConformerConfig):
    return make_quantizer(kind, mcfg.codeword_len, bits, dim=cfg.quantizer["dim"],
                          mu=cfg.quantizer["mu"], seed=cfg.seed)


def _bits_per_csi(quantizer, mcfg: ConformerConfig) -> int:
    return 32 * mcfg.codeword_len if quantizer is None else quantizer.bits_per_csi()


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, args) -> list[dict]:
    ccfg = cfg.channel_config()
    counts = split_counts(int(cfg.data["count"]), cfg.data["split"])
    out = cfg.data_dir()
    out.mkdir(parents=True, exist_ok=True)
    start, scale, records = 0, None, []
    for name, n in zip(SPLITS, counts):
        # consecutive stream indices keep the splits disjoint
        samples = generate_synthetic(ccfg, n, start=start) if n else []
        start += n
        if n:
            x, scale = prepare(samples, ccfg.n_a, scale)  # the train split fixes the scale
        else:
            x = np.zeros((0, ccfg.n_a, 2 * ccfg.n_t))
        save_dataset(out / f"{name}.csid", x, scale if scale is not None else 1.0)
        records.append({"command": "gen-data", "split": name, "count": n})
    return records


def cmd_train(cfg: RunConfig, args) -> list[dict]:
    tcfg = cfg.train_config()
    train_x, scale = _load_split(cfg, "train")
    val_x, _ = _load_split(cfg, "val")
    if len(train_x) == 0:
        raise DataError("training split is empty")
    mcfg = cfg.model_config(fit_input_gain(train_x, cfg.model["input_center"]))
    quantizer = None if tcfg.quantizer is None else _quantizer_for(cfg, tcfg.quantizer, tcfg.bits, mcfg)
    run_dir = _new_run_dir(cfg, "train")
    model, reports = train(CsiConformer(mcfg), quantizer, train_x, tcfg,
                           val_data=val_x if len(val_x) else None, scale=scale, run_dir=run_dir)
    meta = {"run_config": cfg.to_dict(), "config_hash": cfg.config_hash()}
    save_checkpoint(run_dir / "model.ckpt", model, quantizer, extra=meta)
    return [{"command": "train", "ablation": cfg.model["ablation"], "cr": mcfg.cr,
             "quantizer": tcfg.quantizer, "bits": tcfg.bits if quantizer is not None else None,
             "nmse_db": min(r.val_nmse_db for r in reports), "epochs": len(reports),
             "checkpoint": _display_path(cfg, run_dir / "model.ckpt")}]


def _display_path(cfg: RunConfig, path: Path) -> str:
    """Paths inside the run root are reported relative to it, so reports do not depend on where runs live."""
    try:
        return str(Path(path).resolve().relative_to(cfg.run_root().resolve()))
    except ValueError:
        return str(path)


def _checkpoint_path(cfg: RunConfig, args) -> Path:
    path = getattr(args, "checkpoint", None) or cfg.paths["checkpoint"]
    if not path:
        raise ConfigError("a checkpoint is required (--checkpoint or paths.checkpoint)")
    path = Path(path)
    if not path.is_absolute() and not path.exists() and (cfg.run_root() / path).exists():
        path = cfg.run_root() / path  # as printed in reports
    return path


def _load_checked(cfg: RunConfig, path: Path):
    try:
        model, quantizer, meta = load_checkpoint(path)
    except (OSError, CheckpointError, KeyError, BitstreamError) as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    stored = asdict(model.cfg)
    wanted = asdict(cfg.model_config())
    diff = {k: (stored[k], wanted[k]) for k in stored
            if f"model.{k}" in cfg.explicit and stored[k] != wanted[k]}
    if diff:
        lines = "\n".join(f"  model.{k}: checkpoint={a!r} config={b!r}" for k, (a, b) in sorted(diff.items()))
        raise ConfigError(f"checkpoint does not match the configuration:\n{lines}")
    return model, quantizer, meta


def _report_row(command: str, model, quantizer, nmse: float, ablation: str) -> dict:
    mcfg = model.cfg
    return {"command": command, "ablation": ablation, "cr": mcfg.cr,
            "quantizer": None if quantizer is None else quantizer.meta()["kind"],
            "bits": None if quantizer is None else quantizer.bits,
            "nmse_db": nmse, "bits_per_csi": _bits_per_csi(quantizer, mcfg),
            "flops": flops_count(mcfg), "params": param_count(model)}


def _ablation_name(meta: dict, cfg: RunConfig) -> str:
    return meta.get("run_config", {}).get("model", {}).get("ablation", cfg.model["ablation"])


def cmd_eval(cfg: RunConfig, args) -> list[dict]:
    path = _checkpoint_path(cfg, args)
    model, quantizer, meta = _load_checked(cfg, path)
    test_x, scale = _load_split(cfg, "test")
    if len(test_x) == 0:
        raise DataError("test split is empty")
    if test_x.shape[1:] != (model.cfg.seq_len, model.cfg.d_model):
        raise DataError("test samples do not match the checkpoint's model dimensions")
    nmse = evaluate_nmse(model, quantizer, test_x, scale)
    return [{**_report_row("eval", model, quantizer, nmse, _ablation_name(meta, cfg)), "checkpoint": _display_path(cfg, path)}]


def cmd_quantize_compare(cfg: RunConfig, args) -> list[dict]:
    path = _checkpoint_path(cfg, args)
    _, base_q, meta = _load_checked(cfg, path)
    if base_q is not None:
        raise ConfigError("quantize-compare expects an unquantized base checkpoint")
    train_x, scale = _load_split(cfg, "train")
    val_x, _ = _load_split(cfg, "val")
    test_x, _ = _load_split(cfg, "test")
    epochs = cfg.compare["epochs"] or cfg.training["epochs"]
    ablation = _ablation_name(meta, cfg)
    rows = []
    for kind in cfg.compare["kinds"]:
        for bits in cfg.compare["bits"]:
            model, _, _ = load_checkpoint(path)  # every cell starts from the same weights
            q = _quantizer_for(cfg, kind, int(bits), model.cfg)
            tcfg = cfg.train_config(epochs=epochs, quantizer=kind, bits=int(bits),
                                    warmup_epochs=None if epochs != cfg.training["epochs"]
                                    else cfg.training["warmup_epochs"])
            model, _ = train(model, q, train_x, tcfg, val_data=val_x if len(val_x) else None, scale=scale)
            rows.append(_report_row("quantize-compare", model, q, evaluate_nmse(model, q, test_x, scale), ablation))
    return rows


def cmd_flops(cfg: RunConfig, args) -> list[dict]:
    base = cfg.model_config()
    rows = []
    for cr in VALID_CRS:
        mcfg = base.replace(cr=cr)
        rows.append({"command": "flops", "ablation": cfg.model["ablation"], "cr": cr,
                     "flops": flops_count(mcfg),
                     "flops_no_attention": flops_count(mcfg, exclude=("attention_proj", "attention_product")),
                     "params": param_count(CsiConformer(mcfg))})
    return rows


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "quantize-compare": cmd_quantize_compare,
    "flops": cmd_flops,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csikit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        p.add_argument("--run-dir", help="output root (default: $CSIKIT_RUN_DIR or ./runs)")
        if name in ("train", "quantize-compare", "flops"):
            p.add_argument("--ablation", choices=("baseline", "none_conv", "conformer2"))
            p.add_argument("--cr", type=int, choices=VALID_CRS)
        if name == "train":
            p.add_argument("--quantizer", choices=("none",) + QUANTIZER_KINDS)
            p.add_argument("--bits", type=int)
        if name in ("eval", "quantize-compare"):
            p.add_argument("--checkpoint")
    return parser


def resolve_config(args) -> RunConfig:
    raw = load_config_file(args.config) if args.config else {}
    sets = list(args.set)
    shortcuts = {"ablation": "model.ablation", "cr": "model.cr", "quantizer": "quantizer.kind",
                 "bits": "quantizer.bits", "run_dir": "paths.run_dir"}
    for attr, key in shortcuts.items():
        value = getattr(args, attr, None)
        if value is not None:
            sets.append(f"{key}={value}")
    return RunConfig.build(raw, tuple(sets))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        records = COMMANDS[args.command](cfg, args)
        append_reports(cfg, records)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
