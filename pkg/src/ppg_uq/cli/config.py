"""Run configuration: flat ``key = value`` files, flag overrides, validation, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

OUTPUT_ROOT_ENV = "PPG_UQ_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration (exit code 2)."""


@dataclass
class RunConfig:
    task: str = "af"                    # "af" (rhythm classification) | "bp" (pressure regression)
    method: str = "mcd"                 # "mcd" | "ivon"
    dropout_rate: float | None = None   # probability; default 0.05 (mcd) / 0 (ivon)
    h0: float = 0.1
    K: int | None = None                # MC dropout passes at evaluation
    T: int = 100                        # logit-noise samples
    J: int = 100                        # IVON posterior draws at evaluation
    J_train: int = 1                    # IVON posterior draws per training step
    epochs: int | None = None
    batch_size: int | None = None
    lr: float | None = None
    weight_decay: float | None = None
    momentum: float = 0.9
    beta2: float = 0.99999
    ess: float | None = None            # IVON effective sample size; default = training-set size
    clip: float | None = None           # IVON per-coordinate update clip
    patience: int | None = None
    seed: int = 0
    dropout_seed: int | None = None     # default = seed
    data_seed: int = 0
    width: float = 1.0
    output_scale: float | None = None
    n_train: int = 10_000
    n_val: int = 2_000
    n_test: int = 2_000
    class_balance: float = 0.4
    grouping: str | None = None         # "by-subject" | "pooled"
    weighted_sampling: bool = True
    eval_batch_size: int = 256
    data: str | None = None             # dataset manifest path
    output: str | None = None           # run / dataset directory

    # -- resolution ----------------------------------------------------------
    def resolved(self) -> "RunConfig":
        """Fill task/method-dependent defaults and validate."""
        c = dataclasses.replace(self)
        if c.task not in ("af", "bp"):
            raise ConfigError(f"task must be 'af' or 'bp', got {c.task!r}")
        if c.method not in ("mcd", "ivon"):
            raise ConfigError(f"method must be 'mcd' or 'ivon', got {c.method!r}")
        if c.method == "ivon" and c.task == "bp":
            raise ConfigError("method=ivon cannot be used with the bp task: its ResNet carries batchnorm, "
                              "which IVON does not support")
        ivon = c.method == "ivon"
        if c.dropout_rate is None:
            c.dropout_rate = 0.0 if ivon else 0.05
        if ivon and c.dropout_rate != 0.0:
            raise ConfigError("method=ivon trains a dropout-free model; set dropout_rate = 0")
        if not ivon and not 0.0 < c.dropout_rate < 1.0:
            raise ConfigError(f"method=mcd requires 0 < dropout_rate < 1, got {c.dropout_rate}")
        if c.K is None:
            c.K = 100 if c.task == "af" else 50
        if c.epochs is None:
            c.epochs = 50 if c.task == "af" else 100
        if c.batch_size is None:
            c.batch_size = 128 if ivon else 64
        if c.lr is None:
            c.lr = 0.02 if ivon else (1e-3 if c.task == "af" else 5e-5)
        if c.weight_decay is None:
            c.weight_decay = 1e-10 if c.task == "af" else 1e-8
        if c.patience is None and c.task == "af":
            c.patience = 10
        if c.output_scale is None:
            c.output_scale = 1.0 if c.task == "af" else 100.0
        if c.grouping is None:
            c.grouping = "by-subject" if c.task == "af" else "pooled"
        if c.dropout_seed is None:
            c.dropout_seed = c.seed
        checks = [
            (c.K >= (1 if c.task == "af" else 2), f"K must be >= {1 if c.task == 'af' else 2}, got {c.K}"),
            (c.T >= 1 and c.J >= 1 and c.J_train >= 1, "T, J and J_train must be >= 1"),
            (c.epochs >= 1 and c.batch_size >= 1, "epochs and batch_size must be >= 1"),
            (c.lr > 0, f"lr must be positive, got {c.lr}"),
            (c.weight_decay >= 0, f"weight_decay must be >= 0, got {c.weight_decay}"),
            (0 <= c.momentum < 1 and 0 <= c.beta2 < 1, "momentum and beta2 must lie in [0, 1)"),
            (c.h0 >= 0, f"h0 must be >= 0, got {c.h0}"),
            (c.width > 0 and c.output_scale > 0, "width and output_scale must be positive"),
            (min(c.n_train, c.n_val, c.n_test) >= 1, "split sizes must be >= 1"),
            (0 <= c.class_balance <= 1, f"class_balance must lie in [0, 1], got {c.class_balance}"),
            (c.grouping in ("by-subject", "pooled"), f"grouping must be 'by-subject' or 'pooled', got {c.grouping!r}"),
            (c.eval_batch_size >= 1, "eval_batch_size must be >= 1"),
            (c.seed >= 0 and c.dropout_seed >= 0 and c.data_seed >= 0, "seeds must be non-negative"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return c

    # -- serialisation -------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        """Hash of everything that affects results (output location excluded)."""
        d = self.to_dict()
        d.pop("output", None)
        d.pop("data", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(key: str, raw: str):
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    t = _TYPES[key]
    s = raw.strip()
    if s.lower() in ("none", "") and "None" in t:
        return None
    try:
        if t.startswith("bool"):
            if s.lower() in ("true", "1", "yes"):
                return True
            if s.lower() in ("false", "0", "no"):
                return False
            raise ValueError(s)
        if t.startswith("int"):
            return int(s)
        if t.startswith("float"):
            return float(s)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {t}") from None
    return s


def parse_text(text: str) -> dict:
    """``key = value`` per line; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """File values first, then ``overrides`` (already-typed or string values)."""
    values = {}
    if path is not None:
        try:
            values.update(parse_text(Path(path).read_text(encoding="utf-8")))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v) if isinstance(v, str) else v
    unknown = set(values) - set(_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    return RunConfig(**values)


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
