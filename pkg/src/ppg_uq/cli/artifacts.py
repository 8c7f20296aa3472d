"""Run-directory file formats: versioned prediction CSVs, loss logs, JSON sidecars."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

PREDICTION_SCHEMA = "ppg_uq.predictions"
PREDICTION_VERSION = 1
AF_CLASSES = ("regular", "irregular")
BP_HEADS = ("sbp", "dbp")


class SchemaError(ValueError):
    """Malformed or unsupported artifact (exit code 4)."""


def fmt(x) -> str:
    """Shortest round-trip decimal text for a float; plain text for ints."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def header_line(**fields) -> str:
    return "# " + ";".join(f"{k}={v}" for k, v in fields.items()) + "\n"


def parse_header_line(line: str) -> dict:
    if not line.startswith("# "):
        raise SchemaError("missing '# key=value;...' metadata line")
    out = {}
    for part in line[2:].strip().split(";"):
        if "=" not in part:
            raise SchemaError(f"malformed metadata field {part!r}")
        k, v = part.split("=", 1)
        out[k] = v
    return out


def prediction_columns(task: str) -> list[str]:
    if task == "af":
        return ["id", "label", "p_regular", "p_irregular", "predicted", "H_total", "H_ale", "H_epi",
                "true_noise_sigma"]
    cols = ["id"]
    for h in BP_HEADS:
        cols += [f"{h}_true", f"{h}_pred", f"{h}_sigma2_epi", f"{h}_sigma2_ale", f"{h}_sigma2_total",
                 f"{h}_true_noise_sigma"]
    return cols


def write_predictions(path, task: str, rows: list[list], *, seed: int, config_hash: str, split: str) -> None:
    buf = io.StringIO()
    buf.write(header_line(schema=PREDICTION_SCHEMA, version=PREDICTION_VERSION, task=task, split=split,
                          seed=seed, config_hash=config_hash))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(prediction_columns(task))
    for r in rows:
        writer.writerow([fmt(v) for v in r])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_predictions(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (metadata, column -> float array); rejects unknown schema versions."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise SchemaError(f"cannot read predictions file {path}: {exc}") from exc
    lines = text.split("\n")
    meta = parse_header_line(lines[0])
    if meta.get("schema") != PREDICTION_SCHEMA:
        raise SchemaError(f"not a predictions file (schema={meta.get('schema')!r})")
    if meta.get("version") != str(PREDICTION_VERSION):
        raise SchemaError(f"unsupported predictions version {meta.get('version')!r}; "
                          f"this build reads version {PREDICTION_VERSION}")
    task = meta.get("task")
    if task not in ("af", "bp"):
        raise SchemaError(f"unknown task {task!r} in predictions header")
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    header = next(reader, None)
    if header != prediction_columns(task):
        raise SchemaError(f"column header does not match the {task} schema")
    body = [r for r in reader if r]
    try:
        data = np.array([[float(v) for v in r] for r in body], dtype=np.float64).reshape(len(body), len(header))
    except ValueError as exc:
        raise SchemaError(f"non-numeric or ragged row in {path}: {exc}") from exc
    return meta, {c: data[:, i] for i, c in enumerate(header)}


def write_loss_log(path, history: list[dict], *, seed: int, config_hash: str) -> None:
    buf = io.StringIO()
    buf.write(header_line(schema="ppg_uq.losslog", version=1, seed=seed, config_hash=config_hash))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "train_loss", "val_loss"])
    for rec in history:
        writer.writerow([rec["epoch"], fmt(rec["train_loss"]), fmt(rec["val_loss"])])
    Path(path).write_text(buf.getvalue(), encoding="utf-8", newline="")


def read_loss_log(path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    rows = list(csv.DictReader(lines[1:]))
    return [{"epoch": int(r["epoch"]), "train_loss": float(r["train_loss"]), "val_loss": float(r["val_loss"])}
            for r in rows]


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    if isinstance(v, np.generic):
        v = v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read JSON {path}: {exc}") from exc
