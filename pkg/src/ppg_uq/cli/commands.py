"""The five workflow commands.  Each returns plain data and raises typed errors;
:func:`ppg_uq.cli.main` maps those to exit codes."""

from __future__ import annotations

import dataclasses
import logging
import shutil
from pathlib import Path

import numpy as np

from .. import calib
from ..checkpoint import read_container, write_container
from ..nn import ModelConfig, ParamSet, build_model
from ..optim import IvonHyper, IvonState
from ..rng import RngStream
from ..synthdata import (DATASET_FORMAT, DATASET_VERSION, Dataset, PressureConfig, RhythmConfig, SplitSpec,
                         config_dict, file_sha256, gen_hetero_regression, gen_rhythm_task, load_dataset,
                         save_dataset, split, to_dataset)
from ..tensor import Tensor
from ..train import TrainSettings, fit
from ..uq import ClassificationUQ, RegressionUQ, epistemic_share, ivon_eval, mcd_eval_classification, \
    mcd_eval_regression
from . import artifacts as A
from .config import ConfigError, RunConfig, default_output_root, load_config

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
EVAL_BRANCH = 2**40          # sub-stream index reserved for evaluation draws
MANIFEST = "manifest.json"
CONFIG_SNAPSHOT = "config.txt"
CHECKPOINT = "best.ckpt"
RUN_INFO = "run.json"
LOSS_LOG = "loss_log.csv"
BIVAR_EDGES = tuple(float(e) for e in np.arange(0.0, 44.0, 4.0))   # mmHg, both axes
AF_METRICS = ("ece", "uce", "pearson", "perf")
BP_METRICS = ("ence", "coverage", "bivar", "pearson", "perf")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def _dataset_paths(root: Path) -> dict[str, Path]:
    return {s: root / f"{s}.ppgds" for s in SPLITS}


def cmd_generate(config: RunConfig, force: bool = False) -> Path:
    """Write train/val/test dataset files plus ``manifest.json``; return the manifest path."""
    cfg = config.resolved()
    out = Path(cfg.output) if cfg.output else default_output_root() / f"data-{cfg.task}-seed{cfg.data_seed}"
    manifest_path = out / MANIFEST
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
        if manifest_path.exists():
            log.warning("overwriting dataset with manifest sha256 %s", file_sha256(manifest_path))
        for path in out.iterdir():
            shutil.rmtree(path) if path.is_dir() else path.unlink()
    out.mkdir(parents=True, exist_ok=True)

    n_total = cfg.n_train + cfg.n_val + cfg.n_test
    rng = RngStream(cfg.data_seed, "data")
    if cfg.task == "af":
        gen_cfg = RhythmConfig()
        signals = gen_rhythm_task(n_total, cfg.class_balance, rng, gen_cfg)
    else:
        gen_cfg = PressureConfig()
        signals = gen_hetero_regression(n_total, rng, gen_cfg)
    full = to_dataset(signals, cfg.task)
    fractions = (cfg.n_train / n_total, cfg.n_val / n_total, cfg.n_test / n_total)
    parts = split(full, SplitSpec(fractions, cfg.grouping, cfg.data_seed))

    files = {}
    for name, part in zip(SPLITS, parts):
        path = _dataset_paths(out)[name]
        save_dataset(part, path)
        entry = {"file": path.name, "sha256": file_sha256(path), "n": len(part)}
        if cfg.task == "af":
            entry["class_counts"] = {lbl: int((part.y == c).sum()) for c, lbl in enumerate(A.AF_CLASSES)}
            entry["boundary_count"] = int(part.meta["boundary"].sum())
        files[name] = entry
    manifest = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "task": cfg.task,
        "data_seed": cfg.data_seed,
        "grouping": cfg.grouping,
        "requested": {"n_train": cfg.n_train, "n_val": cfg.n_val, "n_test": cfg.n_test},
        "generator": config_dict(gen_cfg),
        "splits": files,
    }
    if cfg.task == "af":
        manifest["class_balance"] = cfg.class_balance
        manifest["realized_class_balance"] = float(full.y.mean())
    A.write_json(manifest_path, manifest)
    log.info("wrote %d examples to %s", n_total, out)
    return manifest_path


def read_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    m = A.read_json(path)
    if m.get("format") != DATASET_FORMAT or m.get("version") != DATASET_VERSION:
        raise A.SchemaError(f"{path}: unsupported dataset manifest ({m.get('format')!r} v{m.get('version')!r})")
    m["_root"] = str(path.parent)
    m["_sha256"] = file_sha256(path)
    return m


def load_split(manifest: dict, name: str, task: str) -> Dataset:
    if name not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {name!r}")
    if manifest["task"] != task:
        raise ConfigError(f"dataset holds task {manifest['task']!r} but the run is configured for {task!r}")
    entry = manifest["splits"][name]
    path = Path(manifest["_root"]) / entry["file"]
    if file_sha256(path) != entry["sha256"]:
        raise A.SchemaError(f"{path}: checksum does not match the manifest")
    return load_dataset(path, task)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(task="classification" if cfg.task == "af" else "regression",
                       dropout_rate=cfg.dropout_rate, batchnorm_enabled=cfg.task == "bp",
                       width=cfg.width, output_scale=cfg.output_scale)


def train_settings(cfg: RunConfig) -> TrainSettings:
    return TrainSettings(method=cfg.method, epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
                         weight_decay=cfg.weight_decay, momentum=cfg.momentum, T=cfg.T, J_train=cfg.J_train,
                         h0=cfg.h0, ess=cfg.ess, beta2=cfg.beta2, clip=cfg.clip, patience=cfg.patience,
                         weighted_sampling=cfg.weighted_sampling, seed=cfg.seed, dropout_seed=cfg.dropout_seed)


def _run_dir(cfg: RunConfig) -> Path:
    if cfg.output:
        return Path(cfg.output)
    return default_output_root() / f"{cfg.task}-{cfg.method}-{cfg.config_hash()}"


def cmd_train(config: RunConfig) -> Path:
    """Train per ``config`` and write the run directory; return its path."""
    cfg = config.resolved()
    if not cfg.data:
        raise ConfigError("train needs a dataset manifest (data = <path to manifest.json>)")
    manifest = read_manifest(cfg.data)
    train_ds = load_split(manifest, "train", cfg.task)
    val_ds = load_split(manifest, "val", cfg.task)
    run = _run_dir(cfg)
    run.mkdir(parents=True, exist_ok=True)
    chash = cfg.config_hash()
    (run / CONFIG_SNAPSHOT).write_text(f"# seed={cfg.seed};config_hash={chash}\n" + cfg.to_text(),
                                       encoding="utf-8")

    model = build_model(model_config(cfg), RngStream(cfg.seed, "init"))
    history: list[dict] = []
    try:
        result = fit(model, train_ds, val_ds, train_settings(cfg), on_epoch=history.append)
    finally:
        A.write_loss_log(run / LOSS_LOG, history, seed=cfg.seed, config_hash=chash)

    entries = [(name, t.data) for name, t in result.best_state]
    if result.ivon is not None:
        names = model.parameters().names()
        entries += [(f"ivon.h/{n}", h) for n, h in zip(names, result.ivon.h)]
        entries += [(f"ivon.g/{n}", g) for n, g in zip(names, result.ivon.g)]
        entries.append(("ivon.t", np.array([result.ivon.t], dtype=np.int64)))
    write_container(run / CHECKPOINT, entries)
    best = next(r for r in history if r["epoch"] == result.best_epoch) if history else {}
    A.write_json(run / RUN_INFO, {
        "seed": cfg.seed, "config_hash": chash, "dropout_seed": cfg.dropout_seed,
        "best_epoch": result.best_epoch, "best_val_loss": best.get("val_loss"),
        "epochs_run": len(history), "data_manifest_sha256": manifest["_sha256"],
        "data_manifest": str(Path(manifest["_root"]) / MANIFEST),
        "checkpoint": CHECKPOINT, "checkpoint_sha256": file_sha256(run / CHECKPOINT),
    })
    return run


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def load_run(run_dir) -> tuple[RunConfig, dict]:
    run = Path(run_dir)
    if not (run / CONFIG_SNAPSHOT).exists():
        raise A.SchemaError(f"{run} is not a run directory (no {CONFIG_SNAPSHOT})")
    cfg = load_config(run / CONFIG_SNAPSHOT).resolved()
    return cfg, A.read_json(run / RUN_INFO)


def _restore(run: Path, cfg: RunConfig, n_train: int):
    model = build_model(model_config(cfg), RngStream(cfg.seed, "init"))
    if not (run / CHECKPOINT).exists():
        raise A.SchemaError(f"{run}: checkpoint {CHECKPOINT} missing")
    raw = read_container(run / CHECKPOINT)
    model.load_state(ParamSet((n, Tensor(a)) for n, a in raw.items() if not n.startswith("ivon")))
    ivon = None
    if cfg.method == "ivon":
        names = model.parameters().names()
        hyper = IvonHyper(lr=cfg.lr, beta1=cfg.momentum, beta2=cfg.beta2, weight_decay=cfg.weight_decay,
                          ess=cfg.ess or float(n_train), h0=cfg.h0, clip=cfg.clip)
        try:
            ivon = IvonState(m=[model.parameters()[n].data.astype(np.float64) for n in names],
                             h=[raw[f"ivon.h/{n}"].astype(np.float64) for n in names],
                             g=[raw[f"ivon.g/{n}"].astype(np.float64) for n in names],
                             hyper=hyper, t=int(raw["ivon.t"][0]))
        except KeyError as exc:
            raise A.SchemaError(f"{run}: IVON posterior entry {exc} missing from checkpoint") from exc
    return model, ivon


def predict(model, ivon, cfg: RunConfig, ds: Dataset) -> ClassificationUQ | RegressionUQ:
    noise_rng = RngStream(cfg.seed, "logit-noise").child(EVAL_BRANCH)
    if cfg.task == "bp":
        return mcd_eval_regression(model, ds.x, cfg.K, RngStream(cfg.dropout_seed, "dropout").child(EVAL_BRANCH),
                                   batch_size=cfg.eval_batch_size)
    if ivon is not None:
        return ivon_eval(model, ivon, ds.x, cfg.J, cfg.T, RngStream(cfg.seed, "ivon-sample").child(EVAL_BRANCH),
                         noise_rng, batch_size=cfg.eval_batch_size)
    return mcd_eval_classification(model, ds.x, cfg.K, cfg.T,
                                   RngStream(cfg.dropout_seed, "dropout").child(EVAL_BRANCH), noise_rng,
                                   batch_size=cfg.eval_batch_size)


def prediction_rows(ds: Dataset, uq) -> list[list]:
    rows = []
    if ds.task == "af":
        for i in range(len(ds)):
            rows.append([int(ds.ids[i]), int(ds.y[i]), uq.p_mean[i, 0], uq.p_mean[i, 1], int(uq.predicted_class[i]),
                         uq.H_total[i], uq.H_ale[i], uq.H_epi[i], ds.noise[i]])
        return rows
    for i in range(len(ds)):
        row = [int(ds.ids[i])]
        for h in range(2):
            row += [ds.y[i, h], uq.mu_mean[i, h], uq.sigma2_epi[i, h], uq.sigma2_ale[i, h], uq.sigma2_total[i, h],
                    ds.noise[i, h]]
        rows.append(row)
    return rows


def cmd_evaluate(run_dir, split_name: str = "test", data=None) -> Path:
    """Write ``predictions_<split>.csv`` into the run directory and return its path."""
    run = Path(run_dir)
    cfg, info = load_run(run)
    manifest = read_manifest(data or cfg.data)
    if manifest["_sha256"] != info.get("data_manifest_sha256"):
        log.warning("dataset manifest differs from the one used for training")
    ds = load_split(manifest, split_name, cfg.task)
    model, ivon = _restore(run, cfg, manifest["splits"]["train"]["n"])
    uq = predict(model, ivon, cfg, ds)
    path = run / f"predictions_{split_name}.csv"
    A.write_predictions(path, cfg.task, prediction_rows(ds, uq), seed=cfg.seed, config_hash=cfg.config_hash(),
                        split=split_name)
    return path


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _median_share(epi: np.ndarray, total: np.ndarray) -> float | None:
    share = epistemic_share((epi, total))
    share = share[np.isfinite(share)]
    return float(np.median(share)) if share.size else None


def _save_report(out: Path, rep: calib.CalibrationReport, stem: str) -> None:
    A.write_json(out / f"{stem}.json", rep.to_dict())
    if rep.curve:
        (out / f"{stem}_curve.csv").write_text(rep.curve_csv(), encoding="utf-8", newline="")


def _report_af(cols: dict, metrics, out: Path, warnings: list) -> dict:
    y = cols["label"].astype(np.int64)
    p = np.stack([cols["p_regular"], cols["p_irregular"]], axis=1)
    correct = (cols["predicted"].astype(np.int64) == y).astype(np.float64)
    labels = dict(enumerate(A.AF_CLASSES))
    for c, name in labels.items():
        if not (y == c).any():
            warnings.append(f"class {name!r} has no records; per-class entries omitted")
    summary: dict = {"n": int(len(y)),
                     "epistemic_share_median": _median_share(cols["H_epi"], cols["H_total"]),
                     "mean_H_total": float(cols["H_total"].mean()) if len(y) else None}
    table = {}
    if "uce" in metrics:
        reps = calib.per_class_reports(y, calib.uce, cols["H_total"], correct, classes=list(labels), labels=labels)
        for rep in reps:
            _save_report(out, rep, f"uce_{rep.class_scope}")
        table["UCE"] = {("total" if r.class_scope == "all" else r.class_scope): r.value for r in reps}
    if "ece" in metrics:
        reps = calib.per_class_reports(y, calib.ece, p, y, classes=list(labels), labels=labels)
        for rep in reps:
            _save_report(out, rep, f"ece_{rep.class_scope}")
        table["ECE"] = {("total" if r.class_scope == "all" else r.class_scope): r.value for r in reps}
        glob = calib.ece_global(p, y, list(labels)) if len(y) else {}
        table["ECE_global_binning"] = {("total" if k == "all" else labels[int(k)]): v for k, v in glob.items()
                                       if v is not None}
    if "pearson" in metrics:
        r = {"total": calib.pearson_r(cols["H_ale"], cols["H_epi"])}
        for c, name in labels.items():
            if (y == c).any():
                r[name] = calib.pearson_r(cols["H_ale"][y == c], cols["H_epi"][y == c])
        table["pearson_r_ale_epi"] = r
    if "perf" in metrics:
        table["performance"] = calib.performance_metrics(p, y, positive_class=1)
    summary.update(table)
    return summary


def _report_bp(cols: dict, metrics, out: Path, warnings: list) -> dict:
    summary: dict = {"n": int(len(cols["id"]))}
    shares = []
    for h in A.BP_HEADS:
        y, mu = cols[f"{h}_true"], cols[f"{h}_pred"]
        epi, ale, tot = cols[f"{h}_sigma2_epi"], cols[f"{h}_sigma2_ale"], cols[f"{h}_sigma2_total"]
        head: dict = {"epistemic_share_median": _median_share(epi, tot)}
        shares.append(epistemic_share((epi, tot)))
        if "ence" in metrics:
            rep = calib.ence(y, mu, tot)
            _save_report(out, rep, f"ence_{h}")
            head["ENCE"] = rep.value
        if "coverage" in metrics:
            rep = calib.coverage_curve(y, mu, tot)
            _save_report(out, rep, f"coverage_{h}")
            head["CCE"] = rep.value
            head["CCE_sum"] = rep.extras["cce_sum"]
        if "bivar" in metrics:
            hist = calib.bivariate_histogram(np.abs(y - mu), np.sqrt(tot), BIVAR_EDGES, BIVAR_EDGES)
            A.write_json(out / f"bivar_{h}.json", hist.to_dict())
        if "pearson" in metrics:
            head["pearson_r_ale_epi"] = calib.pearson_r(ale, epi)
        if "perf" in metrics:
            head["MAE"] = calib.mae(y, mu)
        summary[h.upper()] = head
    allshare = np.concatenate(shares)
    allshare = allshare[np.isfinite(allshare)]
    summary["epistemic_share_median"] = float(np.median(allshare)) if allshare.size else None
    return summary


def cmd_report(predictions, metrics=None, out_dir=None) -> tuple[Path, list[str]]:
    """Write calibration reports and ``summary.json``; return (summary path, warnings)."""
    meta, cols = A.read_predictions(predictions)
    task = meta["task"]
    allowed = AF_METRICS if task == "af" else BP_METRICS
    metrics = tuple(allowed if metrics is None else metrics)
    bad = [m for m in metrics if m not in allowed]
    if bad:
        other = "regression" if task == "af" else "classification"
        raise ConfigError(f"metric(s) {bad} do not apply to {task} predictions (they are {other} metrics "
                          f"or unknown); choose from {list(allowed)}")
    pred = Path(predictions)
    out = Path(out_dir) if out_dir else pred.parent / f"report_{meta.get('split', 'unknown')}"
    out.mkdir(parents=True, exist_ok=True)
    warnings: list[str] = []
    body = (_report_af if task == "af" else _report_bp)(cols, metrics, out, warnings)
    summary = {"task": task, "split": meta.get("split"), "seed": int(meta["seed"]),
               "config_hash": meta["config_hash"], "metrics": list(metrics), "warnings": warnings, **body}
    path = out / "summary.json"
    A.write_json(path, summary)
    for w in warnings:
        log.warning(w)
    return path, warnings


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_AXES = {"dropout": "dropout_rate", "h0": "h0"}


def _trend(values: list) -> str | None:
    if any(v is None for v in values) or len(values) < 2:
        return None
    d = np.diff(values)
    if np.all(d > 0):
        return "increasing"
    if np.all(d < 0):
        return "decreasing"
    return "mixed"


def cmd_sweep(config: RunConfig, axis: str, values, split_name: str = "test") -> tuple[Path, list[str]]:
    """One train/evaluate/report run per value over a shared dataset; return (comparison path, failures)."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    values = [float(v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_AXES[axis]
    base = dataclasses.replace(config, **{key: values[0]}).resolved()  # validates the shared settings
    root = Path(config.output) if config.output else \
        default_output_root() / f"sweep-{axis}-{base.task}-{base.method}-{base.config_hash()}"
    root.mkdir(parents=True, exist_ok=True)
    if base.data:
        data = base.data
    else:
        data_dir = root / "data"
        if (data_dir / MANIFEST).exists():
            data = str(data_dir / MANIFEST)
        else:
            data = str(cmd_generate(dataclasses.replace(base, output=str(data_dir)), force=True))
    rows, failures = [], []
    for v in values:
        run_dir = root / f"{axis}-{v!r}"
        row = {"value": v, "run_dir": run_dir.name, "status": "ok"}
        try:
            cfg = dataclasses.replace(config, **{key: v}, data=data, output=str(run_dir)).resolved()
            cmd_train(cfg)
            pred = cmd_evaluate(run_dir, split_name)
            summary_path, warns = cmd_report(pred)
            s = A.read_json(summary_path)
            info = A.read_json(run_dir / RUN_INFO)
            row["best_epoch"] = info["best_epoch"]
            row["epistemic_share_median"] = s["epistemic_share_median"]
            if s["task"] == "af":
                row["auc"] = (s.get("performance") or {}).get("auc")
                row["mean_H_total"] = s.get("mean_H_total")
            else:
                for h in A.BP_HEADS:
                    row[f"mae_{h}"] = s[h.upper()].get("MAE")
                    row[f"share_{h}"] = s[h.upper()]["epistemic_share_median"]
            if warns:
                row["status"] = "ok-with-warnings"
        except Exception as exc:  # partial results are kept; the failure is recorded in the table
            log.error("sweep run %s=%r failed: %s", axis, v, exc)
            row["status"] = f"failed: {type(exc).__name__}: {exc}"
            failures.append(f"{axis}={v!r}: {exc}")
        rows.append(row)
    shares = [r.get("epistemic_share_median") for r in rows]
    comparison = {"axis": axis, "key": key, "values": values, "split": split_name, "data_manifest": data,
                  "seed": base.seed, "data_seed": base.data_seed, "runs": rows,
                  "epistemic_share_trend": _trend(shares)}
    A.write_json(root / "comparison.json", comparison)
    cols = sorted({k for r in rows for k in r} - {"value", "status", "run_dir"})
    lines = [",".join(["value", "status", *cols, "run_dir"])]
    for r in rows:
        cells = [A.fmt(r["value"]), '"' + r["status"].replace('"', "'") + '"']
        cells += ["" if r.get(c) is None else A.fmt(r[c]) for c in cols]
        lines.append(",".join([*cells, r["run_dir"]]))
    (root / "comparison.csv").write_text("\n".join(lines) + "\n", encoding="utf-8", newline="")
    return root / "comparison.json", failures
