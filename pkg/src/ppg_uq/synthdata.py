"""Synthetic pulse-signal tasks with known ground-truth noise.

Rhythm task (binary, 25 s at 32 Hz): pulse trains whose inter-beat interval
coefficient of variation (CV) decides the label -- ``CV >= 0.15`` is the
irregular class 1.  Intervals are standardised so the realised CV equals the
drawn CV exactly.  A configurable fraction of examples sits close to the
threshold ("boundary" examples).

Pressure task (10 s at 125 Hz): latent (SBP, DBP) are encoded in the pulse
shape -- upstroke time falls linearly with SBP, the relative height of the
diastolic wave grows linearly with DBP.  A per-example quality level sets both
the visible signal noise and the standard deviation of the Gaussian noise added
to the observed targets (recorded in ``true_noise_sigma``).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import read_container, write_container
from .rng import RngStream

RHYTHM_FS = 32.0
RHYTHM_LENGTH = 800
PRESSURE_FS = 125.0
PRESSURE_LENGTH = 1250
SBP_MEAN, SBP_SD = 115.48, 18.92
DBP_MEAN, DBP_SD = 62.92, 12.08

# linear, invertible feature encodings of (SBP, DBP)
RISE_AT_80, RISE_SLOPE = 0.36, 0.0025      # s, s/mmHg: 80 -> 0.36 s, 180 -> 0.11 s
RATIO_AT_35, RATIO_SLOPE = 0.1, 0.011      # 35 -> 0.10, 115 -> 0.98
DIASTOLIC_DELAY, DIASTOLIC_WIDTH = 0.25, 0.05  # s

RHYTHM_META = ("subject", "cv", "rate_hz", "artifact", "boundary")
PRESSURE_META = ("subject", "sbp_latent", "dbp_latent", "rise_time", "diastolic_ratio", "quality", "rate_hz",
                 "artifact")


@dataclass
class SynthSignal:
    samples: np.ndarray
    label: int | tuple[float, float]
    true_noise_sigma: float | tuple[float, float]
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# rhythm (classification) task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RhythmConfig:
    length: int = RHYTHM_LENGTH
    fs: float = RHYTHM_FS
    cv_threshold: float = 0.15
    easy_regular_cv: tuple[float, float] = (0.0, 0.04)
    easy_irregular_cv: tuple[float, float] = (0.25, 0.45)
    boundary_band: float = 0.05
    boundary_fraction: float = 0.15
    noise_sigma: tuple[float, float] = (0.05, 0.25)
    rate_hz: tuple[float, float] = (0.9, 1.6)
    artifact_rate: float = 0.0
    examples_per_subject: int = 25
    normalize: bool = True


def _standardised(z: np.ndarray) -> np.ndarray:
    z = z - z.mean()
    sd = z.std()
    return z / sd if sd > 0 else z


def beat_intervals(n: int, mean_interval: float, cv: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` intervals with sample mean ``mean_interval`` and sample CV exactly ``cv``."""
    if cv == 0.0:
        return np.full(n, mean_interval)
    z = _standardised(rng.uniform(-math.sqrt(3.0), math.sqrt(3.0), n))
    return mean_interval * (1.0 + cv * z)


def _pulse(tau: np.ndarray, period: float, amp: float, ratio: float, rise: float) -> np.ndarray:
    systolic = np.exp(-0.5 * ((tau - rise) / (0.45 * rise)) ** 2)
    diastolic = ratio * np.exp(-0.5 * ((tau - (rise + 0.22 * period)) / (0.09 * period)) ** 2)
    return amp * (systolic + diastolic) * (tau >= 0)


def _pressure_pulse(tau: np.ndarray, rise: float, ratio: float) -> np.ndarray:
    """Systolic wave peaking at ``rise`` (width ~ rise) plus a fixed-delay, fixed-width diastolic wave."""
    systolic = np.exp(-0.5 * ((tau - rise) / (0.45 * rise)) ** 2)
    diastolic = ratio * np.exp(-0.5 * ((tau - (rise + DIASTOLIC_DELAY)) / DIASTOLIC_WIDTH) ** 2)
    return (systolic + diastolic) * (tau >= 0)


def _render(beats: np.ndarray, t: np.ndarray, period: float, amps, ratios, rise: float,
            pulse=None) -> np.ndarray:
    sig = np.zeros_like(t)
    for onset, a, r in zip(beats, amps, ratios):
        lo = np.searchsorted(t, onset)
        hi = np.searchsorted(t, onset + 1.5 * period)
        if hi > lo:
            tau = t[lo:hi] - onset
            sig[lo:hi] += a * _pressure_pulse(tau, rise, r) if pulse == "pressure" else \
                _pulse(tau, period, a, r, rise)
    return sig


def _artifact(t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    centre = rng.uniform(t[0], t[-1])
    width = rng.uniform(1.0, 3.0)
    return rng.uniform(1.0, 2.5) * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t) * np.exp(
        -0.5 * ((t - centre) / width) ** 2)


def _normalise(x: np.ndarray) -> np.ndarray:
    sd = x.std()
    return (x - x.mean()) / sd if sd > 0 else x - x.mean()


def rhythm_signal(cv: float, rate_hz: float, noise_sigma: float, gen: np.random.Generator,
                  cfg: RhythmConfig = RhythmConfig(), artifact: bool = False) -> np.ndarray:
    duration = cfg.length / cfg.fs
    t = np.arange(cfg.length) / cfg.fs
    period = 1.0 / rate_hz
    n_beats = int(math.ceil(duration / period)) + 3
    intervals = beat_intervals(n_beats, period, cv, gen)
    beats = gen.uniform(-period, 0.0) + np.concatenate([[0.0], np.cumsum(intervals)[:-1]])
    morph = min(1.0, cv / 0.3) * 0.3
    amps = 1.0 + morph * gen.standard_normal(n_beats)
    ratios = np.clip(0.45 + morph * gen.standard_normal(n_beats), 0.05, 1.0)
    sig = _render(beats, t, period, amps, ratios, rise=0.14)
    if artifact:
        sig += _artifact(t, gen)
    sig += noise_sigma * gen.standard_normal(cfg.length)
    return _normalise(sig) if cfg.normalize else sig


def gen_rhythm_task(n: int, class_balance: float = 0.4, rng: RngStream | None = None,
                    cfg: RhythmConfig = RhythmConfig()) -> list[SynthSignal]:
    """``n`` rhythm examples; ``class_balance`` is the expected share of class 1."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not 0.0 <= class_balance <= 1.0:
        raise ValueError(f"class_balance must lie in [0, 1], got {class_balance}")
    rng = rng or RngStream(0, "data")
    subj_rng, ex_rng = rng.child(1), rng.child(0)
    n_subjects = max(1, n // cfg.examples_per_subject)
    base_rates = [subj_rng.child(s).generator.uniform(*cfg.rate_hz) for s in range(n_subjects)]
    thr, band = cfg.cv_threshold, cfg.boundary_band
    out = []
    for i in range(n):
        gen = ex_rng.child(i).generator
        subject = int(gen.integers(n_subjects))
        irregular = gen.random() < class_balance
        boundary = gen.random() < cfg.boundary_fraction
        if boundary:
            cv = gen.uniform(thr, thr + band) if irregular else gen.uniform(thr - band, thr)
        else:
            cv = gen.uniform(*(cfg.easy_irregular_cv if irregular else cfg.easy_regular_cv))
        rate = base_rates[subject] * gen.uniform(0.95, 1.05)
        sigma = gen.uniform(*cfg.noise_sigma)
        artifact = gen.random() < cfg.artifact_rate
        x = rhythm_signal(cv, rate, sigma, gen, cfg, artifact)
        label = int(cv >= thr)
        out.append(SynthSignal(x.astype(np.float32), label, float(sigma), {
            "subject": subject, "cv": float(cv), "rate_hz": float(rate),
            "artifact": int(artifact), "boundary": int(boundary)}))
    return out


# ---------------------------------------------------------------------------
# pressure (regression) task
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PressureConfig:
    length: int = PRESSURE_LENGTH
    fs: float = PRESSURE_FS
    target_sigma: tuple[float, float] = (2.0, 12.0)   # SBP noise sd range, mmHg
    dbp_sigma_ratio: float = 0.6
    signal_noise: tuple[float, float] = (0.01, 0.08)
    noise_scale: float = 1.0                          # 0 -> noise-free targets and signals
    rate_hz: tuple[float, float] = (0.9, 1.4)
    sbp_range: tuple[float, float] = (80.0, 180.0)
    dbp_range: tuple[float, float] = (35.0, 115.0)
    sbp_dbp_corr: float = 0.6
    examples_per_subject: int = 25
    normalize: bool = True


def encode_pressure(sbp, dbp) -> tuple[np.ndarray, np.ndarray]:
    """(SBP, DBP) mmHg -> (upstroke time s, diastolic/systolic wave ratio)."""
    rise = RISE_AT_80 - RISE_SLOPE * (np.asarray(sbp, dtype=np.float64) - 80.0)
    ratio = RATIO_AT_35 + RATIO_SLOPE * (np.asarray(dbp, dtype=np.float64) - 35.0)
    return rise, ratio


def decode_pressure(rise, ratio) -> tuple[np.ndarray, np.ndarray]:
    sbp = 80.0 + (RISE_AT_80 - np.asarray(rise, dtype=np.float64)) / RISE_SLOPE
    dbp = 35.0 + (np.asarray(ratio, dtype=np.float64) - RATIO_AT_35) / RATIO_SLOPE
    return sbp, dbp


def target_sigma_for_quality(q, cfg: PressureConfig = PressureConfig()) -> np.ndarray:
    lo, hi = cfg.target_sigma
    s = cfg.noise_scale * (lo + (hi - lo) * np.asarray(q, dtype=np.float64))
    return np.stack([s, cfg.dbp_sigma_ratio * s], axis=-1)


def pressure_signal(sbp: float, dbp: float, rate_hz: float, quality: float, gen: np.random.Generator,
                    cfg: PressureConfig = PressureConfig()) -> np.ndarray:
    t = np.arange(cfg.length) / cfg.fs
    period = 1.0 / rate_hz
    rise, ratio = encode_pressure(sbp, dbp)
    n_beats = int(math.ceil(cfg.length / cfg.fs / period)) + 3
    intervals = beat_intervals(n_beats, period, 0.02, gen)
    beats = gen.uniform(-period, 0.0) + np.concatenate([[0.0], np.cumsum(intervals)[:-1]])
    sig = _render(beats, t, period, np.ones(n_beats), np.full(n_beats, float(ratio)), float(rise), "pressure")
    lo, hi = cfg.signal_noise
    sig += cfg.noise_scale * (lo + (hi - lo) * quality) * gen.standard_normal(cfg.length)
    return _normalise(sig) if cfg.normalize else sig


def gen_hetero_regression(n: int, rng: RngStream | None = None,
                          cfg: PressureConfig = PressureConfig(), render: bool = True) -> list[SynthSignal]:
    """``n`` pressure examples.  With ``render=False`` the samples are left empty;
    targets, noise levels and metadata are identical to the rendered call."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = rng or RngStream(0, "data")
    subj_rng, ex_rng = rng.child(1), rng.child(0)
    n_subjects = max(1, n // cfg.examples_per_subject)
    base_rates = [subj_rng.child(s).generator.uniform(*cfg.rate_hz) for s in range(n_subjects)]
    rho = cfg.sbp_dbp_corr
    out = []
    for i in range(n):
        gen = ex_rng.child(i).generator
        subject = int(gen.integers(n_subjects))
        z1, z2 = gen.standard_normal(2)
        sbp = float(np.clip(SBP_MEAN + SBP_SD * z1, *cfg.sbp_range))
        dbp = float(np.clip(DBP_MEAN + DBP_SD * (rho * z1 + math.sqrt(1 - rho * rho) * z2), *cfg.dbp_range))
        dbp = min(dbp, sbp - 15.0)
        quality = float(gen.random())
        rate = base_rates[subject] * gen.uniform(0.95, 1.05)
        sig_sbp, sig_dbp = target_sigma_for_quality(quality, cfg)
        e_sbp, e_dbp = gen.standard_normal(2)
        y_sbp = sbp + sig_sbp * e_sbp
        y_dbp = dbp + sig_dbp * e_dbp
        # scalar draws come first so rendering cannot shift them
        x = pressure_signal(sbp, dbp, rate, quality, gen, cfg) if render else np.zeros(0)
        rise, ratio = encode_pressure(sbp, dbp)
        out.append(SynthSignal(x.astype(np.float32), (float(y_sbp), float(y_dbp)),
                               (float(sig_sbp), float(sig_dbp)), {
                                   "subject": subject, "sbp_latent": sbp, "dbp_latent": dbp,
                                   "rise_time": float(rise), "diastolic_ratio": float(ratio),
                                   "quality": quality, "rate_hz": float(rate), "artifact": 0}))
    return out


# ---------------------------------------------------------------------------
# datasets, sampling, splitting
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    task: str                 # "af" | "bp"
    x: np.ndarray             # (N, L) float32
    y: np.ndarray             # (N,) class index or (N, 2) mmHg
    noise: np.ndarray         # (N,) or (N, 2)
    ids: np.ndarray           # (N,) example ids
    meta: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.x)

    @property
    def subject(self) -> np.ndarray:
        return self.meta["subject"].astype(np.int64)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.task, self.x[idx], self.y[idx], self.noise[idx], self.ids[idx],
                       {k: v[idx] for k, v in self.meta.items()})


def meta_keys(task: str) -> tuple[str, ...]:
    return RHYTHM_META if task == "af" else PRESSURE_META


def to_dataset(signals: list[SynthSignal], task: str) -> Dataset:
    keys = meta_keys(task)
    x = np.stack([s.samples for s in signals]).astype(np.float32)
    if task == "af":
        y = np.array([s.label for s in signals], dtype=np.int64)
        noise = np.array([s.true_noise_sigma for s in signals], dtype=np.float64)
    else:
        y = np.array([s.label for s in signals], dtype=np.float64)
        noise = np.array([s.true_noise_sigma for s in signals], dtype=np.float64)
    meta = {k: np.array([s.meta[k] for s in signals], dtype=np.float64) for k in keys}
    return Dataset(task, x, y, noise, np.arange(len(signals), dtype=np.int64), meta)


def weighted_sampler(labels, rng: RngStream, n_draws: int | None = None) -> np.ndarray:
    """Indices drawn with replacement so every class has the same expected share."""
    labels = np.asarray(labels).astype(np.int64)
    if labels.size == 0:
        raise ValueError("weighted_sampler needs at least one label")
    counts = np.bincount(labels)
    present = counts > 0
    if not np.all(present[np.unique(labels)]) or np.any(counts[: labels.max() + 1] == 0):
        raise ValueError(f"every class needs at least one example, got counts {counts.tolist()}")
    weights = 1.0 / counts[labels]
    weights /= weights.sum()
    n_draws = len(labels) if n_draws is None else n_draws
    return rng.generator.choice(len(labels), size=n_draws, replace=True, p=weights)


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)
    grouping: str = "pooled"          # "pooled" | "by-subject"
    seed: int = 0

    def __post_init__(self):
        if len(self.fractions) != 3 or any(f < 0 for f in self.fractions):
            raise ValueError(f"need three non-negative fractions, got {self.fractions}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.fractions)}")
        if self.grouping not in ("pooled", "by-subject"):
            raise ValueError(f"grouping must be 'pooled' or 'by-subject', got {self.grouping!r}")


def split_indices(n: int, spec: SplitSpec, subjects=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    gen = RngStream(spec.seed, "data").child(2).generator
    f_train, f_val, _ = spec.fractions
    if spec.grouping == "pooled":
        perm = gen.permutation(n)
        b1 = int(round(f_train * n))
        b2 = int(round((f_train + f_val) * n))
        return np.sort(perm[:b1]), np.sort(perm[b1:b2]), np.sort(perm[b2:])
    if subjects is None:
        raise ValueError("by-subject splitting needs subject ids")
    subjects = np.asarray(subjects).astype(np.int64)
    uniq = gen.permutation(np.unique(subjects))
    counts = np.array([np.sum(subjects == s) for s in uniq])
    # place each subject by the midpoint of its cumulative share
    mid = (np.cumsum(counts) - counts / 2.0) / n
    which = np.where(mid < f_train, 0, np.where(mid < f_train + f_val, 1, 2))
    parts = []
    for k in range(3):
        chosen = uniq[which == k]
        parts.append(np.flatnonzero(np.isin(subjects, chosen)))
    return parts[0], parts[1], parts[2]


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    subjects = dataset.subject if spec.grouping == "by-subject" else None
    tr, va, te = split_indices(len(dataset), spec, subjects)
    return dataset.subset(tr), dataset.subset(va), dataset.subset(te)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

DATASET_FORMAT = "ppg_uq.dataset"
DATASET_VERSION = 1


def save_dataset(ds: Dataset, path) -> None:
    """One record group per example: ``<id>/samples``, ``/label``, ``/noise``, ``/meta``."""
    keys = meta_keys(ds.task)
    entries = []
    for i in range(len(ds)):
        tag = f"{int(ds.ids[i]):07d}"
        entries.append((f"{tag}/samples", ds.x[i]))
        entries.append((f"{tag}/label", np.atleast_1d(ds.y[i]).astype(np.float32)))
        entries.append((f"{tag}/noise", np.atleast_1d(ds.noise[i]).astype(np.float32)))
        entries.append((f"{tag}/meta", np.array([ds.meta[k][i] for k in keys], dtype=np.float32)))
    write_container(path, entries)


def load_dataset(path, task: str) -> Dataset:
    raw = read_container(path)
    keys = meta_keys(task)
    tags = sorted({name.split("/", 1)[0] for name in raw})
    x = np.stack([raw[f"{t}/samples"] for t in tags]) if tags else np.zeros((0, 0), np.float32)
    labels = np.stack([raw[f"{t}/label"] for t in tags]) if tags else np.zeros((0, 1))
    noise = np.stack([raw[f"{t}/noise"] for t in tags]).astype(np.float64) if tags else np.zeros((0, 1))
    meta_arr = np.stack([raw[f"{t}/meta"] for t in tags]).astype(np.float64) if tags else np.zeros((0, len(keys)))
    if task == "af":
        y = labels[:, 0].astype(np.int64)
        noise = noise[:, 0]
    else:
        y = labels.astype(np.float64)
    meta = {k: meta_arr[:, j] for j, k in enumerate(keys)}
    return Dataset(task, x.astype(np.float32), y, noise, np.array([int(t) for t in tags], dtype=np.int64), meta)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))
