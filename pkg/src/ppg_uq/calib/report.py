from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any


@dataclass
class BinStats:
    """Aggregates for one calibration bin.

    ``aggregate_a``/``aggregate_b`` are (RMV, RMSE) for ENCE, (confidence,
    accuracy) for ECE and (mean uncertainty, error rate) for UCE.
    """

    bin_index: int
    population: int
    lower: float
    upper: float
    aggregate_a: float
    aggregate_b: float


@dataclass
class CalibrationReport:
    metric: str
    value: float | None
    curve: list = field(default_factory=list)
    class_scope: str = "all"
    extras: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        curve = [asdict(c) if isinstance(c, BinStats) else list(c) for c in self.curve]
        return {
            "metric": self.metric,
            "value": _clean(self.value),
            "class_scope": self.class_scope,
            "curve": curve,
            "extras": {k: _clean(v) for k, v in self.extras.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def curve_csv(self) -> str:
        """One row per bin (BinStats) or per coverage level."""
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        if self.curve and isinstance(self.curve[0], BinStats):
            labels = CURVE_COLUMNS.get(self.metric, ("aggregate_a", "aggregate_b"))
            writer.writerow(["bin_index", "population", "lower", "upper", *labels])
            for b in self.curve:
                writer.writerow([b.bin_index, b.population, _fmt(b.lower), _fmt(b.upper),
                                 _fmt(b.aggregate_a), _fmt(b.aggregate_b)])
        else:
            writer.writerow(["level", "coverage"])
            for p, cov in self.curve:
                writer.writerow([_fmt(p), _fmt(cov)])
        return out.getvalue()


CURVE_COLUMNS = {
    "ence": ("rmv", "rmse"),
    "ece": ("confidence", "accuracy"),
    "uce": ("uncertainty", "error_rate"),
}


def _fmt(x: float) -> str:
    return repr(float(x))


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v
