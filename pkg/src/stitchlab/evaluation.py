"""Pareto fronts, normalised-FLOPs AUC, overlap and correlation analyses, CSV/JSON reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from stitchlab.errors import InvalidInputError, UndefinedCorrelationError

REPORT_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ParetoPoint:
    config_id: str
    flops: float
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise InvalidInputError(f"accuracy {self.accuracy} outside [0, 1]")
        if not self.flops > 0:
            raise InvalidInputError(f"FLOPs must be positive, got {self.flops}")


def _as_points(points) -> list[ParetoPoint]:
    out = []
    for k, p in enumerate(points):
        out.append(p if isinstance(p, ParetoPoint) else ParetoPoint(f"p{k}", float(p[0]), float(p[1])))
    return out


def pareto_front(points) -> list[ParetoPoint]:
    """Non-dominated points sorted by FLOPs; exact duplicates collapse to one."""
    pts = _as_points(points)
    # cheapest first, best accuracy first among equal cost
    pts.sort(key=lambda p: (p.flops, -p.accuracy, p.config_id))
    front = []
    for p in pts:
        if front and p.accuracy <= front[-1].accuracy:
            continue
        front.append(p)
    return front


def auc(points, flops_lo: float, flops_hi: float) -> float:
    """Area under the front's accuracy curve over normalised FLOPs in [0, 1].

    Linear between front points, constant beyond the first and last point;
    the part of the curve outside [lo, hi] is not counted.
    """
    pts = _as_points(points)
    if len(pts) < 2:
        raise InvalidInputError("auc needs at least two points")
    if not flops_lo < flops_hi:
        raise InvalidInputError("flops_lo must be < flops_hi")
    front = pareto_front(pts)
    xs = np.array([(p.flops - flops_lo) / (flops_hi - flops_lo) for p in front])
    ys = np.array([p.accuracy for p in front])
    grid = np.unique(np.concatenate([[0.0, 1.0], xs[(xs > 0) & (xs < 1)]]))
    vals = np.interp(grid, xs, ys)
    return float(np.sum((grid[1:] - grid[:-1]) * (vals[1:] + vals[:-1]) / 2.0))


@dataclass
class CurveSummary:
    method: str
    points: list[ParetoPoint]
    auc: float
    flops_lo: float
    flops_hi: float
    meta: dict = field(default_factory=dict)


def summarize(method: str, points, flops_lo: float, flops_hi: float) -> CurveSummary:
    pts = _as_points(points)
    return CurveSummary(method, pts, auc(pts, flops_lo, flops_hi), flops_lo, flops_hi)


def global_bounds(*point_sets) -> tuple[float, float]:
    allf = [p.flops for ps in point_sets for p in _as_points(ps)]
    if not allf:
        raise InvalidInputError("no points")
    return float(min(allf)), float(max(allf))


def overlap(selected, reference) -> float:
    """Percentage of ``reference`` configurations also present in ``selected``."""
    ref = set(reference)
    if not ref:
        raise InvalidInputError("empty reference set")
    return 100.0 * len(set(selected) & ref) / len(ref)


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidInputError("pearson needs two equal-length vectors")
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt(np.sum(xc * xc) * np.sum(yc * yc))
    if denom == 0:
        raise UndefinedCorrelationError("zero variance input; correlation undefined")
    return float(np.sum(xc * yc) / denom)


def spearman(x, y) -> float:
    """Pearson on average ranks."""
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def correlation_study(metric_scores: dict, accuracies, target_accuracy: float) -> dict:
    """Pearson/Spearman between each metric and the accuracy drop ``target - stitched``."""
    acc = np.asarray(accuracies, dtype=np.float64)
    if acc.shape[0] < 3:
        raise InvalidInputError("correlation study needs at least 3 configurations")
    drop = target_accuracy - acc
    out = {}
    for name, scores in metric_scores.items():
        s = np.asarray(scores, dtype=np.float64)
        if s.shape != acc.shape:
            raise InvalidInputError(f"metric {name}: {s.shape[0]} scores for {acc.shape[0]} configs")
        out[name] = (pearson(s, drop), spearman(s, drop))
    return out


# -- report bundle --------------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_report(curves: list[CurveSummary], out_dir, correlations: dict | None = None,
                 overlaps: list | None = None, meta: dict | None = None) -> dict:
    """Write pareto.csv, auc.json, correlations.csv, overlap.csv and curves.csv.

    ``overlaps`` holds ``(method, reference, percent)`` rows. Returns a map of
    written file paths.
    """
    if not curves:
        raise InvalidInputError("report needs at least one curve")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    paths = {name: out / name for name in
             ("pareto.csv", "auc.json", "correlations.csv", "overlap.csv", "curves.csv")}

    with open(paths["pareto.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "config_id", "flops", "accuracy", "on_front"])
        for cs in curves:
            front = set(pareto_front(cs.points))
            for p in sorted(cs.points, key=lambda p: (p.flops, p.config_id)):
                w.writerow([cs.method, p.config_id, _fmt(p.flops), _fmt(p.accuracy), int(p in front)])

    with open(paths["curves.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "x", "y"])
        for cs in curves:
            for p in pareto_front(cs.points):
                w.writerow([cs.method, _fmt((p.flops - cs.flops_lo) / (cs.flops_hi - cs.flops_lo)),
                            _fmt(p.accuracy)])

    with open(paths["correlations.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "pearson", "spearman"])
        for name in sorted(correlations or {}):
            r, rho = correlations[name]
            w.writerow([name, _fmt(r), _fmt(rho)])

    with open(paths["overlap.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "reference", "overlap_pct"])
        for method, ref, pct in overlaps or []:
            w.writerow([method, ref, _fmt(pct)])

    aucs = {cs.method: cs.auc for cs in curves}
    payload = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "integration": "pareto_front_trapezoid_step_extended",
        "auc": {cs.method: {"auc": cs.auc, "flops_lo": cs.flops_lo, "flops_hi": cs.flops_hi,
                            "num_points": len(cs.points), **cs.meta} for cs in curves},
        "delta_auc": {f"{a}-{b}": aucs[a] - aucs[b] for a in aucs for b in aucs if a != b},
        "meta": meta or {},
    }
    paths["auc.json"].write_text(json.dumps(payload, indent=1, sort_keys=True))
    return paths


def read_pareto_csv(path) -> dict[str, list[ParetoPoint]]:
    out: dict[str, list[ParetoPoint]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["method"], []).append(
                ParetoPoint(row["config_id"], float(row["flops"]), float(row["accuracy"])))
    return out
