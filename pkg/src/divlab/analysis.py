"""Regression of performance on diversity, and shared CI helpers."""

from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractError, DegenerateVarianceError, InsufficientDataError

Z95 = 1.96


def fit_linear_r2(xs, ys):
    """Ordinary least squares ``y = slope * x + intercept`` and its R^2."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"xs and ys must be 1-D and equal length, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InsufficientDataError("need at least 2 points")
    xc = x - x.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise ContractError("xs are all equal; slope undefined")
    yc = y - y.mean()
    ss_tot = float(yc @ yc)
    if ss_tot == 0.0:
        raise DegenerateVarianceError("ys are all equal; R^2 undefined (SS_tot = 0)")
    slope = float(xc @ yc) / sxx
    intercept = float(y.mean() - slope * x.mean())
    resid = y - (slope * x + intercept)
    r2 = 1.0 - float(resid @ resid) / ss_tot
    return slope, intercept, min(1.0, max(0.0, r2))


def confidence_interval(samples, level=0.95):
    """Mean and normal-approximation half-width ``z * std / sqrt(n)``."""
    s = np.asarray(samples, dtype=np.float64)
    if s.size < 2:
        raise ContractError(f"need at least 2 samples, got {s.size}")
    if level == 0.95:
        z = Z95
    else:
        from scipy.stats import norm

        z = float(norm.ppf(0.5 + level / 2))
    return float(s.mean()), float(z * s.std(ddof=1) / math.sqrt(s.size))


def format_ci(mean, half_width):
    """``0.106 ± 0.00166`` style: three significant figures each."""
    return f"{mean:.3g} ± {half_width:.3g}"


@dataclass
class CorrelationReport:
    learner_label: str
    points: list = field(default_factory=list)  # (dataset_id, diversity, accuracy, ce_loss)
    r2_acc: float = 0.0
    r2_loss: float = 0.0
    slope_acc: float = 0.0
    intercept_acc: float = 0.0
    slope_loss: float = 0.0
    intercept_loss: float = 0.0
    trend_acc: tuple = ()  # ((x0, y0), (x1, y1))
    trend_loss: tuple = ()
    resid_acc: list = field(default_factory=list)
    resid_loss: list = field(default_factory=list)

    @property
    def n_points(self):
        return len(self.points)


@dataclass(frozen=True)
class GridResult:
    learner_label: str
    dataset_id: str
    diversity: float
    diversity_ci: float
    accuracy: float
    ce_loss: float
    acc_ci: float = 0.0


def build_report(grid_results):
    """One :class:`CorrelationReport` per learner label, in first-seen order."""
    groups = OrderedDict()
    for r in grid_results:
        groups.setdefault(r.learner_label, []).append(r)
    reports = []
    for label, rows in groups.items():
        if len(rows) < 3:
            raise InsufficientDataError(f"{label}: {len(rows)} dataset points, need at least 3")
        x = np.array([r.diversity for r in rows])
        acc = np.array([r.accuracy for r in rows])
        loss = np.array([r.ce_loss for r in rows])
        sa, ia, ra = fit_linear_r2(x, acc)
        sl, il, rl = fit_linear_r2(x, loss)
        lo, hi = float(x.min()), float(x.max())
        reports.append(CorrelationReport(
            learner_label=label,
            points=[(r.dataset_id, r.diversity, r.accuracy, r.ce_loss) for r in rows],
            r2_acc=ra, r2_loss=rl, slope_acc=sa, intercept_acc=ia,
            slope_loss=sl, intercept_loss=il,
            trend_acc=((lo, sa * lo + ia), (hi, sa * hi + ia)),
            trend_loss=((lo, sl * lo + il), (hi, sl * hi + il)),
            resid_acc=list(acc - (sa * x + ia)),
            resid_loss=list(loss - (sl * x + il)),
        ))
    return reports


# ---------------------------------------------------------------- report files

POINT_FIELDS = ("learner_label", "dataset_id", "diversity_mean", "diversity_ci", "accuracy",
                "acc_ci", "ce_loss")
SUMMARY_FIELDS = ("learner_label", "r2_acc", "r2_loss", "slope_acc", "slope_loss", "n_points")

# Full-scale values reported for ResNet-scale runs on twelve vision benchmarks.
PUBLISHED_R2 = {
    "PT": (0.149, 0.137),
    "FO MAML 5": (0.168, 0.184),
    "FO MAML 10": (0.152, 0.174),
    "HO MAML 5": (0.398, 0.074),
    "HO MAML 10": (0.416, 0.203),
}


def write_reports(grid_results, reports, points_path, summary_path, json_path=None, extra=None):
    extra = dict(extra or {})
    with open(points_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(POINT_FIELDS + tuple(extra))
        for r in grid_results:
            w.writerow([r.learner_label, r.dataset_id, repr(r.diversity), repr(r.diversity_ci),
                        repr(r.accuracy), repr(r.acc_ci), repr(r.ce_loss)] + list(extra.values()))
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS + tuple(extra))
        for rep in reports:
            w.writerow([rep.learner_label, repr(rep.r2_acc), repr(rep.r2_loss),
                        repr(rep.slope_acc), repr(rep.slope_loss), rep.n_points]
                       + list(extra.values()))
    if json_path is not None:
        doc = {
            "meta": {
                **extra,
                "response_note": "accuracy is absolute query accuracy; 'relative' "
                                 "performance is undefined in the source and not used",
                "published_reference_r2": PUBLISHED_R2,
            },
            "points": [asdict(r) for r in grid_results],
            "reports": [asdict(r) for r in reports],
        }
        with open(json_path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)


def read_points(path):
    with open(path, newline="") as fh:
        return [GridResult(r["learner_label"], r["dataset_id"], float(r["diversity_mean"]),
                           float(r["diversity_ci"]), float(r["accuracy"]), float(r["ce_loss"]),
                           float(r["acc_ci"]))
                for r in csv.DictReader(fh)]


def read_json_report(path):
    with open(path) as fh:
        doc = json.load(fh)
    points = [GridResult(**p) for p in doc["points"]]
    reports = []
    for r in doc["reports"]:
        r["points"] = [tuple(p) for p in r["points"]]
        r["trend_acc"] = tuple(tuple(p) for p in r["trend_acc"])
        r["trend_loss"] = tuple(tuple(p) for p in r["trend_loss"])
        reports.append(CorrelationReport(**r))
    return points, reports, doc["meta"]
