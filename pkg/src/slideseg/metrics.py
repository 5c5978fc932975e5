"""Overlap metrics and cohort aggregation.

Conventions pinned for test portability: two empty masks agree perfectly
(DSC = IoU = 1, flagged ``both_empty``); ratios with zero denominators are 0
and flagged; the average Hausdorff distance is the symmetric mean of
nearest-neighbor distances between the two foreground pixel sets and is
undefined (an error, not 0) when either set is empty.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .errors import ConsistencyError, UndefinedMetricError
from .postprocess import BinaryMask


class PRF(NamedTuple):
    precision: float
    recall: float
    f1: float
    flagged: bool = False


@dataclass(frozen=True)
class MetricsReport:
    slide_id: str
    dsc: float
    iou: float
    precision: float
    recall: float
    f1: float
    avg_hausdorff: float | None
    tp: int
    fp: int
    fn: int
    tn: int
    flags: tuple[str, ...] = ()


def prf(tp: int, fp: int, fn: int) -> PRF:
    """Precision, recall, F1 from confusion counts; zero denominators -> 0."""
    flagged = False
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision, flagged = 0.0, True
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall, flagged = 0.0, True
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1, flagged = 0.0, True
    return PRF(precision, recall, f1, flagged)


def overlap_metrics(pred: BinaryMask, truth: BinaryMask, slide_id: str = "") -> MetricsReport:
    """Pixel-wise confusion counts and the derived overlap ratios.

    ``avg_hausdorff`` is left unset here; attach it with average_hausdorff
    when both masks are non-empty.
    """
    if pred.bits.shape != truth.bits.shape:
        raise ConsistencyError(
            f"mask dims differ: {pred.bits.shape} vs {truth.bits.shape}"
        )
    p = pred.bits.astype(bool)
    t = truth.bits.astype(bool)
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    tn = int(np.count_nonzero(~p & ~t))
    flags: list[str] = []
    if tp + fp + fn > 0:
        dsc = 2 * tp / (2 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    else:
        dsc = iou = 1.0  # both masks empty: perfect agreement on absence
        flags.append("both_empty")
    scores = prf(tp, fp, fn)
    if scores.flagged:
        flags.append("zero_denominator")
    return MetricsReport(
        slide_id=slide_id,
        dsc=dsc,
        iou=iou,
        precision=scores.precision,
        recall=scores.recall,
        f1=scores.f1,
        avg_hausdorff=None,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
        flags=tuple(flags),
    )


def average_hausdorff(pred: BinaryMask, truth: BinaryMask) -> float:
    """Symmetric mean nearest-neighbor distance between foreground sets.

    (mean over pred of distance to truth + mean over truth of distance to
    pred) / 2, Euclidean. Computed with exact distance transforms.
    """
    if pred.bits.shape != truth.bits.shape:
        raise ConsistencyError(
            f"mask dims differ: {pred.bits.shape} vs {truth.bits.shape}"
        )
    p = pred.bits.astype(bool)
    t = truth.bits.astype(bool)
    if not p.any() or not t.any():
        raise UndefinedMetricError("average Hausdorff undefined for an empty mask")
    dist_to_t = ndimage.distance_transform_edt(~t)
    dist_to_p = ndimage.distance_transform_edt(~p)
    return float((dist_to_t[p].mean() + dist_to_p[t].mean()) / 2.0)


def with_hausdorff(report: MetricsReport, pred: BinaryMask, truth: BinaryMask) -> MetricsReport:
    """Attach avg_hausdorff when defined; flag it absent otherwise."""
    try:
        return replace(report, avg_hausdorff=average_hausdorff(pred, truth))
    except UndefinedMetricError:
        return replace(report, flags=report.flags + ("hausdorff_undefined",))


_AGG_METRICS = ("dsc", "iou", "precision", "recall", "f1", "avg_hausdorff")


def aggregate(reports: list[MetricsReport]) -> dict:
    """Cohort summary: mean/median/quartiles/min/max per metric."""
    if not reports:
        raise ConsistencyError("aggregate needs at least one report")
    summary: dict = {"n_slides": len(reports)}
    for name in _AGG_METRICS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not vals:
            summary[name] = None
            continue
        arr = np.asarray(vals, dtype=np.float64)
        summary[name] = {
            "mean": float(arr.mean()),
            "median": float(np.median(arr)),
            "q1": float(np.percentile(arr, 25)),
            "q3": float(np.percentile(arr, 75)),
            "min": float(arr.min()),
            "max": float(arr.max()),
            "n": int(arr.size),
        }
    return summary


def report_to_json(report: MetricsReport, path) -> None:
    d = asdict(report)
    d["flags"] = list(report.flags)
    with open(path, "w") as f:
        json.dump(d, f, indent=2, sort_keys=True)
        f.write("\n")


REPORT_CSV_FIELDS = [
    "slide_id",
    "dsc",
    "iou",
    "precision",
    "recall",
    "f1",
    "avg_hausdorff",
    "tp",
    "fp",
    "fn",
    "tn",
    "flags",
]


def reports_to_csv(reports: list[MetricsReport], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_CSV_FIELDS)
        for r in reports:
            w.writerow(
                [
                    r.slide_id,
                    repr(r.dsc),
                    repr(r.iou),
                    repr(r.precision),
                    repr(r.recall),
                    repr(r.f1),
                    "" if r.avg_hausdorff is None else repr(r.avg_hausdorff),
                    r.tp,
                    r.fp,
                    r.fn,
                    r.tn,
                    ";".join(r.flags),
                ]
            )
