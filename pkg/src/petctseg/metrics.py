"""Confusion-count segmentation metrics with per-patient aggregation.

Evaluation is per patient: all of a patient's predicted slices are
assembled back into the 3-D volume first, one set of confusion counts is
taken over that volume, and cohort statistics are unweighted means and
sample standard deviations across patients. Zero-denominator cases follow
a single convention: a vacuously perfect agreement scores 1.0, anything
else is undefined (None) and excluded from its metric's average.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

DEFAULT_THRESHOLD = 0.5
METRIC_NAMES = ("dice", "sensitivity", "specificity", "ppv")

# Results-table column order (metrics only; the row label comes first).
TABLE_COLUMNS = ("sensitivity", "specificity", "dice", "ppv")
TABLE_HEADER = "Modality & Sensitivity & Specificity & Dice & PPV \\\\"

CSV_FIELDS = ("patient_id", "tp", "fp", "fn", "tn",
              "dice", "sensitivity", "specificity", "ppv")


@dataclass(frozen=True)
class ConfusionCounts:
    """Voxelwise counts. tp/fn split the truth positives, fp/tn the rest."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 0:
                raise ValueError(f"{name} must be a non-negative integer")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class PatientMetrics:
    patient_id: str
    counts: ConfusionCounts
    dice: Optional[float]
    sensitivity: Optional[float]
    specificity: Optional[float]
    ppv: Optional[float]


@dataclass(frozen=True)
class MetricSummary:
    """Across-patient mean and sample std; count is how many patients had
    the metric defined. std is None below two values, mean below one."""

    mean: Optional[float]
    std: Optional[float]
    count: int


def binarize(probabilities, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Threshold a probability map; values >= threshold become 1."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly inside (0, 1)")
    return (np.asarray(probabilities) >= threshold).astype(np.uint8)


def confusion(pred, truth) -> ConfusionCounts:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    for name, arr in (("pred", pred), ("truth", truth)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary")
    p = pred.astype(bool)
    t = truth.astype(bool)
    return ConfusionCounts(tp=int(np.count_nonzero(p & t)),
                           fp=int(np.count_nonzero(p & ~t)),
                           fn=int(np.count_nonzero(~p & t)),
                           tn=int(np.count_nonzero(~p & ~t)))


def _ratio(numerator: int, denominator: int, vacuous: bool) -> Optional[float]:
    if denominator > 0:
        return numerator / denominator
    return 1.0 if vacuous else None


def metrics_from_counts(c: ConfusionCounts) -> Dict[str, Optional[float]]:
    """Dice, sensitivity, specificity, and PPV from one count set.

    Zero denominators: dice's vanishes only when pred and truth are both
    empty (scores 1.0). Sensitivity vanishes when truth is empty and is
    1.0 only if pred is empty too; PPV mirrors that for an empty pred,
    and specificity for an all-positive truth. Non-vacuous zero
    denominators yield None.
    """
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, True),
        "sensitivity": _ratio(c.tp, c.tp + c.fn, c.fp == 0),
        "specificity": _ratio(c.tn, c.tn + c.fp, c.fn == 0),
        "ppv": _ratio(c.tp, c.tp + c.fp, c.fn == 0),
    }


def evaluate_patient(patient_id: str, pred, truth,
                     threshold: float = DEFAULT_THRESHOLD) -> PatientMetrics:
    """Binarize a predicted probability volume and score it against the
    binary truth volume."""
    counts = confusion(binarize(pred, threshold), truth)
    return PatientMetrics(patient_id=patient_id, counts=counts,
                          **metrics_from_counts(counts))


def aggregate(per_patient: Sequence[PatientMetrics]) -> Dict[str, MetricSummary]:
    """Unweighted mean and sample (n-1) standard deviation per metric.

    Patients whose value for a metric is undefined are excluded from that
    metric's statistics only.
    """
    if not per_patient:
        raise ValueError("aggregate needs at least one patient")
    out = {}
    for name in METRIC_NAMES:
        values = [getattr(p, name) for p in per_patient
                  if getattr(p, name) is not None]
        if not values:
            out[name] = MetricSummary(mean=None, std=None, count=0)
        elif len(values) == 1:
            out[name] = MetricSummary(mean=float(values[0]), std=None, count=1)
        else:
            arr = np.asarray(values, dtype=np.float64)
            out[name] = MetricSummary(mean=float(arr.mean()),
                                      std=float(arr.std(ddof=1)),
                                      count=len(values))
    return out


def format_summary_cell(summary: MetricSummary) -> str:
    # Degenerate summaries (every value undefined, or a single patient)
    # render explicitly instead of inventing a statistic.
    if summary.mean is None:
        return "$n/a$"
    if summary.std is None:
        return f"${summary.mean:.2f} \\pm n/a$"
    return f"${summary.mean:.2f} \\pm {summary.std:.2f}$"


def format_table_row(label: str, summaries: Dict[str, MetricSummary]) -> str:
    cells = [format_summary_cell(summaries[name]) for name in TABLE_COLUMNS]
    return " & ".join([label] + cells) + " \\\\"


def format_table(rows: Sequence[Tuple[str, Dict[str, MetricSummary]]]) -> str:
    """Results table: a header line plus one line per (label, summaries)."""
    lines = [TABLE_HEADER]
    lines.extend(format_table_row(label, summaries) for label, summaries in rows)
    return "\n".join(lines) + "\n"


def _csv_cell(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def write_patient_csv(path, per_patient: Sequence[PatientMetrics]) -> None:
    """One row per patient plus a closing "mean" summary row whose count
    columns hold cohort totals and whose metric columns hold the means."""
    summary = aggregate(per_patient)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for p in per_patient:
            writer.writerow([p.patient_id, p.counts.tp, p.counts.fp,
                             p.counts.fn, p.counts.tn]
                            + [_csv_cell(getattr(p, n)) for n in METRIC_NAMES])
        writer.writerow(["mean",
                         sum(p.counts.tp for p in per_patient),
                         sum(p.counts.fp for p in per_patient),
                         sum(p.counts.fn for p in per_patient),
                         sum(p.counts.tn for p in per_patient)]
                        + [_csv_cell(summary[n].mean) for n in METRIC_NAMES])
