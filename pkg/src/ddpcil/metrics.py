"""Multi-label metrics and Last/Avg aggregation.

* average precision: un-interpolated mean of precision@k over the ranks of
  the positives, ranking by descending score with ties broken by original
  index (stable sort);
* CF1: mean of per-class F1, a class with 2TP + FP + FN = 0 scores 0;
* OF1: micro F1 over all (image, class) decisions;
* FPR: FP / (FP + TN) pooled over ground-truth negatives.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DomainError, UsageError

METRIC_NAMES = ("mAP", "CF1", "OF1", "FPR")


class UndefinedAPError(DomainError):
    pass


def average_precision(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DomainError("scores and labels must be 1-D of equal length")
    npos = int(labels.sum())
    if npos == 0:
        raise UndefinedAPError("average precision is undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, npos + 1) / ranks))


def _confusion(decisions, labels):
    d = np.asarray(decisions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if d.shape != y.shape:
        raise DomainError(f"decision shape {d.shape} != label shape {y.shape}")
    tp = np.sum(d & y, axis=0)
    fp = np.sum(d & ~y, axis=0)
    fn = np.sum(~d & y, axis=0)
    tn = np.sum(~d & ~y, axis=0)
    return tp, fp, fn, tn


def f1_scores(decisions, labels) -> tuple[float, float]:
    """(CF1, OF1) for binary decision and label matrices (images x classes)."""
    tp, fp, fn, _ = _confusion(decisions, labels)
    denom = 2 * tp + fp + fn
    per_class = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    cf1 = float(per_class.mean()) if per_class.size else 0.0
    TP, FP, FN = int(tp.sum()), int(fp.sum()), int(fn.sum())
    of1 = 2 * TP / (2 * TP + FP + FN) if (2 * TP + FP + FN) else 0.0
    return cf1, float(of1)


def false_positive_rate(decisions, labels) -> float:
    _, fp, _, tn = _confusion(decisions, labels)
    FP, TN = int(fp.sum()), int(tn.sum())
    if FP + TN == 0:
        raise DomainError("false-positive rate needs at least one ground-truth negative")
    return FP / (FP + TN)


@dataclass
class MetricsRecord:
    task: int
    num_classes: int
    operating_point: str
    threshold: float
    tau: float
    mAP: float
    CF1: float
    OF1: float
    FPR: float
    excluded_classes: list = field(default_factory=list)
    per_class_ap: dict = field(default_factory=dict)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def score_predictions(
    confidence,
    labels,
    class_ids,
    task: int,
    operating_points: dict[str, float],
    tau: float = 1.0,
    rank_scores=None,
) -> list[MetricsRecord]:
    """Evaluate a confidence matrix at each named threshold (decide positive iff conf >= threshold).

    AP ranks by ``rank_scores`` when given. Passing the pre-temperature
    margins keeps AP exactly temperature invariant: a tempered sigmoid can
    round distinct margins to equal confidences.
    """
    confidence = np.asarray(confidence, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    ranks = confidence if rank_scores is None else np.asarray(rank_scores, dtype=np.float64)
    if ranks.shape != confidence.shape:
        raise DomainError("rank_scores must match the confidence matrix")
    aps, excluded = {}, []
    for j, c in enumerate(class_ids):
        if labels[:, j].any():
            aps[str(int(c))] = average_precision(ranks[:, j], labels[:, j])
        else:
            excluded.append(int(c))
    m_ap = float(np.mean(list(aps.values()))) if aps else 0.0
    out = []
    for name, thr in operating_points.items():
        dec = confidence >= thr
        cf1, of1 = f1_scores(dec, labels)
        out.append(
            MetricsRecord(
                task=task,
                num_classes=len(class_ids),
                operating_point=name,
                threshold=float(thr),
                tau=float(tau),
                mAP=m_ap,
                CF1=cf1,
                OF1=of1,
                FPR=false_positive_rate(dec, labels),
                excluded_classes=excluded,
                per_class_ap=dict(aps),
            )
        )
    return out


@dataclass
class MetricsReport:
    records: list[MetricsRecord]
    last: dict
    avg: dict
    manifest_hash: str = ""
    extra: dict = field(default_factory=dict)

    def view(self, which: str, operating_point: str) -> dict:
        return (self.last if which == "last" else self.avg)[operating_point]

    def by_task(self, operating_point: str) -> list[MetricsRecord]:
        return sorted((r for r in self.records if r.operating_point == operating_point), key=lambda r: r.task)

    def to_dict(self) -> dict:
        return {
            "schema": "ddpcil.report/1",
            "manifest_hash": self.manifest_hash,
            "records": [asdict(r) for r in self.records],
            "last": self.last,
            "avg": self.avg,
            "extra": self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(
            records=[MetricsRecord(**r) for r in d["records"]],
            last=d["last"],
            avg=d["avg"],
            manifest_hash=d["manifest_hash"],
            extra=d.get("extra", {}),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task", "num_classes", "operating_point", "threshold", "tau", *METRIC_NAMES])
        for r in sorted(self.records, key=lambda r: (r.operating_point, r.task)):
            w.writerow([r.task, r.num_classes, r.operating_point, repr(r.threshold), repr(r.tau),
                        *(repr(getattr(r, k)) for k in METRIC_NAMES)])
        return buf.getvalue()


def aggregate(records: list[MetricsRecord], num_tasks: int | None = None, manifest_hash: str = "") -> MetricsReport:
    """Last = record of the final task; Avg = arithmetic mean over tasks, per operating point."""
    if not records:
        raise UsageError("no records to aggregate")
    ops = sorted({r.operating_point for r in records})
    T = num_tasks if num_tasks is not None else max(r.task for r in records)
    last, avg = {}, {}
    for op in ops:
        by_task = {r.task: r for r in records if r.operating_point == op}
        missing = [t for t in range(1, T + 1) if t not in by_task]
        if missing:
            raise UsageError(f"missing records for tasks {missing} at operating point {op}")
        rows = [by_task[t] for t in range(1, T + 1)]
        last[op] = rows[-1].metrics()
        avg[op] = {k: float(np.mean([getattr(r, k) for r in rows])) for k in METRIC_NAMES}
    return MetricsReport(records=list(records), last=last, avg=avg, manifest_hash=manifest_hash)
