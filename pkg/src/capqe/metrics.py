"""Intrinsic (Spearman, MSE) and extrinsic (precision/recall when filtering) evaluation."""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass

import numpy as np

from .errors import (ConstantVector, KeyMismatch, LengthMismatch, MalformedRecord, MissingTarget,
                     NoPositives, TooFewPoints)
from .model import collate, forward_batch


def average_ranks(v) -> np.ndarray:
    """Ranks 1..n; tied values share the mean of the positions they span."""
    v = np.asarray(v, dtype=np.float64)
    n = v.size
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], n]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def _pearson(a, b) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / np.sqrt(np.dot(a, a) * np.dot(b, b)))


def spearman(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape or y.ndim != 1:
        raise LengthMismatch(f"length {y.shape} vs {yhat.shape}")
    if y.size < 2:
        raise LengthMismatch("need at least two observations")
    for name, v in (("y", y), ("yhat", yhat)):
        if np.all(v == v[0]):
            raise ConstantVector(f"{name} is constant; rank correlation undefined")
    return _pearson(average_ranks(y), average_ranks(yhat))


def mse(preds, targets) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.size == 0:
        raise LengthMismatch(f"length {preds.shape} vs {targets.shape}")
    return float(np.mean((preds - targets) ** 2))


# -- fine-grained annotations -----------------------------------------------

class Correctness(enum.IntEnum):
    INCORRECT = 0
    PARTIALLY_CORRECT = 1
    CORRECT = 2


class Helpfulness(enum.IntEnum):
    NOT_HELPFUL = 0
    SOMEWHAT_USEFUL = 1
    HELPFUL = 2


@dataclass(frozen=True)
class RaterJudgment:
    correctness: Correctness
    helpfulness: Helpfulness


@dataclass(frozen=True)
class FineGrainedAnnotation:
    sample_id: str
    raters: tuple

    def __post_init__(self):
        if len(self.raters) != 3:
            raise ValueError(f"expected 3 raters, got {len(self.raters)}")


def ext_good(a: FineGrainedAnnotation) -> bool:
    """Majority says at least partially correct, and majority says at least somewhat useful."""
    need = len(a.raters) // 2 + 1
    correct = sum(r.correctness >= Correctness.PARTIALLY_CORRECT for r in a.raters)
    useful = sum(r.helpfulness >= Helpfulness.SOMEWHAT_USEFUL for r in a.raters)
    return correct >= need and useful >= need


def load_annotations(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                raters = tuple(RaterJudgment(Correctness(int(r["correctness"])),
                                             Helpfulness(int(r["helpfulness"])))
                               for r in obj["raters"])
                ann = FineGrainedAnnotation(str(obj["sample_id"]), raters)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(f"bad annotation: {exc}", lineno, path) from None
            out[ann.sample_id] = ann
    return out


# -- precision / recall -----------------------------------------------------

@dataclass(frozen=True)
class PRPoint:
    threshold: float
    precision: float | None
    recall: float
    n_served: int


def _aligned(scores: dict, labels: dict):
    if set(scores) != set(labels):
        missing = set(scores) ^ set(labels)
        raise KeyMismatch(f"score and label keys differ ({len(missing)} unmatched, "
                          f"e.g. {sorted(missing)[0]!r})")
    keys = list(scores)
    s = np.array([scores[k] for k in keys], dtype=np.float64)
    y = np.array([bool(labels[k]) for k in keys])
    return s, y


def _point(s, y, th, n_pos) -> PRPoint:
    served = s > th
    n_served = int(served.sum())
    hits = int(np.count_nonzero(served & y))
    precision = hits / n_served if n_served else None
    recall = hits / n_pos if n_pos else 0.0
    return PRPoint(float(th), precision, recall, n_served)


def pr_at_threshold(scores: dict, labels: dict, th: float) -> PRPoint:
    """Precision and recall of ExtGood items when serving those with score strictly above ``th``."""
    s, y = _aligned(scores, labels)
    return _point(s, y, th, int(y.sum()))


def pr_curve(scores: dict, labels: dict) -> list:
    """Sweep every distinct score as a threshold (descending), then one below the minimum."""
    s, y = _aligned(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("no ExtGood samples; recall undefined")
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    hits_cum = np.cumsum(y_sorted)
    distinct = np.unique(s)[::-1]
    # number of scores strictly greater than each threshold
    served_counts = np.searchsorted(-s_sorted, -distinct, side="left")
    points = []
    for th, n_served in zip(distinct.tolist(), served_counts.tolist()):
        hits = int(hits_cum[n_served - 1]) if n_served else 0
        points.append(PRPoint(float(th), hits / n_served if n_served else None,
                              hits / n_pos, int(n_served)))
    sentinel = float(np.nextafter(distinct[-1], -np.inf))
    points.append(PRPoint(sentinel, n_pos / int(s.size), 1.0, int(s.size)))
    return points


def auc(points) -> float:
    """Trapezoidal area under precision(recall), anchored at recall 0.

    The anchor takes the precision of the highest-threshold point that has a
    defined precision.
    """
    defined = [p for p in points if p.precision is not None]
    if len(defined) < 2:
        raise TooFewPoints("need at least two points with defined precision")
    defined.sort(key=lambda p: -p.threshold)
    anchor = defined[0].precision
    defined.sort(key=lambda p: p.recall)  # stable: keeps threshold order on recall ties
    r = np.array([0.0] + [p.recall for p in defined])
    prec = np.array([anchor] + [p.precision for p in defined])
    return float(np.sum(np.diff(r) * (prec[1:] + prec[:-1]) / 2.0))


def write_curve_csv(points, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "n_served"])
        for p in points:
            w.writerow([repr(float(p.threshold)),
                    "" if p.precision is None else repr(float(p.precision)),
                    repr(float(p.recall)), int(p.n_served)])


def read_curve_csv(path) -> list:
    points = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            try:
                prec = row["precision"]
                points.append(PRPoint(float(row["threshold"]), float(prec) if prec else None,
                                      float(row["recall"]), int(row["n_served"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise MalformedRecord(f"bad curve row: {exc}", lineno, path) from None
    return points


# -- model evaluation -------------------------------------------------------

@dataclass(frozen=True)
class EvalReport:
    spearman: float | None
    mse: float
    n: int

    def to_dict(self):
        return {"spearman": self.spearman, "mse": self.mse, "n": self.n}


def report_from_scores(preds, targets) -> EvalReport:
    """Spearman is reported as ``None`` when either side is constant."""
    try:
        rho = spearman(targets, preds)
    except ConstantVector:
        rho = None
    return EvalReport(rho, mse(preds, targets), len(preds))


def evaluate(checkpoint, samples, batch_size: int = 1024) -> EvalReport:
    """Infer-mode scores for labeled samples, summarized as Spearman and MSE."""
    if any(s.target is None for s in samples):
        raise MissingTarget("evaluation needs a target on every sample")
    preds = score_samples(checkpoint, samples, batch_size)
    return report_from_scores(preds, np.array([s.target for s in samples]))


def score_samples(checkpoint, samples, batch_size: int = 1024) -> np.ndarray:
    out = np.empty(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out[start:start + len(chunk)] = forward_batch(
            checkpoint.params, checkpoint.config, collate(chunk, checkpoint.config.num_labels))
    return out
