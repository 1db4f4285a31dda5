"""Biometric performance metrics: ROC, precision/recall/F1, EER, rank-1.

All operations use the accept-iff-score >= threshold decision rule and are
invariant under strictly increasing monotone transforms of the scores.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

import numpy as np

from .errors import ParameterError

Scorer = Callable[[object, object], float]


@dataclass(frozen=True)
class ScoreSet:
    """Genuine (same-subject) and impostor (cross-subject) matching scores."""

    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        genuine = np.asarray(self.genuine, dtype=np.float64)
        impostor = np.asarray(self.impostor, dtype=np.float64)
        object.__setattr__(self, "genuine", genuine)
        object.__setattr__(self, "impostor", impostor)
        for name, arr in (("genuine", genuine), ("impostor", impostor)):
            if arr.ndim != 1 or arr.size == 0:
                raise ParameterError(f"{name} scores must be a non-empty 1-D sequence")
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"{name} scores contain NaN or Inf")


def _threshold_grid(scores: ScoreSet) -> np.ndarray:
    distinct = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    return np.concatenate([[-np.inf], distinct, [np.inf]])


def _rates_at(scores: ScoreSet, thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) for accept-iff-score>=t at each threshold."""
    g = np.sort(scores.genuine)
    i = np.sort(scores.impostor)
    # count of scores >= t via searchsorted on the sorted arrays
    tpr = (g.size - np.searchsorted(g, thresholds, side="left")) / g.size
    fpr = (i.size - np.searchsorted(i, thresholds, side="left")) / i.size
    return fpr, tpr


@dataclass(frozen=True)
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc(scores: ScoreSet) -> RocCurve:
    """ROC staircase over the distinct scores plus -inf/+inf sentinels.

    AUC is the trapezoid-rule area, which on this vertex set equals the
    pairwise P(genuine > impostor) + 0.5*P(tie) estimator.
    """
    thresholds = _threshold_grid(scores)
    fpr, tpr = _rates_at(scores, thresholds)
    # thresholds ascend, so reversing walks the ROC path from (0,0) to (1,1)
    auc = float(np.trapezoid(tpr[::-1], fpr[::-1]))
    return RocCurve(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


@dataclass(frozen=True)
class PrfCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray


def precision_recall_f1(scores: ScoreSet) -> PrfCurve:
    """Precision, recall and F1 per threshold.

    Precision is defined as 1 where nothing is accepted so the curve stays
    total; F1 is 0 where precision + recall is 0.
    """
    thresholds = _threshold_grid(scores)
    n_g = scores.genuine.size
    n_i = scores.impostor.size
    fpr, tpr = _rates_at(scores, thresholds)
    tp = tpr * n_g
    fp = fpr * n_i
    accepts = tp + fp
    precision = np.where(accepts > 0, tp / np.where(accepts > 0, accepts, 1.0), 1.0)
    recall = tpr
    pr = precision + recall
    f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    return PrfCurve(thresholds=thresholds, precision=precision, recall=recall, f1=f1)


def confusion_at(scores: ScoreSet, threshold: float) -> dict[str, float]:
    """Precision/recall/F1 of the accept-iff-score>=threshold rule."""
    tp = float(np.count_nonzero(scores.genuine >= threshold))
    fp = float(np.count_nonzero(scores.impostor >= threshold))
    fn = scores.genuine.size - tp
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    recall = tp / (tp + fn)
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) > 0 else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


def eer(scores: ScoreSet) -> tuple[float, float]:
    """Equal error rate and its working threshold.

    FPR and FNR are piecewise constant between adjacent distinct scores; the
    crossing is located on that grid.  When a whole threshold interval
    achieves FPR == FNR, its midpoint is returned; otherwise the two rate
    curves are linearly interpolated across the sign change.
    """
    s = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    n_g = scores.genuine.size
    n_i = scores.impostor.size
    g = np.sort(scores.genuine)
    im = np.sort(scores.impostor)
    # interval I_k = (s_k, s_{k+1}] with s_0 = -inf, s_{m+1} = +inf;
    # on I_k: FPR = #(imp >= s_{k+1})/n_i, FNR = #(gen <= s_k)/n_g
    m = s.size
    fpr = np.empty(m + 1)
    fnr = np.empty(m + 1)
    fpr[:m] = (n_i - np.searchsorted(im, s, side="left")) / n_i
    fpr[m] = 0.0
    fnr[0] = 0.0
    fnr[1:] = np.searchsorted(g, s, side="right") / n_g
    d = fpr - fnr  # non-increasing in k

    tie = np.flatnonzero(np.abs(d) <= 1e-12)
    if tie.size > 0:
        k0, k1 = tie[0], tie[-1]
        lo = s[k0 - 1] if k0 > 0 else -np.inf
        hi = s[k1] if k1 < m else np.inf
        if np.isinf(lo):
            threshold = hi
        elif np.isinf(hi):
            threshold = lo
        else:
            threshold = (lo + hi) / 2.0
        return float(fpr[k0]), float(threshold)

    k = int(np.flatnonzero(d < 0)[0])  # d[m] = -FNR <= -1/n_g < 0, so k exists
    if k == 0:
        return float((fpr[0] + fnr[0]) / 2.0), float(s[0])
    lam = d[k - 1] / (d[k - 1] - d[k])
    value = fpr[k - 1] + lam * (fpr[k] - fpr[k - 1])
    t_lo = s[k - 1]
    t_hi = s[k] if k < m else s[m - 1]
    threshold = t_lo + lam * (t_hi - t_lo)
    return float(value), float(threshold)


@dataclass(frozen=True)
class MetricsReport:
    """Working-point metrics plus curve-level summaries."""

    eer: float
    eer_threshold: float
    precision: float
    recall: float
    f1: float
    auc_roc: float
    rank1: float | None = None
    extra: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "eer": self.eer,
            "eer_threshold": self.eer_threshold,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "auc_roc": self.auc_roc,
            "rank1": self.rank1,
        }
        out.update(self.extra)
        return out

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def report_from_scores(scores: ScoreSet, rank1: float | None = None, **extra) -> MetricsReport:
    """Assemble the standard report: all working-point metrics at the EER threshold."""
    value, threshold = eer(scores)
    curve = roc(scores)
    conf = confusion_at(scores, threshold)
    return MetricsReport(
        eer=value,
        eer_threshold=threshold,
        precision=conf["precision"],
        recall=conf["recall"],
        f1=conf["f1"],
        auc_roc=curve.auc,
        rank1=rank1,
        extra=extra,
    )


def write_roc_csv(curve: RocCurve, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, tp in zip(curve.thresholds, curve.fpr, curve.tpr):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(tp))])


def write_prf_csv(curve: PrfCurve, path: Union[str, Path]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall", "f1"])
        for t, p, r, f in zip(curve.thresholds, curve.precision, curve.recall, curve.f1):
            writer.writerow([repr(float(t)), repr(float(p)), repr(float(r)), repr(float(f))])


def rank1(
    gallery: Mapping[str, object],
    probes: Sequence[tuple[str, object]],
    score_fn: Scorer,
) -> float:
    """Fraction of probes whose best-scoring gallery subject is the true one.

    Ties at the maximum count as misses.  A single-subject gallery is the
    degenerate pass-through case.
    """
    if len(gallery) < 1:
        raise ParameterError("gallery must contain at least one template")
    if len(probes) < 1:
        raise ParameterError("no probes given")
    ids = sorted(gallery)
    for label, _ in probes:
        if label not in gallery:
            raise ParameterError(f"probe label {label!r} not present in gallery")
    hits = 0
    for label, probe in probes:
        values = np.array([score_fn(gallery[sid], probe) for sid in ids])
        best = values.max()
        top = [sid for sid, v in zip(ids, values) if v == best]
        if len(top) == 1 and top[0] == label:
            hits += 1
    return hits / len(probes)
