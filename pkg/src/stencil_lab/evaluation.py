"""Classification quality metrics and the text report."""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .labeling import MissingBordersError, Quartile

CLASSES = tuple(Quartile)


class UndefinedAUCError(ValueError):
    pass


@dataclass
class ClassMetrics:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class MedianReport:
    q1_better: float
    q4_worse: float
    q1_count: int
    q4_count: int


@dataclass
class EvalReport:
    name: str
    confusion: np.ndarray
    metrics: ClassMetrics
    roc: dict[int, RocCurve]
    median: MedianReport | None
    count: int
    extra: dict = field(default_factory=dict)


def confusion(predictions, truths, num_classes: int = 4) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truths, dtype=np.int64)
    if pred.shape != true.shape:
        raise ValueError(f"{len(pred)} predictions for {len(true)} truths")
    if pred.size == 0:
        raise ValueError("nothing to evaluate")
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (true, pred), 1)
    return out


def column_normalized(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    cols = m.sum(axis=0)
    return np.divide(m, cols, out=np.zeros_like(m), where=cols > 0)


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def class_metrics(matrix) -> ClassMetrics:
    m = np.asarray(matrix)
    diag = np.diag(m)
    precision = _ratio(diag, m.sum(axis=0))
    recall = _ratio(diag, m.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    total = m.sum()
    return ClassMetrics(precision, recall, f1, float(diag.sum() / total) if total else 0.0)


def roc_curve(scores, positives) -> RocCurve:
    """One-vs-rest ROC by sweeping the threshold over the distinct scores.

    Tied scores move together, so the trapezoidal area counts ties as half
    a win, the same as the Mann-Whitney statistic.
    """
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    n_pos = int(pos.sum())
    n_neg = len(pos) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, pos = s[order], pos[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(pos)[last]
    fp = (last + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, auc)


def roc_auc(scores, positives) -> float:
    return roc_curve(scores, positives).auc


def median_analysis(predictions, epsilons, sizes, borders) -> MedianReport:
    """Share of predicted-Q1 stencils below, and predicted-Q4 above, the
    median error of their stencil size (the Q2/Q3 border)."""
    pred = np.asarray(predictions)
    eps = np.asarray(epsilons, dtype=np.float64)
    sizes = np.asarray(sizes)
    if not (len(pred) == len(eps) == len(sizes)):
        raise ValueError("predictions, epsilons and sizes differ in length")
    med = np.empty(len(eps))
    for s in np.unique(sizes):
        if int(s) not in borders:
            raise MissingBordersError(f"no quartile borders for stencil size {int(s)}")
        med[sizes == s] = borders[int(s)][1]
    q1 = pred == Quartile.Q1
    q4 = pred == Quartile.Q4
    q1_better = float(np.mean(eps[q1] < med[q1])) if q1.any() else float("nan")
    q4_worse = float(np.mean(eps[q4] > med[q4])) if q4.any() else float("nan")
    return MedianReport(q1_better, q4_worse, int(q1.sum()), int(q4.sum()))


def evaluate(name: str, probs, truths, epsilons=None, sizes=None, borders=None) -> EvalReport:
    probs = np.asarray(probs, dtype=np.float64)
    truths = np.asarray(truths)
    pred = np.argmax(probs, axis=1)
    cm = confusion(pred, truths, probs.shape[1])
    roc = {}
    for c in range(probs.shape[1]):
        try:
            roc[c] = roc_curve(probs[:, c], truths == c)
        except UndefinedAUCError:
            pass
    median = None
    if epsilons is not None and sizes is not None and borders is not None:
        median = median_analysis(pred, epsilons, sizes, borders)
    return EvalReport(name, cm, class_metrics(cm), roc, median, len(truths))


# text output ----------------------------------------------------------------

def _matrix_lines(m, fmt) -> list[str]:
    head = "true\\pred " + " ".join(f"{q.name:>8}" for q in CLASSES)
    rows = [head]
    for q, row in zip(CLASSES, m):
        rows.append(f"{q.name:<9} " + " ".join(fmt(v) for v in row))
    return rows


def render_report(reports: list[EvalReport], config: dict | None = None,
                  roc_points: bool = True) -> str:
    out = io.StringIO()
    w = out.write
    w("# stencil classifier evaluation\n\n")
    w("## config\n")
    for k, v in sorted((config or {}).items()):
        w(f"{k}: {v}\n")

    w("\n## metrics\n")
    w(f"{'test':<10} {'quartile':<8} {'precision':>9} {'recall':>9} {'f1':>9} {'accuracy':>9}\n")
    for r in reports:
        for q in CLASSES:
            acc = f"{r.metrics.accuracy:9.4f}" if q is Quartile.Q1 else " " * 9
            w(f"{r.name:<10} {q.name:<8} {r.metrics.precision[q]:9.4f} "
              f"{r.metrics.recall[q]:9.4f} {r.metrics.f1[q]:9.4f} {acc}\n")

    for r in reports:
        w(f"\n## dataset {r.name} ({r.count} stencils)\n")
        w("\n### confusion matrix (counts)\n")
        w("\n".join(_matrix_lines(r.confusion, lambda v: f"{int(v):>8d}")) + "\n")
        w("\n### confusion matrix (column-normalized)\n")
        w("\n".join(_matrix_lines(column_normalized(r.confusion),
                                  lambda v: f"{v:>8.4f}")) + "\n")
        w("\n### auc (one-vs-rest)\n")
        for c, curve in sorted(r.roc.items()):
            w(f"{CLASSES[c].name}: {curve.auc:.6f}\n")
        if r.median is not None:
            w("\n### median analysis\n")
            w(f"predicted Q1 below size median: {r.median.q1_better:.4f} "
              f"({r.median.q1_count} stencils)\n")
            w(f"predicted Q4 above size median: {r.median.q4_worse:.4f} "
              f"({r.median.q4_count} stencils)\n")
        if roc_points:
            w("\n### roc points (fpr tpr)\n")
            for c, curve in sorted(r.roc.items()):
                pts = " ".join(f"{a:.6g}:{b:.6g}" for a, b in zip(curve.fpr, curve.tpr))
                w(f"{CLASSES[c].name}: {pts}\n")
    return out.getvalue()


def roc_csv(reports: list[EvalReport]) -> str:
    lines = ["dataset,class,fpr,tpr"]
    for r in reports:
        for c, curve in sorted(r.roc.items()):
            for a, b in zip(curve.fpr, curve.tpr):
                lines.append(f"{r.name},{CLASSES[c].name},{a:.17g},{b:.17g}")
    return "\n".join(lines) + "\n"
