"""Pixel-level evaluation: confusion counts, SEN/SPE/F1/ACC, and rank-based AUC.

Predictions are binarized at a threshold with a >= tie rule. Metrics with a
zero denominator are reported as undefined (None) rather than 0, and render
as NA in the CSV and table outputs. Aggregation pools confusion counts (and
pixels, for AUC) across images before deriving metrics.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .data import crop_to
from .errors import ShapeError
from .tensor import Tensor, no_grad

METRIC_COLUMNS = ("sen", "spe", "f1", "acc", "auc")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    threshold: float
    sen: float | None
    spe: float | None
    f1: float | None
    acc: float | None
    auc: float | None


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def confusion(pred_prob, truth, threshold: float = 0.5) -> ConfusionCounts:
    """Tally pixels against binary truth; predicted positive iff prob >= threshold."""
    p = _as_array(pred_prob)
    t = _as_array(truth)
    if p.shape != t.shape:
        raise ShapeError(f"confusion shape mismatch: pred {p.shape} vs truth {t.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("truth must contain only {0, 1}")
    pos = p >= threshold
    tru = t == 1
    tp = int(np.count_nonzero(pos & tru))
    fp = int(np.count_nonzero(pos & ~tru))
    fn = int(np.count_nonzero(~pos & tru))
    tn = int(np.count_nonzero(~pos & ~tru))
    return ConfusionCounts(tp, fp, fn, tn)


def basic_metrics(c: ConfusionCounts):
    """(sen, spe, f1, acc); any zero-denominator metric comes back as None."""
    sen = c.tp / (c.tp + c.fn) if c.tp + c.fn else None
    spe = c.tn / (c.tn + c.fp) if c.tn + c.fp else None
    f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn) if 2 * c.tp + c.fp + c.fn else None
    acc = (c.tp + c.tn) / c.total if c.total else None
    return sen, spe, f1, acc


def auc(pred_prob, truth) -> float | None:
    """Rank-based (Mann-Whitney) AUC with average ranks for ties.

    Equals the trapezoidal area under the ROC swept over all distinct
    thresholds. None when only one class is present.
    """
    scores = _as_array(pred_prob).ravel()
    labels = _as_array(truth).ravel()
    if scores.shape != labels.shape:
        raise ShapeError(f"auc shape mismatch: {scores.shape} vs {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("truth must contain only {0, 1}")
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    # average 1-based rank within each tied group
    boundaries = np.flatnonzero(sorted_scores[1:] != sorted_scores[:-1]) + 1
    starts = np.concatenate(([0], boundaries))
    ends = np.concatenate((boundaries, [scores.size]))
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = 0.5 * (s + e + 1)
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def report_from_counts(counts: ConfusionCounts, threshold: float,
                       auc_value: float | None) -> MetricsReport:
    sen, spe, f1, acc = basic_metrics(counts)
    return MetricsReport(counts, threshold, sen, spe, f1, acc, auc_value)


@dataclass
class EvaluationResult:
    per_image: list  # (sample_id, MetricsReport)
    aggregate: MetricsReport


def evaluate(net, samples, threshold: float = 0.5) -> EvaluationResult:
    """Eval-mode forward per image, cropped back to original size, then scored.

    Per-image reports plus one pixel-pooled aggregate: counts summed before
    deriving metrics, AUC over the pooled pixels of every image.
    """
    per_image = []
    pooled = ConfusionCounts(0, 0, 0, 0)
    pooled_scores = []
    pooled_labels = []
    with no_grad():
        for s in samples:
            pred = net.forward(Tensor(s.image[None]), "eval").data[0]
            pred = crop_to(pred, s.original_size)
            mask = crop_to(s.mask, s.original_size)
            counts = confusion(pred, mask, threshold)
            per_image.append((s.id, report_from_counts(counts, threshold, auc(pred, mask))))
            pooled = pooled + counts
            pooled_scores.append(pred.ravel())
            pooled_labels.append(mask.ravel())
    pooled_auc = auc(np.concatenate(pooled_scores), np.concatenate(pooled_labels))
    return EvaluationResult(per_image, report_from_counts(pooled, threshold, pooled_auc))


# ---------------------------------------------------------------------------
# rendering


def _fmt(v: float | None) -> str:
    return "NA" if v is None else f"{v:.6f}"


def metrics_csv(result: EvaluationResult) -> str:
    buf = io.StringIO()
    buf.write("image,sen,spe,f1,acc,auc\n")
    for sample_id, rep in result.per_image:
        buf.write(f"{sample_id},{_fmt(rep.sen)},{_fmt(rep.spe)},{_fmt(rep.f1)},"
                  f"{_fmt(rep.acc)},{_fmt(rep.auc)}\n")
    agg = result.aggregate
    buf.write(f"AGGREGATE,{_fmt(agg.sen)},{_fmt(agg.spe)},{_fmt(agg.f1)},"
              f"{_fmt(agg.acc)},{_fmt(agg.auc)}\n")
    return buf.getvalue()


def metrics_table(result: EvaluationResult) -> str:
    """Aligned plain-text table with the SEN SPE F1 ACC AUC column order."""
    header = ("Image", "SEN", "SPE", "F1", "ACC", "AUC")
    rows = [header]
    for sample_id, rep in result.per_image:
        rows.append((sample_id, _fmt(rep.sen), _fmt(rep.spe), _fmt(rep.f1),
                     _fmt(rep.acc), _fmt(rep.auc)))
    agg = result.aggregate
    rows.append(("AGGREGATE", _fmt(agg.sen), _fmt(agg.spe), _fmt(agg.f1),
                 _fmt(agg.acc), _fmt(agg.auc)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = []
    for idx, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * widths[i] for i in range(len(header))))
    return "\n".join(lines) + "\n"
