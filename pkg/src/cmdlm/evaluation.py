"""Intrusion-detection metrics over ranked, scored predictions.

Two views of quality matter: how precise the detector is on lines the
supervision source never flagged (its generalization beyond the rule set),
and how precise it is overall once its threshold is pinned low enough to
recall the flagged lines. Concretely:

* precision_at_top(v): precision of the v highest-scored unflagged
  predictions, counting hits whose ground truth is out-of-box malicious.
* threshold_for_flagged_recall(u): the largest score threshold that still
  recalls a fraction u of the flagged (in-box) predictions.
* precision_at_threshold: at a threshold, the overall precision (any
  malicious truth) of the positive set and the out-of-box precision of its
  unflagged subset.

The report also derives harmonic-mean F1 figures for the model and for the
supervision source itself, the latter from an estimate of its recall given
its detection count and the positive set size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .corpus import TRUTH_INBOX, TRUTH_OOB


@dataclass(frozen=True)
class ScoredPrediction:
    record_id: str
    score: float
    inbox_flag: bool            # supervision source fired on this record's text
    truth: str | None = None    # "benign" | "inbox" | "oob" when known

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score for {self.record_id}")


def _require_truth(preds: list[ScoredPrediction]) -> None:
    missing = [p.record_id for p in preds if p.truth is None]
    if missing:
        raise ValueError(f"ground truth missing for {len(missing)} predictions (e.g. {missing[0]!r})")


def precision_at_top(preds: list[ScoredPrediction], v: int) -> tuple[float, int]:
    """Precision of the top-v unflagged predictions against out-of-box truth.

    Ties keep input order. Returns (precision, n_used); n_used < v means
    fewer than v unflagged predictions were available and the precision was
    computed over all of them.
    """
    if v < 1:
        raise ValueError("v must be >= 1")
    _require_truth(preds)
    unflagged = [p for p in preds if not p.inbox_flag]
    ranked = sorted(unflagged, key=lambda p: -p.score)  # stable: ties keep input order
    top = ranked[:v]
    if not top:
        raise ValueError("no unflagged predictions to rank")
    hits = sum(1 for p in top if p.truth == TRUTH_OOB)
    return hits / len(top), len(top)


def threshold_for_flagged_recall(preds: list[ScoredPrediction], recall_target: float) -> float:
    """Largest threshold keeping at least `recall_target` of flagged scores."""
    if not 0.0 < recall_target <= 1.0:
        raise ValueError("recall_target must lie in (0, 1]")
    flagged = sorted((p.score for p in preds if p.inbox_flag), reverse=True)
    if not flagged:
        raise ValueError("no flagged (in-box) predictions; threshold undefined")
    k = math.ceil(recall_target * len(flagged))
    return flagged[k - 1]


def precision_at_threshold(
    preds: list[ScoredPrediction], threshold: float
) -> tuple[float, float]:
    """(out-of-box precision, overall precision) of the set scoring >= threshold.

    Overall precision counts any malicious truth; out-of-box precision is
    measured on the unflagged subset of the positives and is NaN if that
    subset is empty.
    """
    _require_truth(preds)
    positives = [p for p in preds if p.score >= threshold]
    if not positives:
        raise ValueError("no predictions at or above the threshold")
    overall = sum(1 for p in positives if p.truth in (TRUTH_INBOX, TRUTH_OOB)) / len(positives)
    unflagged = [p for p in positives if not p.inbox_flag]
    if unflagged:
        oob = sum(1 for p in unflagged if p.truth == TRUTH_OOB) / len(unflagged)
    else:
        oob = float("nan")
    return oob, overall


def f1(precision: float, recall: float) -> float:
    """Harmonic mean; defined as 0 when both inputs are 0."""
    for name, value in (("precision", precision), ("recall", recall)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1]")
    if precision == 0.0 and recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def estimate_commercial_recall(
    recall_target: float,
    n_commercial: int,
    oob_precision: float,
    n_predicted_positive: int,
) -> float:
    """Recall estimate for the supervision source on the predicted-positive set.

    With u the recall target, S its detection count, x the out-of-box
    precision, and T the positive-set size: u*S / (x*T + u*(1-x)*S). The
    source misses all x*T - x*u*S out-of-box intrusions in the set.
    """
    u, s, x, t = recall_target, n_commercial, oob_precision, n_predicted_positive
    denom = x * t + u * (1.0 - x) * s
    if denom == 0:
        raise ZeroDivisionError("recall estimate denominator is zero")
    return u * s / denom


@dataclass
class EvalReport:
    recall_target: float
    precision_at: dict[int, float] = field(default_factory=dict)
    precision_at_support: dict[int, int] = field(default_factory=dict)
    threshold: float | None = None
    oob_precision: float | None = None
    overall_precision: float | None = None
    inbox_recall_achieved: float | None = None
    f1_model: float | None = None
    f1_commercial: float | None = None
    n_predictions: int = 0
    n_flagged: int = 0
    n_predicted_positive: int | None = None
    multi_line: bool = False

    def to_json(self) -> str:
        payload = {
            "recall_target": self.recall_target,
            "precision_at": {str(k): v for k, v in sorted(self.precision_at.items())},
            "precision_at_support": {str(k): v for k, v in sorted(self.precision_at_support.items())},
            "threshold": self.threshold,
            "oob_precision": self.oob_precision,
            "overall_precision": self.overall_precision,
            "inbox_recall_achieved": self.inbox_recall_achieved,
            "f1_model": self.f1_model,
            "f1_commercial": self.f1_commercial,
            "n_predictions": self.n_predictions,
            "n_flagged": self.n_flagged,
            "n_predicted_positive": self.n_predicted_positive,
            "multi_line": self.multi_line,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    def format_table(self) -> str:
        def fmt(x):
            return "-" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"

        lines = [
            f"predictions: {self.n_predictions}  flagged in-box: {self.n_flagged}",
        ]
        for v in sorted(self.precision_at):
            support = self.precision_at_support.get(v, v)
            note = "" if support >= v else f"  (only {support} unflagged available)"
            lines.append(f"precision of top-{v} unflagged: {fmt(self.precision_at[v])}{note}")
        if not self.multi_line:
            lines += [
                f"threshold at recall target {self.recall_target:g}: {fmt(self.threshold)}",
                f"in-box recall achieved: {fmt(self.inbox_recall_achieved)}",
                f"out-of-box precision: {fmt(self.oob_precision)}",
                f"overall precision: {fmt(self.overall_precision)}",
                f"positive set size: {self.n_predicted_positive}",
                f"model F1: {fmt(self.f1_model)}   supervision-source F1: {fmt(self.f1_commercial)}",
            ]
        else:
            lines.append("multi-line evaluation: threshold metrics omitted (sample sets differ)")
        return "\n".join(lines) + "\n"


def evaluate(
    preds: list[ScoredPrediction],
    v_list: list[int] = (50, 100),
    recall_target: float = 1.0,
    multi_line: bool = False,
) -> EvalReport:
    """Compose the full report from a deduplicated prediction set.

    Predictions are canonicalized by record_id first, so the report is
    invariant to input permutations; score ties then break by record_id.
    """
    if not preds:
        raise ValueError("no predictions to evaluate")
    preds = sorted(preds, key=lambda p: p.record_id)
    report = EvalReport(
        recall_target=recall_target,
        n_predictions=len(preds),
        n_flagged=sum(1 for p in preds if p.inbox_flag),
        multi_line=multi_line,
    )
    for v in v_list:
        precision, support = precision_at_top(preds, v)
        report.precision_at[int(v)] = precision
        report.precision_at_support[int(v)] = support
    if multi_line:
        return report

    threshold = threshold_for_flagged_recall(preds, recall_target)
    flagged_scores = [p.score for p in preds if p.inbox_flag]
    report.threshold = threshold
    report.inbox_recall_achieved = (
        sum(1 for s in flagged_scores if s >= threshold) / len(flagged_scores)
    )
    oob, overall = precision_at_threshold(preds, threshold)
    report.oob_precision = oob
    report.overall_precision = overall
    positives = [p for p in preds if p.score >= threshold]
    report.n_predicted_positive = len(positives)
    # On its own predicted-positive set the model recalls everything it
    # declared positive, so its F1 reduces to f1(overall precision, 1).
    report.f1_model = f1(overall, 1.0)
    if not math.isnan(oob):
        commercial_recall = estimate_commercial_recall(
            recall_target, report.n_flagged, oob, len(positives)
        )
        report.f1_commercial = f1(1.0, min(commercial_recall, 1.0))
    return report
