"""Detection evaluation: IoU, greedy matching, precision/recall/F1.

A prediction counts as a true positive when it achieves IoU >= 0.5 with an
unmatched ground-truth box; below-threshold or surplus predictions are false
positives, and ground truths left without a prediction are false negatives.
Matching is one-to-one and greedy in descending confidence order (the usual
detection-benchmark convention; ties on IoU go to the lowest ground-truth
index), which keeps results deterministic.

Boxes are (x_min, y_min, x_max, y_max) with continuous coordinates; areas are
not pixel-quantized.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import DegenerateBoxError

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class Prediction:
    """A predicted box with its confidence score."""

    box: Box
    confidence: float


@dataclass(frozen=True)
class MatchResult:
    """Per-image matching outcome: counts plus the matched index pairs."""

    tp: int
    fp: int
    fn: int
    pairs: tuple[tuple[int, int, float], ...]  # (prediction idx, gt idx, iou)


@dataclass(frozen=True)
class MetricsReport:
    """Precision/recall/F1 (fractions in [0, 1]) with the raw counts."""

    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    round: int = 0
    client_id: str = ""


def _check_box(box: Box) -> None:
    x0, y0, x1, y1 = box
    if not (x0 < x1 and y0 < y1):
        raise DegenerateBoxError(f"box has non-positive area: {box}")


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two boxes, in [0, 1]."""
    _check_box(a)
    _check_box(b)
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def match(
    predictions: list[Prediction],
    ground_truth: list[Box],
    iou_threshold: float = 0.5,
) -> MatchResult:
    """Greedy one-to-one matching of predictions against ground-truth boxes.

    Predictions are visited in descending confidence (sorted here, stable for
    ties); each takes the unmatched ground truth with the highest IoU if that
    IoU reaches the threshold.
    """
    order = sorted(range(len(predictions)), key=lambda i: -predictions[i].confidence)
    unmatched = set(range(len(ground_truth)))
    pairs = []
    for pred_idx in order:
        best_gt, best_iou = -1, 0.0
        for gt_idx in sorted(unmatched):
            value = iou(predictions[pred_idx].box, ground_truth[gt_idx])
            if value > best_iou:
                best_gt, best_iou = gt_idx, value
        if best_gt >= 0 and best_iou >= iou_threshold:
            unmatched.remove(best_gt)
            pairs.append((pred_idx, best_gt, best_iou))
    tp = len(pairs)
    return MatchResult(
        tp=tp,
        fp=len(predictions) - tp,
        fn=len(ground_truth) - tp,
        pairs=tuple(sorted(pairs)),
    )


def compute_metrics(
    results: list[MatchResult], round: int = 0, client_id: str = ""
) -> MetricsReport:
    """Aggregate per-image counts over a test set into one report.

    Zero-division convention: with no predictions, precision is 1.0 when
    there are also no ground truths and 0.0 otherwise (mirrored for recall);
    F1 is 0 when precision + recall is 0. This keeps per-round curves NaN-free.
    """
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    return metrics_from_counts(tp, fp, fn, round=round, client_id=client_id)


def metrics_from_counts(
    tp: int, fp: int, fn: int, round: int = 0, client_id: str = ""
) -> MetricsReport:
    if tp + fp > 0:
        precision = tp / (tp + fp)
    else:
        precision = 1.0 if fn == 0 else 0.0
    if tp + fn > 0:
        recall = tp / (tp + fn)
    else:
        recall = 1.0 if fp == 0 else 0.0
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return MetricsReport(precision, recall, f1, tp, fp, fn, round=round, client_id=client_id)


def select_best_round(history: list[dict[str, MetricsReport]]) -> int:
    """1-based round maximizing the unweighted mean of the clients' recall.

    Ties break toward the earliest round. ``history[r - 1]`` maps client id
    to that client's report for round r.
    """
    if not history:
        raise ValueError("empty history")
    best_round, best_value = 1, -1.0
    for idx, reports in enumerate(history, start=1):
        value = sum(r.recall for r in reports.values()) / len(reports)
        if value > best_value:
            best_round, best_value = idx, value
    return best_round


def best_round_per_client(history: list[dict[str, MetricsReport]]) -> dict[str, int]:
    """Reporting extra: per-client 1-based argmax of recall, earliest on ties."""
    if not history:
        raise ValueError("empty history")
    best: dict[str, tuple[int, float]] = {}
    for idx, reports in enumerate(history, start=1):
        for client_id, report in reports.items():
            if client_id not in best or report.recall > best[client_id][1]:
                best[client_id] = (idx, report.recall)
    return {cid: rnd for cid, (rnd, _) in best.items()}


def percent(value: float) -> str:
    """Render a [0, 1] fraction as a percentage with two decimals."""
    return f"{100.0 * value:.2f}"
