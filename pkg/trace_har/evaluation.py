"""
Timeline evaluation: unit-interval accuracy and F1, Ward-style segment
errors, segment-length EMD, short-segment distributions, blocked folds
"""
import logging
from datetime import datetime, timedelta
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import wasserstein_distance
from sklearn import metrics

from .errors import (
    InsufficientDataError,
    OneEmptyDistributionError,
    SpanMismatchError,
    SpanTooShortError,
)
from .label_maps import label_mapper
from .schemas import Fold, GroundTruthSegment, LabeledTimeline, LabelMap, SegmentErrorCounts
from .utils import TimeUtils, TimingLogger

logger = logging.getLogger(__name__)

UNLABELED = "<unlabeled>"
METRICS = ("accuracy", "weighted_f1", "macro_f1", "fr", "mr", "of", "uf", "emd")
METRIC_TITLES = {
    "accuracy": "Accuracy",
    "weighted_f1": "Weighted F1",
    "macro_f1": "Macro F1",
    "fr": "FR",
    "mr": "MR",
    "of": "OF",
    "uf": "UF",
    "emd": "EMD",
}

Segment = Tuple[datetime, datetime, str]


def _segments(items: Iterable[Any]) -> List[Segment]:
    """(start, end, label) for anything with start/end/label, unlabeled items dropped"""
    segments = [(item.start, item.end, item.label) for item in items if item.label is not None and item.end > item.start]
    segments.sort(key=lambda s: (s[0], s[1]))
    return segments


def _clip(segments: Sequence[Segment], start: datetime, end: datetime) -> List[Segment]:
    clipped = []
    for a, b, label in segments:
        a, b = max(a, start), min(b, end)
        if b > a:
            clipped.append((a, b, label))
    return clipped


def _hull(segments: Sequence[Segment]) -> Optional[Tuple[datetime, datetime]]:
    if not segments:
        return None
    return min(s[0] for s in segments), max(s[1] for s in segments)


def _as_segment(segment: Segment) -> GroundTruthSegment:
    return GroundTruthSegment(start=segment[0], end=segment[1], label=segment[2])


def common_span(pred_items: Iterable[Any], gt_items: Iterable[Any]) -> Tuple[datetime, datetime]:
    """Ground-truth extent, provided the prediction overlaps it"""
    pred, gt = _hull(_segments(pred_items)), _hull(_segments(gt_items))
    if gt is None:
        raise InsufficientDataError("ground truth has no labeled segments")
    if pred is None or pred[1] <= gt[0] or gt[1] <= pred[0]:
        raise SpanMismatchError("prediction and ground truth spans do not overlap")
    return gt


# Unit-interval metrics
def to_labeled_timeline(items: Iterable[Any], start: datetime, end: datetime, unit: timedelta) -> LabeledTimeline:
    """Label of the segment covering each unit start; None where uncovered"""
    segments = _segments(items)
    labels: List[Optional[str]] = []
    position = 0
    stamp = start
    while stamp < end:
        while position < len(segments) and segments[position][1] <= stamp:
            position += 1
        covering = None
        for index in range(position, len(segments)):
            a, b, label = segments[index]
            if a > stamp:
                break
            if b > stamp:
                covering = label
                break
        labels.append(covering)
        stamp += unit
    return LabeledTimeline(start=start, end=end, unit_seconds=unit.total_seconds(), labels=labels)


def _paired(pred: LabeledTimeline, gt: LabeledTimeline) -> Tuple[List[str], List[str]]:
    if (pred.start, pred.unit_seconds, len(pred.labels)) != (gt.start, gt.unit_seconds, len(gt.labels)):
        raise SpanMismatchError(
            f"prediction covers {len(pred.labels)} units of {pred.unit_seconds}s from {pred.start.isoformat()}, "
            f"ground truth {len(gt.labels)} units of {gt.unit_seconds}s from {gt.start.isoformat()}"
        )
    y_true, y_pred = [], []
    for p, g in zip(pred.labels, gt.labels):
        if g is None:
            continue
        y_true.append(g)
        y_pred.append(p if p is not None else UNLABELED)
    return y_true, y_pred


def time_accuracy(pred: LabeledTimeline, gt: LabeledTimeline) -> float:
    """Share of labeled ground-truth units whose predicted label matches"""
    y_true, y_pred = _paired(pred, gt)
    if not y_true:
        raise InsufficientDataError("no labeled ground-truth units in the span")
    return float(metrics.accuracy_score(y_true, y_pred))


def _label_space(y_true: Sequence[str], y_pred: Sequence[str], label_space: Optional[Sequence[str]], fixed: bool) -> List[str]:
    if fixed and label_space is not None:
        return list(label_space)
    return sorted((set(y_true) | set(y_pred)) - {UNLABELED})


def interval_f1(
    pred: LabeledTimeline,
    gt: LabeledTimeline,
    scheme: str = "weighted",
    label_space: Optional[Sequence[str]] = None,
    fixed_label_space: bool = True,
) -> Tuple[float, Dict[str, Dict[str, float]]]:
    """Weighted or macro F1 over unit intervals, with the per-class table.

    Under a fixed label space, classes absent from both sides score 0.
    """
    if scheme not in ("weighted", "macro"):
        raise ValueError(f"unknown F1 scheme '{scheme}'")
    y_true, y_pred = _paired(pred, gt)
    if not y_true:
        raise InsufficientDataError("no labeled ground-truth units in the span")
    labels = _label_space(y_true, y_pred, label_space, fixed_label_space)

    precision, recall, f1, support = metrics.precision_recall_fscore_support(
        y_true, y_pred, labels=labels, average=None, zero_division=0
    )
    table = {
        label: {
            "precision": float(precision[i]),
            "recall": float(recall[i]),
            "f1": float(f1[i]),
            "support": int(support[i]),
        }
        for i, label in enumerate(labels)
    }
    if scheme == "macro":
        score = float(np.mean(f1)) if len(labels) else 0.0
    else:
        total = support.sum()
        score = float(np.dot(f1, support) / total) if total else 0.0
    return score, table


def confusion_matrix(
    pred: LabeledTimeline,
    gt: LabeledTimeline,
    label_space: Sequence[str],
    row_normalize: bool = True,
) -> np.ndarray:
    """Rows are ground-truth labels; unlabeled predictions fall outside the matrix"""
    y_true, y_pred = _paired(pred, gt)
    matrix = metrics.confusion_matrix(y_true, y_pred, labels=list(label_space)).astype(float)
    if row_normalize:
        sums = matrix.sum(axis=1, keepdims=True)
        matrix = np.divide(matrix, sums, out=np.zeros_like(matrix), where=sums > 0)
    return matrix


# Segment metrics
def _length(a: datetime, b: datetime) -> float:
    return (b - a).total_seconds()


def _overlap(a: Segment, b: Segment) -> float:
    return max(0.0, _length(max(a[0], b[0]), min(a[1], b[1])))


def _best_match(segment: Segment, candidates: Sequence[Segment]) -> Optional[int]:
    """Index of the candidate with the largest overlap, earliest on ties"""
    best, best_overlap = None, 0.0
    for i, candidate in enumerate(candidates):
        overlap = _overlap(segment, candidate)
        if overlap > best_overlap:
            best, best_overlap = i, overlap
    return best


def ward_metrics(
    pred_items: Iterable[Any],
    gt_items: Iterable[Any],
    span_start: Optional[datetime] = None,
    span_end: Optional[datetime] = None,
) -> SegmentErrorCounts:
    """Fragmentation, merge, overfill and underfill.

    FR is the share of ground-truth segments overlapped by two or more
    same-label predictions, MR the share of predictions overlapping two or
    more same-label ground-truth segments. For OF and UF each ground-truth
    segment is paired with its same-label prediction of maximal overlap:
    UF is ground-truth time its pair leaves uncovered, OF prediction time
    outside the ground-truth segments paired with it, both over the span.
    """
    pred, gt = _segments(pred_items), _segments(gt_items)
    hull = _hull(pred + gt)
    if hull is None:
        return SegmentErrorCounts()
    start = span_start if span_start is not None else hull[0]
    end = span_end if span_end is not None else hull[1]
    pred, gt = _clip(pred, start, end), _clip(gt, start, end)
    span = _length(start, end)
    if span <= 0:
        raise SpanMismatchError("evaluation span is empty")

    def matches(segment: Segment, pool: Sequence[Segment]) -> List[int]:
        return [i for i, o in enumerate(pool) if o[2] == segment[2] and o[0] < segment[1] and segment[0] < o[1]]

    classes: Dict[str, Dict[str, float]] = {}

    def bucket(label: str) -> Dict[str, float]:
        return classes.setdefault(label, {"gt": 0, "pred": 0, "fragmented": 0, "merging": 0, "of": 0.0, "uf": 0.0})

    paired: Dict[int, List[Segment]] = {}
    for g in gt:
        stats = bucket(g[2])
        stats["gt"] += 1
        matched = matches(g, pred)
        if len(matched) >= 2:
            stats["fragmented"] += 1
        best = _best_match(g, [pred[i] for i in matched])
        if best is None:
            continue
        pair = matched[best]
        paired.setdefault(pair, []).append(g)
        stats["uf"] += _length(g[0], g[1]) - _overlap(g, pred[pair])
    for i, p in enumerate(pred):
        stats = bucket(p[2])
        stats["pred"] += 1
        if len(matches(p, gt)) >= 2:
            stats["merging"] += 1
        if i in paired:
            covered = TimeUtils.union_length(
                (max(p[0], g[0]), min(p[1], g[1])) for g in paired[i]
            ).total_seconds()
            stats["of"] += _length(p[0], p[1]) - covered

    fragmented = sum(int(s["fragmented"]) for s in classes.values())
    merging = sum(int(s["merging"]) for s in classes.values())
    per_class = {
        label: {
            "fr": s["fragmented"] / s["gt"] if s["gt"] else 0.0,
            "mr": s["merging"] / s["pred"] if s["pred"] else 0.0,
            "of": s["of"] / span,
            "uf": s["uf"] / span,
        }
        for label, s in sorted(classes.items())
    }
    return SegmentErrorCounts(
        fr=fragmented / len(gt) if gt else 0.0,
        mr=merging / len(pred) if pred else 0.0,
        of=sum(s["of"] for s in classes.values()) / span,
        uf=sum(s["uf"] for s in classes.values()) / span,
        fragmented_segments=fragmented,
        merging_segments=merging,
        gt_segments=len(gt),
        pred_segments=len(pred),
        per_class=per_class,
    )


def segment_lengths(items: Iterable[Any], unit: timedelta = timedelta(minutes=1)) -> List[int]:
    """Segment lengths rounded to whole units"""
    seconds = unit.total_seconds()
    return [int(np.rint(_length(a, b) / seconds)) for a, b, _ in _segments(items)]


def emd_segment_lengths(
    pred_items: Iterable[Any],
    gt_items: Iterable[Any],
    unit: timedelta = timedelta(minutes=1),
    max_len: int = 600,
) -> float:
    """Earth mover's distance between segment-length histograms, in units.

    Lengths above `max_len` share one overflow bin at max_len + 1.
    """
    pred = np.minimum(segment_lengths(pred_items, unit), max_len + 1)
    gt = np.minimum(segment_lengths(gt_items, unit), max_len + 1)
    if len(pred) == 0 and len(gt) == 0:
        return 0.0
    if len(pred) == 0 or len(gt) == 0:
        raise OneEmptyDistributionError("cannot compare a segment-length distribution with an empty one")
    return float(wasserstein_distance(pred, gt))


def short_segment_distribution(
    items: Iterable[Any],
    unit: timedelta = timedelta(minutes=1),
    max_len: int = 9,
) -> Dict[int, float]:
    """Percentage of all segments having each rounded length 1..max_len"""
    lengths = segment_lengths(items, unit)
    distribution = {k: 0.0 for k in range(1, max_len + 1)}
    if not lengths:
        return distribution
    for length in lengths:
        if length in distribution:
            distribution[length] += 1
    return {k: 100.0 * count / len(lengths) for k, count in distribution.items()}


# Label maps
def apply_label_map(items, label_map: LabelMap):
    """Relabel a LabeledTimeline, a list of labels, or a list of segment models"""
    lookup = label_mapper(label_map)
    if isinstance(items, LabeledTimeline):
        mapped = [lookup(label) if label is not None else None for label in items.labels]
        return items.model_copy(update={"labels": mapped})
    result = []
    for item in items:
        if item is None or isinstance(item, str):
            result.append(lookup(item) if item is not None else None)
        elif item.label is None:
            result.append(item)
        else:
            result.append(item.model_copy(update={"label": lookup(item.label)}))
    return result


# Folds
def blocked_splits(
    span_start: datetime,
    span_end: datetime,
    n_folds: int = 3,
    test_days: int = 20,
) -> List[Fold]:
    """Contiguous, non-overlapping test blocks spread evenly over whole days of the span.

    The first block starts at the span start and the last ends on the final
    whole day; everything outside a fold's test block is its training time.
    """
    if n_folds < 1 or test_days < 1:
        raise ValueError("n_folds and test_days must be >= 1")
    day = timedelta(days=1)
    total_days = (span_end - span_start) // day
    if total_days < n_folds * test_days:
        raise SpanTooShortError(
            f"span has {total_days} whole days, {n_folds} folds of {test_days} days need {n_folds * test_days}"
        )
    free = total_days - n_folds * test_days
    folds = []
    for i in range(n_folds):
        gap = i * free // (n_folds - 1) if n_folds > 1 else 0
        test_start = span_start + (i * test_days + gap) * day
        test_end = test_start + test_days * day
        train = [(a, b) for a, b in ((span_start, test_start), (test_end, span_end)) if b > a]
        folds.append(Fold(index=i, test_start=test_start, test_end=test_end, train=train))
    return folds


# Reports
@TimingLogger.log_execution_time
def evaluate_timelines(
    pred_items: Iterable[Any],
    gt_items: Iterable[Any],
    unit: timedelta,
    label_space: Sequence[str],
    fixed_label_space: bool = True,
    span_start: Optional[datetime] = None,
    span_end: Optional[datetime] = None,
    emd_max_len: int = 600,
    short_max_len: int = 9,
) -> Dict[str, Any]:
    """Full metric report for one prediction against ground truth"""
    pred, gt = _segments(pred_items), _segments(gt_items)
    if span_start is None or span_end is None:
        hull = common_span([_as_segment(s) for s in pred], [_as_segment(s) for s in gt])
        span_start = span_start or TimeUtils.floor_to_unit(hull[0], unit)
        span_end = span_end or TimeUtils.ceil_to_unit(hull[1], unit)
    pred, gt = _clip(pred, span_start, span_end), _clip(gt, span_start, span_end)
    pred_items, gt_items = [_as_segment(s) for s in pred], [_as_segment(s) for s in gt]

    pred_tl = to_labeled_timeline(pred_items, span_start, span_end, unit)
    gt_tl = to_labeled_timeline(gt_items, span_start, span_end, unit)
    weighted, table = interval_f1(pred_tl, gt_tl, "weighted", label_space, fixed_label_space)
    macro, _ = interval_f1(pred_tl, gt_tl, "macro", label_space, fixed_label_space)
    y_true, y_pred = _paired(pred_tl, gt_tl)
    labels = _label_space(y_true, y_pred, label_space, fixed_label_space)

    try:
        emd = emd_segment_lengths(pred_items, gt_items, unit, emd_max_len)
    except OneEmptyDistributionError as e:
        logger.warning(f"EMD not computed: {e}")
        emd = None

    return {
        "span": {"start": span_start.isoformat(), "end": span_end.isoformat(), "unit_seconds": unit.total_seconds()},
        "labeled_units": len(y_true),
        "accuracy": time_accuracy(pred_tl, gt_tl),
        "weighted_f1": weighted,
        "macro_f1": macro,
        "per_class": table,
        "ward": ward_metrics(pred_items, gt_items, span_start, span_end).model_dump(),
        "emd": emd,
        "short_segments": {
            "pred": short_segment_distribution(pred_items, unit, short_max_len),
            "gt": short_segment_distribution(gt_items, unit, short_max_len),
        },
        "confusion": {
            "labels": labels,
            "matrix": confusion_matrix(pred_tl, gt_tl, labels).round(6).tolist(),
        },
    }


def metric_values(report: Dict[str, Any]) -> Dict[str, Optional[float]]:
    ward = report.get("ward") or {}
    return {
        "accuracy": report.get("accuracy"),
        "weighted_f1": report.get("weighted_f1"),
        "macro_f1": report.get("macro_f1"),
        "fr": ward.get("fr"),
        "mr": ward.get("mr"),
        "of": ward.get("of"),
        "uf": ward.get("uf"),
        "emd": report.get("emd"),
    }


def aggregate_reports(reports: Sequence[Dict[str, Any]]) -> Dict[str, Dict[str, float]]:
    """Mean and sample standard deviation of each metric across folds"""
    aggregate = {}
    for name in METRICS:
        values = [v for v in (metric_values(r)[name] for r in reports) if v is not None]
        if not values:
            continue
        aggregate[name] = {
            "mean": float(np.mean(values)),
            "std": float(np.std(values, ddof=1)) if len(values) > 1 else 0.0,
            "n": len(values),
        }
    return aggregate


def _cell(name: str, value) -> str:
    if value is None:
        return "-"
    scale = 1.0 if name == "emd" else 100.0
    if isinstance(value, dict):
        return f"{value['mean'] * scale:.2f}±{value['std'] * scale:.2f}"
    return f"{value * scale:.2f}"


def format_table(rows: Dict[str, Dict[str, Any]]) -> str:
    """Aligned text table; rows are single reports or aggregates. Rates in percent."""
    header = ["Run"] + [METRIC_TITLES[name] for name in METRICS]
    body = []
    for row_name, data in rows.items():
        aggregated = bool(data) and all(isinstance(v, dict) and "mean" in v for v in data.values())
        values = data if aggregated else metric_values(data)
        body.append([row_name] + [_cell(name, values.get(name)) for name in METRICS])
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(line)).rstrip() for line in [header] + body]
    return "\n".join(lines) + "\n"
