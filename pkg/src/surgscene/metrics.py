"""Evaluation suite: phase metrics, triplet AP family, segmentation IoU.

Phase metrics follow the unrelaxed protocol: frame-set precision/recall/
Jaccard per phase per video with no boundary tolerance, averaged over the
videos in which the phase occurs (in ground truth or prediction), then over
phases.  Video-level accuracy is the mean over videos of per-frame accuracy.

Triplet recognition uses frame-level average precision with all-points
interpolation (running-max precision envelope).  Component and association
families are derived from the triplet-class scores by max-marginalization;
classes with no positive frames anywhere are undefined and excluded from
their family mean.

Segmentation IoU accumulates intersections and unions over the whole
dataset per entity class, then averages over classes with ground-truth
presence.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, fields

import numpy as np

from .grammar import INSTRUMENT, TARGET
from .vocab import LabelSpace

# ---------------------------------------------------------------------------
# Average precision


def average_precision(scores, positives) -> float:
    """All-points-interpolated AP of one ranking.

    Sorting is stable descending (ties keep original order).  Returns NaN
    when there are no positives: the class is undefined and must be excluded
    from class means.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError(
            f"scores {scores.shape} and positives {positives.shape} must be "
            "equal-length vectors"
        )
    n_positive = int(positives.sum())
    if n_positive == 0:
        return math.nan
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    true_positives = np.cumsum(hits)
    precision = true_positives / np.arange(1, scores.size + 1)
    recall = true_positives / n_positive
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    previous_recall = np.concatenate(([0.0], recall[:-1]))
    return float(((recall - previous_recall) * envelope).sum())


def _defined_mean(values: list[float]) -> float:
    defined = [v for v in values if not math.isnan(v)]
    return float(np.mean(defined)) if defined else math.nan


@dataclass(frozen=True)
class TripletAPSuite:
    ap_i: float
    ap_v: float
    ap_t: float
    ap_iv: float
    ap_it: float
    ap_ivt: float


def _family_ap(
    scores: np.ndarray,
    present: np.ndarray,
    class_columns: list[list[int]],
) -> float:
    """AP of a derived family: per class, score is the max over its triplet
    columns and presence is their union."""
    values = []
    for columns in class_columns:
        if not columns:
            continue
        projected_scores = scores[:, columns].max(axis=1)
        projected_positives = present[:, columns].any(axis=1)
        values.append(average_precision(projected_scores, projected_positives))
    return _defined_mean(values)


def triplet_ap_suite(
    scores: np.ndarray, present: np.ndarray, space: LabelSpace
) -> TripletAPSuite:
    """Full AP family from frame-level triplet scores.

    ``scores``: (frames, n_triplets) detection scores; ``present``: boolean
    ground-truth presence of the same shape.
    """
    scores = np.asarray(scores, dtype=np.float64)
    present = np.asarray(present, dtype=bool)
    if scores.ndim != 2 or scores.shape[1] != space.num_triplets:
        raise ValueError(
            f"scores must be (frames, {space.num_triplets}), got {scores.shape}"
        )
    if scores.shape != present.shape:
        raise ValueError("scores and presence shapes differ")
    if scores.shape[0] == 0:
        raise ValueError("no frames to evaluate")

    ivt_values = [
        average_precision(scores[:, k], present[:, k])
        for k in range(space.num_triplets)
    ]

    def columns_by(selector) -> dict:
        mapping: dict = {}
        for k, components in enumerate(space.valid_triplets):
            mapping.setdefault(selector(components), []).append(k)
        return mapping

    inst_columns = columns_by(lambda c: c[0])
    verb_columns = columns_by(lambda c: c[1])
    targ_columns = columns_by(lambda c: c[2])
    iv_columns = columns_by(lambda c: (c[0], c[1]))
    it_columns = columns_by(lambda c: (c[0], c[2]))

    return TripletAPSuite(
        ap_i=_family_ap(scores, present, [inst_columns[i] for i in sorted(inst_columns)]),
        ap_v=_family_ap(scores, present, [verb_columns[v] for v in sorted(verb_columns)]),
        ap_t=_family_ap(scores, present, [targ_columns[t] for t in sorted(targ_columns)]),
        ap_iv=_family_ap(scores, present, [iv_columns[p] for p in sorted(iv_columns)]),
        ap_it=_family_ap(scores, present, [it_columns[p] for p in sorted(it_columns)]),
        ap_ivt=_defined_mean(ivt_values),
    )


# ---------------------------------------------------------------------------
# Phase metrics


@dataclass(frozen=True)
class PhaseMetrics:
    accuracy: float
    precision: float
    recall: float
    jaccard: float


def phase_metrics(
    pairs: list[tuple[np.ndarray, np.ndarray]],
    n_phases: int,
    pooled: bool = False,
) -> PhaseMetrics:
    """Unrelaxed phase metrics over (ground truth, prediction) sequences.

    Per video and phase, precision/recall/Jaccard are computed on frame
    sets; a phase participates in a video when it occurs in ground truth or
    prediction there.  When the denominator of precision (resp. recall) is
    empty the value is 0: the phase was hallucinated (resp. entirely
    missed).  ``pooled=True`` concatenates all videos first instead of
    averaging per video.
    """
    if not pairs:
        raise ValueError("no videos to evaluate")
    checked = []
    for gt, pred in pairs:
        gt = np.asarray(gt, dtype=np.int64)
        pred = np.asarray(pred, dtype=np.int64)
        if gt.shape != pred.shape or gt.ndim != 1:
            raise ValueError(f"sequence shape mismatch: {gt.shape} vs {pred.shape}")
        if gt.size == 0:
            raise ValueError("empty video")
        checked.append((gt, pred))
    if pooled:
        checked = [
            (
                np.concatenate([gt for gt, _ in checked]),
                np.concatenate([pred for _, pred in checked]),
            )
        ]

    accuracy = float(np.mean([np.mean(gt == pred) for gt, pred in checked]))
    per_phase: dict[int, dict[str, list[float]]] = {
        c: {"precision": [], "recall": [], "jaccard": []} for c in range(n_phases)
    }
    for gt, pred in checked:
        for phase in range(n_phases):
            in_gt = gt == phase
            in_pred = pred == phase
            if not in_gt.any() and not in_pred.any():
                continue
            tp = int(np.sum(in_gt & in_pred))
            n_pred = int(in_pred.sum())
            n_gt = int(in_gt.sum())
            union = int(np.sum(in_gt | in_pred))
            per_phase[phase]["precision"].append(tp / n_pred if n_pred else 0.0)
            per_phase[phase]["recall"].append(tp / n_gt if n_gt else 0.0)
            per_phase[phase]["jaccard"].append(tp / union)

    def phase_mean(metric: str) -> float:
        values = [
            float(np.mean(stats[metric]))
            for stats in per_phase.values()
            if stats[metric]
        ]
        return float(np.mean(values)) if values else math.nan

    return PhaseMetrics(
        accuracy=accuracy,
        precision=phase_mean("precision"),
        recall=phase_mean("recall"),
        jaccard=phase_mean("jaccard"),
    )


# ---------------------------------------------------------------------------
# Segmentation metrics


@dataclass(frozen=True)
class SegmentationMetrics:
    iou_i: float
    iou_t: float
    miou: float


class SegAccumulator:
    """Dataset-level IoU accumulation per entity class (kind, label)."""

    def __init__(self) -> None:
        self._intersection: dict[tuple[str, int], float] = {}
        self._union: dict[tuple[str, int], float] = {}
        self._gt_area: dict[tuple[str, int], float] = {}

    def add(
        self,
        entity_kind: str,
        label_id: int,
        pred_mask: np.ndarray | None,
        gt_mask: np.ndarray | None,
    ) -> None:
        """Record one frame's (prediction, ground truth) for one entity class.

        Either mask may be None (absent); shapes of present masks must agree.
        """
        if pred_mask is None and gt_mask is None:
            return
        if pred_mask is not None and gt_mask is not None:
            pred_mask = np.asarray(pred_mask, dtype=bool)
            gt_mask = np.asarray(gt_mask, dtype=bool)
            if pred_mask.shape != gt_mask.shape:
                raise ValueError(
                    f"mask resolution mismatch: {pred_mask.shape} vs {gt_mask.shape}"
                )
        key = (entity_kind, label_id)
        pred_area = 0.0 if pred_mask is None else float(np.sum(pred_mask))
        gt_area = 0.0 if gt_mask is None else float(np.sum(gt_mask))
        if pred_mask is None or gt_mask is None:
            intersection = 0.0
            union = pred_area + gt_area
        else:
            intersection = float(np.sum(pred_mask & gt_mask))
            union = float(np.sum(pred_mask | gt_mask))
        self._intersection[key] = self._intersection.get(key, 0.0) + intersection
        self._union[key] = self._union.get(key, 0.0) + union
        self._gt_area[key] = self._gt_area.get(key, 0.0) + gt_area

    def per_class_iou(self) -> dict[tuple[str, int], float]:
        """IoU per entity class with ground-truth presence."""
        result = {}
        for key in sorted(self._union):
            if self._gt_area.get(key, 0.0) <= 0.0:
                continue  # no GT presence anywhere: undefined class
            union = self._union[key]
            result[key] = self._intersection[key] / union if union else 1.0
        return result

    def result(self) -> SegmentationMetrics:
        per_class = self.per_class_iou()
        inst = [v for (kind, _), v in per_class.items() if kind == INSTRUMENT]
        targ = [v for (kind, _), v in per_class.items() if kind == TARGET]
        every = list(per_class.values())
        return SegmentationMetrics(
            iou_i=float(np.mean(inst)) if inst else math.nan,
            iou_t=float(np.mean(targ)) if targ else math.nan,
            miou=float(np.mean(every)) if every else math.nan,
        )


def segmentation_metrics(
    observations: list[tuple[str, int, np.ndarray | None, np.ndarray | None]],
) -> SegmentationMetrics:
    """Convenience wrapper: observations are (kind, label, pred, gt) per frame."""
    accumulator = SegAccumulator()
    for kind, label_id, pred_mask, gt_mask in observations:
        accumulator.add(kind, label_id, pred_mask, gt_mask)
    return accumulator.result()


# ---------------------------------------------------------------------------
# Report container and cross-validation aggregation

_METRIC_FIELDS = (
    "accuracy", "precision", "recall", "jaccard",
    "ap_i", "ap_v", "ap_t", "ap_iv", "ap_it", "ap_ivt",
    "iou_i", "iou_t", "miou",
)


@dataclass
class MetricReport:
    """All three task families for one evaluation run; None = not evaluated."""

    accuracy: float | None = None
    precision: float | None = None
    recall: float | None = None
    jaccard: float | None = None
    ap_i: float | None = None
    ap_v: float | None = None
    ap_t: float | None = None
    ap_iv: float | None = None
    ap_it: float | None = None
    ap_ivt: float | None = None
    iou_i: float | None = None
    iou_t: float | None = None
    miou: float | None = None

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, raw: dict) -> "MetricReport":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})

    @classmethod
    def combine(
        cls,
        phase: PhaseMetrics | None,
        ap: TripletAPSuite | None,
        seg: SegmentationMetrics | None,
    ) -> "MetricReport":
        report = cls()
        if phase is not None:
            report.accuracy = phase.accuracy
            report.precision = phase.precision
            report.recall = phase.recall
            report.jaccard = phase.jaccard
        if ap is not None:
            for name in ("ap_i", "ap_v", "ap_t", "ap_iv", "ap_it", "ap_ivt"):
                setattr(report, name, getattr(ap, name))
        if seg is not None:
            report.iou_i = seg.iou_i
            report.iou_t = seg.iou_t
            report.miou = seg.miou
        return report


def crossval_aggregate(
    reports: list[MetricReport], expected_folds: int = 5
) -> dict[str, tuple[float, float]]:
    """Per-metric (mean, population std) over fold reports.

    A fold count other than ``expected_folds`` raises a warning but still
    aggregates.  Metrics absent (None/NaN) in a fold are skipped for that
    metric.
    """
    if not reports:
        raise ValueError("no fold reports")
    if len(reports) != expected_folds:
        warnings.warn(
            f"expected {expected_folds} folds, got {len(reports)}",
            stacklevel=2,
        )
    aggregate: dict[str, tuple[float, float]] = {}
    for name in _METRIC_FIELDS:
        values = [
            getattr(r, name)
            for r in reports
            if getattr(r, name) is not None and not math.isnan(getattr(r, name))
        ]
        if values:
            data = np.asarray(values, dtype=np.float64)
            aggregate[name] = (float(data.mean()), float(data.std()))
    return aggregate


# ---------------------------------------------------------------------------
# Human-readable tables


def _cell(value: float | None) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "-"
    return f"{100.0 * value:.1f}"


def format_report(report: MetricReport, title: str = "evaluation") -> str:
    """Aligned three-section table (percent form) mirroring the paper layout."""
    lines = [f"== {title} =="]
    lines.append("phase      | Accuracy Precision Recall Jaccard")
    lines.append(
        "           | "
        + " ".join(
            _cell(getattr(report, n)).rjust(len(h))
            for n, h in zip(
                ("accuracy", "precision", "recall", "jaccard"),
                ("Accuracy", "Precision", "Recall", "Jaccard"),
            )
        )
    )
    lines.append("triplet    | AP_I AP_V AP_T AP_IV AP_IT AP_IVT")
    lines.append(
        "           | "
        + " ".join(
            _cell(getattr(report, n)).rjust(len(h))
            for n, h in zip(
                ("ap_i", "ap_v", "ap_t", "ap_iv", "ap_it", "ap_ivt"),
                ("AP_I", "AP_V", "AP_T", "AP_IV", "AP_IT", "AP_IVT"),
            )
        )
    )
    lines.append("grounding  | IoU_I IoU_T mIoU")
    lines.append(
        "           | "
        + " ".join(
            _cell(getattr(report, n)).rjust(len(h))
            for n, h in zip(("iou_i", "iou_t", "miou"), ("IoU_I", "IoU_T", "mIoU"))
        )
    )
    return "\n".join(lines)


def format_aggregate(aggregate: dict[str, tuple[float, float]]) -> str:
    lines = ["== cross-validation (mean ± std, %) =="]
    for name in _METRIC_FIELDS:
        if name in aggregate:
            mean, std = aggregate[name]
            lines.append(f"{name:10s} {100 * mean:6.1f} ± {100 * std:4.1f}")
    return "\n".join(lines)
