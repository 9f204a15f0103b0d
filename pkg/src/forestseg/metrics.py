"""Instance detection metrics, the coverage metric, and semantic mIoU.

Instance IoU is computed on point sets with id >= 1 only; ground and
unassigned points never count toward either side. Detection uses greedy
one-to-one matching over candidate pairs sorted by IoU descending, with
pairs below the threshold never matching. Multi-plot results aggregate by
micro-averaging the TP/FP/FN counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from .errors import EmptyInput, NoGroundTruth, ShapeMismatch

SEMANTIC_CLASS_SET = (0, 1, 2)


@dataclass(frozen=True)
class MatchResult:
    """One-to-one matching between predicted and ground-truth instances."""

    pairs: tuple[tuple[int, int, float], ...]
    unmatched_preds: tuple[int, ...]
    unmatched_gts: tuple[int, ...]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_preds)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gts)


def _instance_sets(labels: npt.NDArray[np.int64]):
    ids, counts = np.unique(labels[labels >= 1], return_counts=True)
    return ids, dict(zip(ids.tolist(), counts.tolist()))


def _pair_ious(pred: npt.NDArray[np.int64], gt: npt.NDArray[np.int64]) -> dict[tuple[int, int], float]:
    """IoU for every (pred_id, gt_id) pair with non-empty intersection."""
    _, pred_sizes = _instance_sets(pred)
    _, gt_sizes = _instance_sets(gt)
    both = (pred >= 1) & (gt >= 1)
    if not both.any():
        return {}
    pairs = np.stack([pred[both], gt[both]], axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    ious = {}
    for (p, g), inter in zip(uniq.tolist(), counts.tolist()):
        ious[(p, g)] = inter / (pred_sizes[p] + gt_sizes[g] - inter)
    return ious


def _check_universe(pred, gt):
    pred = np.asarray(pred, dtype=np.int64).reshape(-1)
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.shape != gt.shape:
        raise ShapeMismatch(f"pred has {len(pred)} points but gt has {len(gt)}")
    return pred, gt


def match_instances(pred, gt, iou_threshold: float = 0.5) -> MatchResult:
    """Greedily match predictions to ground truth by descending IoU.

    Ties break toward the lower gt id, then the lower pred id. A pair below
    the threshold never matches, so its prediction counts as a false
    positive and its ground-truth tree as a false negative.
    """
    pred, gt = _check_universe(pred, gt)
    pred_ids, _ = _instance_sets(pred)
    gt_ids, _ = _instance_sets(gt)
    ious = _pair_ious(pred, gt)
    candidates = sorted(
        ((p, g, iou) for (p, g), iou in ious.items() if iou >= iou_threshold),
        key=lambda t: (-t[2], t[1], t[0]),
    )
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    pairs = []
    for p, g, iou in candidates:
        if p in used_pred or g in used_gt:
            continue
        used_pred.add(p)
        used_gt.add(g)
        pairs.append((p, g, iou))
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_preds=tuple(int(p) for p in pred_ids if p not in used_pred),
        unmatched_gts=tuple(int(g) for g in gt_ids if g not in used_gt),
    )


def detection_scores(match: MatchResult) -> tuple[float, float, float]:
    """Precision, recall, and F1 from a match result; 0 on empty denominators."""
    tp, fp, fn = match.tp, match.fp, match.fn
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def coverage(pred, gt) -> float:
    """Mean over ground-truth trees of the best IoU any prediction achieves.

    No threshold and not one-to-one: a single prediction may be the best
    match of several trees.
    """
    pred, gt = _check_universe(pred, gt)
    gt_ids, _ = _instance_sets(gt)
    if len(gt_ids) == 0:
        raise NoGroundTruth("coverage requires at least one ground-truth instance")
    ious = _pair_ious(pred, gt)
    best = {int(g): 0.0 for g in gt_ids}
    for (_, g), iou in ious.items():
        if iou > best[g]:
            best[g] = iou
    return float(np.mean([best[int(g)] for g in gt_ids]))


def semantic_miou(pred_classes, gt_classes, class_set=SEMANTIC_CLASS_SET) -> tuple[dict[int, float], float]:
    """Per-class IoU and their mean over classes present in gt or pred.

    Classes absent from both sides are excluded rather than scored 0/0.
    """
    pred, gt = _check_universe(pred_classes, gt_classes)
    if len(pred) == 0:
        raise EmptyInput("semantic mIoU requires at least one point")
    per_class = {}
    for cls in class_set:
        p = pred == cls
        g = gt == cls
        union = int(np.sum(p | g))
        if union == 0:
            continue
        per_class[int(cls)] = float(np.sum(p & g) / union)
    if not per_class:
        raise EmptyInput(f"none of the classes {tuple(class_set)} are present")
    return per_class, float(np.mean(list(per_class.values())))


@dataclass(frozen=True)
class EvalReport:
    """Detection scores, coverage, and semantic IoU for one evaluation."""

    precision: float
    recall: float
    f1: float
    coverage: float
    tp: int
    fp: int
    fn: int
    per_class_iou: dict[int, float] = field(default_factory=dict)
    miou: float | None = None

    def to_dict(self) -> dict:
        """JSON-ready dict, including the forestry aliases."""
        out = {
            "instance": {
                "precision": self.precision,
                "recall": self.recall,
                "f1": self.f1,
                "coverage": self.coverage,
                "tp": self.tp,
                "fp": self.fp,
                "fn": self.fn,
                "completeness": self.recall,
                "omission": 1.0 - self.recall,
                "commission": 1.0 - self.precision,
            },
            "aggregation": "micro",
        }
        if self.miou is not None:
            from .core import SEMANTIC_NAMES

            out["semantic"] = {
                "per_class_iou": {SEMANTIC_NAMES.get(c, str(c)): v for c, v in sorted(self.per_class_iou.items())},
                "miou": self.miou,
            }
        return out


def evaluate_labels(
    pred_instance,
    gt_instance,
    pred_semantic=None,
    gt_semantic=None,
    iou_threshold: float = 0.5,
) -> EvalReport:
    """Full evaluation of a predicted labeling against ground truth."""
    match = match_instances(pred_instance, gt_instance, iou_threshold)
    precision, recall, f1 = detection_scores(match)
    cov = coverage(pred_instance, gt_instance)
    per_class: dict[int, float] = {}
    miou = None
    if pred_semantic is not None and gt_semantic is not None:
        per_class, miou = semantic_miou(pred_semantic, gt_semantic)
    return EvalReport(
        precision=precision,
        recall=recall,
        f1=f1,
        coverage=cov,
        tp=match.tp,
        fp=match.fp,
        fn=match.fn,
        per_class_iou=per_class,
        miou=miou,
    )
