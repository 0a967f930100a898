"""Instance-level evaluation: mean IoU, area RMSE, weighted coverage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import iou_masks, rasterize, signed_area


@dataclass
class InstanceScore:
    id: str
    iou: float
    area_pred: float
    area_gt: float


@dataclass
class EvalReport:
    mean_iou: float
    area_rmse: float
    weighted_coverage: float
    per_instance: list[InstanceScore] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        lines = [f"{'id':<16} {'IoU':>7} {'area_pred':>11} {'area_gt':>11}"]
        for s in self.per_instance:
            lines.append(f"{s.id:<16} {s.iou:7.4f} {s.area_pred:11.2f} {s.area_gt:11.2f}")
        lines.append("-" * 48)
        lines.append(f"{'mean IoU':<22}{self.mean_iou:.4f}")
        lines.append(f"{'area RMSE':<22}{self.area_rmse:.4f}")
        lines.append(f"{'weighted coverage':<22}{self.weighted_coverage:.4f}")
        return "\n".join(lines)


def greedy_match(iou_matrix: np.ndarray) -> list[tuple[int, int]]:
    """Pair ground truths (rows) with predictions (columns) by repeatedly
    taking the highest remaining IoU."""
    m = np.array(iou_matrix, dtype=np.float64)
    pairs = []
    while m.size and np.isfinite(m).any() and m.max() > 0:
        g, p = np.unravel_index(np.argmax(m), m.shape)
        pairs.append((int(g), int(p)))
        m[g, :] = -np.inf
        m[:, p] = -np.inf
    return pairs


def weighted_coverage(iou_matrix: np.ndarray, gt_areas: np.ndarray) -> float:
    """Ground-truth-area weighted IoU of the greedily matched prediction;
    unmatched ground truths score 0."""
    gt_areas = np.asarray(gt_areas, dtype=np.float64)
    total = gt_areas.sum()
    if total == 0:
        return 0.0
    best = np.zeros(len(gt_areas))
    for g, p in greedy_match(iou_matrix):
        best[g] = iou_matrix[g][p]
    return float((gt_areas * best).sum() / total)


def evaluate(preds, instances) -> EvalReport:
    """Score one predicted contour per instance.

    Each instance lives in its own patch, so predictions can only overlap
    the ground truth they were produced for; areas are converted to world
    units with the patch scale factor.
    """
    preds = list(preds)
    instances = list(instances)
    if len(preds) != len(instances):
        raise ValueError(f"{len(preds)} predictions for {len(instances)} instances")
    scores = []
    for pred, inst in zip(preds, instances):
        U, V = inst.U, inst.V
        i = iou_masks(rasterize(pred, U, V), inst.gt_mask())
        s2 = inst.scale_factor ** 2
        scores.append(InstanceScore(inst.id, i, abs(signed_area(pred)) / s2,
                                    abs(signed_area(inst.gt)) / s2))
    if not scores:
        return EvalReport(0.0, 0.0, 0.0, [])
    ious = np.array([s.iou for s in scores])
    err = np.array([s.area_pred - s.area_gt for s in scores])
    gt_areas = np.array([s.area_gt for s in scores])
    return EvalReport(
        mean_iou=float(ious.mean()),
        area_rmse=float(np.sqrt(np.mean(err ** 2))),
        weighted_coverage=weighted_coverage(np.diag(ious), gt_areas),
        per_instance=scores,
    )
