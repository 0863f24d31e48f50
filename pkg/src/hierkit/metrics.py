"""Panoptic Quality evaluation at word, line and paragraph level.

A prediction and a ground truth form a true positive when their IoU exceeds
0.5.  Submissions may contain overlapping masks, so a prediction can clear
the threshold against several ground truths; those cases are resolved by a
maximum-IoU assignment restricted to the qualifying pairs.  Without overlaps
the qualifying pairs are already unique and the assignment is trivial.

Tallies from all images are pooled before PQ is computed (micro averaging):

    PQ = sum(IoU over TP) / (TP + FP / 2 + FN / 2) = F1 * tightness
"""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from hierkit import annotation, geometry
from hierkit.entities import Entity, ImagePrediction
from hierkit.matching import linear_assignment

IOU_THRESHOLD = 0.5


@dataclasses.dataclass(frozen=True)
class EvalPair:
    pred_index: int
    gt_index: int
    iou: float


@dataclasses.dataclass
class Tally:
    """Additive per-image (or pooled) counts."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0
    pairs: list[EvalPair] = dataclasses.field(default_factory=list)

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                     self.iou_sum + other.iou_sum)


@dataclasses.dataclass(frozen=True)
class EvalReport:
    level: str
    tp: int
    fp: int
    fn: int
    iou_sum: float
    precision: float
    recall: float
    f1: float
    tightness: float
    pq: float

    @classmethod
    def from_tally(cls, level: str, t: Tally) -> "EvalReport":
        tp, fp, fn, s = t.tp, t.fp, t.fn, float(t.iou_sum)
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        tightness = s / tp if tp else 0.0
        pq = s / (tp + 0.5 * fp + 0.5 * fn) if tp else 0.0
        return cls(level, tp, fp, fn, s, precision, recall, f1, tightness, pq)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between stacks of binary masks of shape (n, H*W) and (m, H*W)."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    af = a.astype(np.float64)
    bf = b.astype(np.float64)
    inter = af @ bf.T
    union = af.sum(1)[:, None] + bf.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _stack(masks, shape) -> np.ndarray:
    if not masks:
        return np.zeros((0, shape[0] * shape[1]), dtype=bool)
    arr = np.stack([np.asarray(m, dtype=bool) for m in masks])
    if arr.shape[1:] != shape:
        raise ValueError(f"mask dimension mismatch: {arr.shape[1:]} vs {shape}")
    return arr.reshape(len(masks), -1)


def evaluate_image(pred_masks: Sequence, gt: Sequence[tuple[np.ndarray, bool]],
                   shape: tuple[int, int] | None = None) -> Tally:
    """Match one image's predictions against its ground truth.

    Args:
      pred_masks: Binary masks, or ``(mask, score)`` tuples; scores are ignored.
      gt: ``(mask, dont_care)`` tuples.  Don't-care entries are not matched;
        a leftover prediction whose IoU with one exceeds 0.5 is discarded
        instead of being counted as a false positive.
      shape: ``(height, width)``; needed only when both lists are empty.

    Returns:
      A :class:`Tally` with the TP pairs recorded in ``pairs``.
    """
    preds = [p[0] if isinstance(p, tuple) else p for p in pred_masks]
    if shape is None:
        first = preds[0] if preds else (gt[0][0] if gt else None)
        if first is None:
            return Tally()
        shape = np.shape(first)
    shape = tuple(shape)

    care = [m for m, dc in gt if not dc]
    dont_care = [m for m, dc in gt if dc]
    care_idx = [k for k, (_, dc) in enumerate(gt) if not dc]
    p = _stack(preds, shape)
    g = _stack(care, shape)

    ious = _iou_matrix(p, g)
    eligible = ious > IOU_THRESHOLD
    matched_p: set[int] = set()
    pairs: list[EvalPair] = []
    if eligible.any():
        n_p, n_g = eligible.shape
        graph = csr_matrix(np.block([
            [np.zeros((n_p, n_p), dtype=bool), eligible],
            [eligible.T, np.zeros((n_g, n_g), dtype=bool)],
        ]))
        _, labels = connected_components(graph, directed=False)
        for comp in np.unique(labels):
            rows = np.flatnonzero(labels[:n_p] == comp)
            cols = np.flatnonzero(labels[n_p:] == comp)
            if rows.size == 0 or cols.size == 0:
                continue
            sub = np.where(eligible[np.ix_(rows, cols)], ious[np.ix_(rows, cols)], 0.0)
            k = max(rows.size, cols.size)
            square = np.zeros((k, k))
            square[:rows.size, :cols.size] = sub
            sigma = linear_assignment(square, maximize=True)
            for r, c in enumerate(sigma[:rows.size]):
                if c < cols.size and square[r, c] > IOU_THRESHOLD:
                    pi, gi = int(rows[r]), int(cols[c])
                    pairs.append(EvalPair(pi, care_idx[gi], float(ious[pi, gi])))
                    matched_p.add(pi)
    pairs.sort(key=lambda e: (e.pred_index, e.gt_index))

    unmatched = [k for k in range(len(preds)) if k not in matched_p]
    fp = len(unmatched)
    if unmatched and dont_care:
        dc_iou = _iou_matrix(p[unmatched], _stack(dont_care, shape))
        fp -= int(np.count_nonzero((dc_iou > IOU_THRESHOLD).any(axis=1)))
    tp = len(pairs)
    return Tally(tp, fp, len(care) - tp, float(sum(e.iou for e in pairs)), pairs)


# ---------------------------------------------------------------------------
# Dataset-level evaluation
# ---------------------------------------------------------------------------

def group_by_cluster(entities: Sequence[Entity], shape: tuple[int, int]) -> list[np.ndarray]:
    """Union entity masks sharing a cluster id, ordered by cluster id."""
    groups: dict[int, list[np.ndarray]] = {}
    for e in entities:
        if e.cluster is None:
            raise ValueError(f"entity {e.id} has no cluster id; required at paragraph level")
        groups.setdefault(e.cluster, []).append(e.mask)
    return [geometry.union(groups[c], shape[1], shape[0]) for c in sorted(groups)]


def evaluate_annotation(pred: ImagePrediction | None, ann: annotation.HierAnnotation,
                        level: str, include_illegible: bool = False) -> Tally:
    shape = (ann.image_height, ann.image_width)
    gt = [(d.mask, (not d.legible) and not include_illegible)
          for d in annotation.derive_masks(ann, level)]
    entities = pred.entities if pred is not None else ()
    if level == "paragraph":
        masks = group_by_cluster(entities, shape)
    else:
        masks = [e.mask for e in entities]
    return evaluate_image(masks, gt, shape)


def evaluate_dataset(preds: Sequence[ImagePrediction], gts: annotation.GroundTruthSet,
                     level: str, include_illegible: bool = False, map_fn=map) -> EvalReport:
    """Pool per-image tallies over the whole ground-truth set.

    Images with no prediction entry contribute all their ground truths as
    false negatives.  ``map_fn`` may be swapped for a parallel map; the
    result does not depend on evaluation order.
    """
    if level not in annotation.LEVELS:
        raise ValueError(f"unknown level {level!r}")
    by_id = gts.by_id()
    unknown = sorted({p.image_id for p in preds} - by_id.keys())
    if unknown:
        raise KeyError(f"predictions reference unknown image_ids: {unknown}")
    pred_by_id = {}
    for p in preds:
        if p.image_id in pred_by_id:
            raise ValueError(f"duplicate predictions for image_id {p.image_id!r}")
        pred_by_id[p.image_id] = p

    def one(ann):
        return evaluate_annotation(pred_by_id.get(ann.image_id), ann, level, include_illegible)

    total = Tally()
    for t in map_fn(one, gts.annotations):
        total = total + t
    return EvalReport.from_tally(level, total)


def ground_truth_as_predictions(gts: annotation.GroundTruthSet, level: str) -> list[ImagePrediction]:
    """Turn ground truth into predictions, e.g. to self-check the evaluator.

    Paragraph level emits the line entities with their paragraph as cluster,
    which the evaluator merges back into paragraph masks.
    """
    entity_level = "line" if level == "paragraph" else level
    out = []
    for ann in gts.annotations:
        ents = tuple(Entity(d.index, d.mask, 1.0, d.cluster)
                     for d in annotation.derive_masks(ann, entity_level))
        out.append(ImagePrediction(ann.image_id, ents))
    return out
