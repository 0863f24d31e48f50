"""Turn raw detector outputs into text entities and paragraph clusters.

Inputs per image are ``N`` soft masks that sum to one at every pixel, ``N``
textness probabilities and an ``N x N`` affinity matrix (given directly or
computed from layout embeddings).  Decoding assigns every pixel to its
argmax query, drops low-confidence pixels, filters small or non-text
entities, and links survivors whose affinity exceeds a threshold into
clusters with union-find.
"""

from __future__ import annotations

import dataclasses
import logging
from typing import Sequence

import numpy as np
from scipy.special import expit, softmax

from hierkit import annotation
from hierkit.entities import Entity, ImagePrediction

logger = logging.getLogger(__name__)

SUM_TOL = 1e-5
SYMMETRY_TOL = 1e-5


@dataclasses.dataclass(frozen=True)
class DecodeParams:
    t_m: float = 0.4
    t_c: float = 0.5
    t_a: float = 0.5
    min_pixels: int = 32

    def __post_init__(self):
        for name in ("t_m", "t_c", "t_a"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.min_pixels < 0:
            raise ValueError("min_pixels must be non-negative")


@dataclasses.dataclass(frozen=True, eq=False)
class DetectionTensors:
    """Raw outputs for one image.

    Attributes:
      masks: ``(N, H', W')`` soft masks, normalized over ``N`` at each pixel.
      textness: ``(N,)`` text probabilities.
      affinity: ``(N, N)`` pairwise same-paragraph probabilities, or None
        when ``layout_embeddings`` is given instead.
      layout_embeddings: ``(N, C)`` unit-norm rows, turned into an affinity
        matrix with temperature ``tau``.
    """

    masks: np.ndarray
    textness: np.ndarray
    affinity: np.ndarray | None = None
    layout_embeddings: np.ndarray | None = None
    tau: float = 1.0
    image_id: str = ""

    @property
    def n(self) -> int:
        return self.masks.shape[0]

    def affinity_matrix(self) -> np.ndarray:
        if self.affinity is not None:
            return np.asarray(self.affinity, dtype=float)
        if self.layout_embeddings is None:
            raise ValueError("tensors carry neither affinity nor layout embeddings")
        return affinity_head(self.layout_embeddings, self.tau)

    def validate(self) -> None:
        m = np.asarray(self.masks)
        if m.ndim != 3:
            raise ValueError(f"masks must be (N, H, W), got shape {m.shape}")
        n = m.shape[0]
        if n == 0:
            return
        if not np.all(np.isfinite(m)):
            raise ValueError("masks contain non-finite values")
        err = np.abs(m.sum(axis=0, dtype=np.float64) - 1.0).max()
        if err > SUM_TOL:
            raise ValueError(f"masks do not sum to 1 over queries (max deviation {err:.3g})")
        y = np.asarray(self.textness)
        if y.shape != (n,):
            raise ValueError(f"textness shape {y.shape} does not match N={n}")
        if y.min() < 0.0 or y.max() > 1.0:
            raise ValueError("textness entries must lie in [0, 1]")
        if self.affinity is not None:
            a = np.asarray(self.affinity)
            if a.shape != (n, n):
                raise ValueError(f"affinity shape {a.shape} does not match N={n}")
            if a.min() < 0.0 or a.max() > 1.0:
                raise ValueError("affinity entries must lie in [0, 1]")
            asym = np.abs(a - a.T).max()
            if asym > SYMMETRY_TOL:
                logger.warning("affinity asymmetric by %.3g; symmetrizing with element-wise max", asym)
        elif self.layout_embeddings is not None:
            h = np.asarray(self.layout_embeddings)
            if h.ndim != 2 or h.shape[0] != n:
                raise ValueError(f"embeddings shape {h.shape} does not match N={n}")


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

def mask_head(f: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Softmax over queries of the inner product of query and pixel features.

    ``f`` is ``(N, D)``, ``g`` is ``(D, H, W)``; returns ``(N, H, W)``.
    """
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if f.ndim != 2 or g.ndim != 3 or f.shape[1] != g.shape[0]:
        raise ValueError(f"incompatible shapes {f.shape} and {g.shape}")
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(g))):
        raise ValueError("non-finite input")
    logits = np.tensordot(f, g, axes=1)
    return softmax(logits, axis=0)


def affinity_head(h: np.ndarray, tau: float) -> np.ndarray:
    """``sigmoid(h h^T / tau)`` for layout embeddings ``h`` of shape ``(N, C)``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    h = np.asarray(h, dtype=float)
    if h.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {h.shape}")
    logits = h @ h.T / tau
    return expit(logits)


def normalize_rows(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    norm = np.linalg.norm(h, axis=1, keepdims=True)
    return h / np.where(norm > 0, norm, 1.0)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode_masks(t: DetectionTensors, p: DecodeParams = DecodeParams()) -> ImagePrediction:
    """Per-pixel argmax assignment, confidence cut and entity filtering.

    Argmax ties go to the lowest query index.  Entities failing the area or
    textness filter are removed together with their pixels; those pixels are
    not handed to the runner-up query.  Entities that end up with no pixels
    are always dropped.  Surviving entities keep their query index as id.
    """
    t.validate()
    m = np.asarray(t.masks)
    if t.n == 0:
        return ImagePrediction(t.image_id)
    winner = np.argmax(m, axis=0)
    confident = np.take_along_axis(m, winner[None], axis=0)[0] > p.t_m
    labels = np.where(confident, winner, -1)
    areas = np.bincount(labels[labels >= 0].ravel(), minlength=t.n)
    textness = np.asarray(t.textness, dtype=float)
    entities = []
    for i in range(t.n):
        if areas[i] == 0 or areas[i] < p.min_pixels or textness[i] < p.t_c:
            continue
        entities.append(Entity(i, labels == i, float(textness[i]), None))
    return ImagePrediction(t.image_id, tuple(entities))


class _DisjointSet:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Keep the smaller id as root so labels equal the component minimum.
            lo, hi = min(ra, rb), max(ra, rb)
            self.parent[hi] = lo


def cluster_entities(pred: ImagePrediction, affinity: np.ndarray, t_a: float = 0.5) -> ImagePrediction:
    """Link entities with affinity above ``t_a`` and label each component by its minimum id.

    Only surviving entities take part, so two entities connected solely via
    a filtered-out query stay apart.  Asymmetric inputs are symmetrized with
    an element-wise max.
    """
    a = np.asarray(affinity, dtype=float)
    ids = [e.id for e in pred.entities]
    if ids and (min(ids) < 0 or max(ids) >= a.shape[0] or a.shape[0] != a.shape[1]):
        raise IndexError(f"entity ids {ids} out of range for affinity of shape {a.shape}")
    a = np.maximum(a, a.T)
    ds = _DisjointSet(ids)
    idx = np.array(ids, dtype=np.int64)
    if idx.size:
        linked = a[np.ix_(idx, idx)] > t_a
        for r, c in zip(*np.nonzero(np.triu(linked, k=1))):
            ds.union(ids[r], ids[c])
    return pred.with_entities(dataclasses.replace(e, cluster=ds.find(e.id)) for e in pred.entities)


def decode(t: DetectionTensors, p: DecodeParams = DecodeParams()) -> ImagePrediction:
    pred = decode_masks(t, p)
    if not pred.entities:
        return pred
    return cluster_entities(pred, t.affinity_matrix(), p.t_a)


def upsample(pred: ImagePrediction, factor: int = 4, width: int | None = None,
             height: int | None = None) -> ImagePrediction:
    """Nearest-neighbour upsampling of entity masks, then crop/pad to ``width x height``."""
    out = []
    for e in pred.entities:
        m = np.repeat(np.repeat(e.mask, factor, axis=0), factor, axis=1)
        if width is not None and height is not None:
            full = np.zeros((height, width), dtype=bool)
            h, w = min(height, m.shape[0]), min(width, m.shape[1])
            full[:h, :w] = m[:h, :w]
            m = full
        out.append(dataclasses.replace(e, mask=m))
    return pred.with_entities(out)


# ---------------------------------------------------------------------------
# Synthesis from ground truth
# ---------------------------------------------------------------------------

def tensors_from_annotation(ann: annotation.HierAnnotation, level: str, n: int | None = None,
                            width: int | None = None, height: int | None = None
                            ) -> tuple[DetectionTensors, list[annotation.DerivedMask]]:
    """Build ideal detector outputs for an annotation.

    Each entity gets a one-hot mask in its own query with textness 1, pixels
    not covered by any entity go to a background query with textness 0, and
    the affinity matrix is the same-paragraph indicator.  Where entities
    overlap, the later one wins the pixel.

    Returns:
      The tensors and the derived entity masks, in query order.
    """
    derived = annotation.derive_masks(ann, level, width, height)
    h, w = (derived[0].mask.shape if derived else
            (ann.image_height if height is None else height, ann.image_width if width is None else width))
    k = len(derived)
    n = k + 1 if n is None else n
    if n < k + 1:
        raise ValueError(f"need at least {k + 1} queries (entities + background), got {n}")
    owner = np.full((h, w), k, dtype=np.int64)
    for q, d in enumerate(derived):
        owner[d.mask] = q
    masks = (np.arange(n)[:, None, None] == owner[None]).astype(np.float64)
    textness = np.zeros(n)
    textness[:k] = 1.0
    clusters = np.full(n, -1, dtype=np.int64)
    clusters[:k] = [d.cluster for d in derived]
    affinity = (clusters[:, None] == clusters[None, :]).astype(np.float64)
    return DetectionTensors(masks, textness, affinity, image_id=ann.image_id), derived


def decode_all(tensors: Sequence[DetectionTensors], p: DecodeParams = DecodeParams(),
               map_fn=map) -> list[ImagePrediction]:
    return sorted(map_fn(lambda t: decode(t, p), tensors), key=lambda r: r.image_id)
