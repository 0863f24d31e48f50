"""Polygons, binary masks and the mask algebra shared by every other module.

Binary masks are plain ``numpy`` boolean arrays of shape ``(height, width)``.
Soft masks are float arrays with entries in ``[0, 1]``.  Run-length encoded
masks use :class:`RleMask`, scanned in row-major order and always starting
with a background run.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Polygon",
    "RleMask",
    "rasterize",
    "iou",
    "dice",
    "union",
    "rle_encode",
    "rle_decode",
    "empty_mask",
]


@dataclasses.dataclass(frozen=True)
class Polygon:
    """Closed polygon in pixel coordinates; the last vertex connects to the first."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        if len(verts) < 3:
            raise ValueError(f"polygon needs at least 3 vertices, got {len(verts)}")
        arr = np.asarray(verts)
        if not np.all(np.isfinite(arr)):
            raise ValueError("polygon coordinates must be finite")
        if np.any(arr < 0):
            raise ValueError("polygon coordinates must be non-negative")
        object.__setattr__(self, "vertices", verts)

    @classmethod
    def from_array(cls, points) -> "Polygon":
        return cls(tuple(map(tuple, np.asarray(points, dtype=float).reshape(-1, 2))))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.vertices, dtype=float)

    def scaled(self, sx: float, sy: float) -> "Polygon":
        arr = self.as_array() * np.array([sx, sy])
        return Polygon.from_array(arr)


@dataclasses.dataclass(frozen=True)
class RleMask:
    """Row-major run-length encoding; counts alternate 0-runs and 1-runs."""

    width: int
    height: int
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if self.width < 0 or self.height < 0:
            raise ValueError("RLE dimensions must be non-negative")
        if any(c < 0 for c in self.counts):
            raise ValueError("RLE counts must be non-negative")
        if any(c == 0 for c in self.counts[1:]):
            raise ValueError("only the leading RLE run may have zero length")

    def to_json(self) -> dict:
        return {"width": self.width, "height": self.height, "counts": list(self.counts)}

    @classmethod
    def from_json(cls, obj: dict) -> "RleMask":
        try:
            return cls(int(obj["width"]), int(obj["height"]), tuple(obj["counts"]))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed RLE object: {exc}") from None


def empty_mask(width: int, height: int) -> np.ndarray:
    return np.zeros((height, width), dtype=bool)


def rasterize(polygon: Polygon | Sequence, width: int, height: int) -> np.ndarray:
    """Rasterize a polygon with the even-odd rule by sampling pixel centers.

    Pixel ``(x, y)`` is set iff ``(x + 0.5, y + 0.5)`` is inside the polygon.
    A horizontal ray is cast towards +x from each center; a center on a
    boundary is resolved by the half-open crossing rule, so the output is
    deterministic for self-intersecting input as well.

    Args:
      polygon: A :class:`Polygon` or anything convertible to one.
      width: Grid width in pixels.
      height: Grid height in pixels.

    Returns:
      Boolean array of shape ``(height, width)``.
    """
    if width < 1 or height < 1:
        raise ValueError(f"grid must be at least 1x1, got {width}x{height}")
    if not isinstance(polygon, Polygon):
        polygon = Polygon.from_array(polygon)
    pts = polygon.as_array()
    out = np.zeros((height, width), dtype=bool)

    # Only rows/cols whose centers can fall inside the bounding box.
    x_lo = max(int(np.floor(pts[:, 0].min() - 0.5)), 0)
    x_hi = min(int(np.ceil(pts[:, 0].max() - 0.5)) + 1, width)
    y_lo = max(int(np.floor(pts[:, 1].min() - 0.5)), 0)
    y_hi = min(int(np.ceil(pts[:, 1].max() - 0.5)) + 1, height)
    if x_lo >= x_hi or y_lo >= y_hi:
        return out

    x0, y0 = pts[:, 0], pts[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    cx = np.arange(x_lo, x_hi) + 0.5

    for row in range(y_lo, y_hi):
        cy = row + 0.5
        crosses = (y0 > cy) != (y1 > cy)
        if not crosses.any():
            continue
        xa, ya, xb, yb = x0[crosses], y0[crosses], x1[crosses], y1[crosses]
        xs = (xb - xa) * (cy - ya) / (yb - ya) + xa
        xs.sort()
        right_of = xs.size - np.searchsorted(xs, cx, side="right")
        out[row, x_lo:x_hi] = (right_of & 1).astype(bool)
    return out


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask dimension mismatch: {a.shape} vs {b.shape}")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; 0.0 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _check_same_shape(a, b)
    union_count = np.count_nonzero(a | b)
    if union_count == 0:
        return 0.0
    return np.count_nonzero(a & b) / union_count


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Soft Dice coefficient ``2 sum(a*b) / (sum(a) + sum(b))``.

    Works for binary and soft masks alike.  Two all-zero inputs give 0.0, so
    an empty prediction never scores as a perfect match against an empty
    (padding) target.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    _check_same_shape(a, b)
    for m in (a, b):
        if m.size and (m.min() < 0.0 or m.max() > 1.0):
            raise ValueError("soft mask entries must lie in [0, 1]")
    denom = a.sum() + b.sum()
    if denom == 0:
        return 0.0
    return float(2.0 * np.sum(a * b) / denom)


def union(masks: Iterable[np.ndarray], width: int | None = None, height: int | None = None) -> np.ndarray:
    """Bitwise OR of masks; an empty input yields an all-zero ``height x width`` mask."""
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        if width is None or height is None:
            raise ValueError("width and height are required for an empty union")
        return empty_mask(width, height)
    shape = masks[0].shape
    if width is not None and height is not None and shape != (height, width):
        raise ValueError(f"mask dimension mismatch: {shape} vs {(height, width)}")
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        _check_same_shape(out, m)
        out |= m
    return out


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise ValueError("expected a 2-D mask")
    height, width = mask.shape
    flat = mask.ravel()
    if flat.size == 0:
        return RleMask(width, height, (0,))
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], change, [flat.size]))
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts.insert(0, 0)
    return RleMask(width, height, tuple(counts))


def rle_decode(rle: RleMask) -> np.ndarray:
    total = rle.width * rle.height
    if sum(rle.counts) != total:
        raise ValueError(
            f"RLE counts sum to {sum(rle.counts)}, expected {rle.width}x{rle.height}={total}"
        )
    values = np.arange(len(rle.counts)) % 2 == 1
    flat = np.repeat(values, rle.counts)
    return flat.reshape(rle.height, rle.width)
