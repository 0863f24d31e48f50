"""Hierarchical word -> line -> paragraph ground truth.

Parsing is strict: every schema or invariant violation is collected with the
JSON path where it occurred, and the whole batch is raised at once so that
validators can report everything in one pass.
"""

from __future__ import annotations

import dataclasses
import gzip
import json
import logging
from typing import Iterator, Literal, Sequence

import jsonschema
import numpy as np

from hierkit import geometry
from hierkit.geometry import Polygon

logger = logging.getLogger(__name__)

Level = Literal["word", "line", "paragraph"]
LEVELS: tuple[str, ...] = ("word", "line", "paragraph")

# Vertices may stray this far outside the image before they are rejected.
CLAMP_TOLERANCE = 1.0


@dataclasses.dataclass(frozen=True)
class Word:
    polygon: Polygon
    text: str = ""
    legible: bool = True
    vertical: bool = False


@dataclasses.dataclass(frozen=True)
class Line:
    polygon: Polygon
    words: tuple[Word, ...] = ()
    text: str = ""
    legible: bool = True
    vertical: bool = False
    handwritten: bool = False


@dataclasses.dataclass(frozen=True)
class Paragraph:
    polygon: Polygon
    lines: tuple[Line, ...] = ()
    legible: bool = True


@dataclasses.dataclass(frozen=True)
class HierAnnotation:
    image_id: str
    image_width: int
    image_height: int
    paragraphs: tuple[Paragraph, ...] = ()

    def lines(self) -> Iterator[tuple[int, Line]]:
        """Yield ``(paragraph_index, line)`` in reading order."""
        for p_idx, para in enumerate(self.paragraphs):
            for line in para.lines:
                yield p_idx, line

    def words(self) -> Iterator[tuple[int, Word]]:
        for p_idx, line in self.lines():
            for word in line.words:
                yield p_idx, word


@dataclasses.dataclass(frozen=True)
class GroundTruthSet:
    annotations: tuple[HierAnnotation, ...] = ()

    def __post_init__(self):
        ids = [a.image_id for a in self.annotations]
        if len(set(ids)) != len(ids):
            raise ValueError("image_ids must be pairwise distinct")

    def by_id(self) -> dict[str, HierAnnotation]:
        return {a.image_id: a for a in self.annotations}


# ---------------------------------------------------------------------------
# Parsing and validation
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class Issue:
    path: str
    message: str

    def __str__(self):
        return f"{self.path}: {self.message}"


class GroundTruthError(ValueError):
    """Base class for ground-truth ingestion failures; ``issues`` lists every problem."""

    def __init__(self, issues: Sequence[Issue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues[:5])
                         + (f" (+{len(self.issues) - 5} more)" if len(self.issues) > 5 else ""))


class MalformedJSONError(GroundTruthError):
    pass


class SchemaError(GroundTruthError):
    pass


class InvariantError(GroundTruthError):
    pass


_VERTICES = {
    "type": "array",
    "minItems": 3,
    "items": {
        "type": "array",
        "minItems": 2,
        "maxItems": 2,
        "items": {"type": "number"},
    },
}

_WORD = {
    "type": "object",
    "required": ["vertices", "text", "legible", "vertical"],
    "properties": {
        "vertices": _VERTICES,
        "text": {"type": "string"},
        "legible": {"type": "boolean"},
        "vertical": {"type": "boolean"},
    },
}

_LINE = {
    "type": "object",
    "required": ["vertices", "text", "legible", "vertical", "handwritten", "words"],
    "properties": {
        "vertices": _VERTICES,
        "text": {"type": "string"},
        "legible": {"type": "boolean"},
        "vertical": {"type": "boolean"},
        "handwritten": {"type": "boolean"},
        "words": {"type": "array", "items": _WORD},
    },
}

_PARAGRAPH = {
    "type": "object",
    "required": ["vertices", "legible", "lines"],
    "properties": {
        "vertices": _VERTICES,
        "legible": {"type": "boolean"},
        "lines": {"type": "array", "items": _LINE},
    },
}

GROUND_TRUTH_SCHEMA = {
    "type": "object",
    "required": ["annotations"],
    "properties": {
        "annotations": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["image_id", "image_width", "image_height", "paragraphs"],
                "properties": {
                    "image_id": {"type": "string"},
                    "image_width": {"type": "integer", "minimum": 1},
                    "image_height": {"type": "integer", "minimum": 1},
                    "paragraphs": {"type": "array", "items": _PARAGRAPH},
                },
            },
        }
    },
}


def _json_path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _polygon(raw, width, height, path, issues) -> Polygon | None:
    arr = np.asarray(raw, dtype=float)
    if not np.all(np.isfinite(arr)):
        issues.append(Issue(path, "non-finite coordinate"))
        return None
    lo = -CLAMP_TOLERANCE
    bad = ((arr[:, 0] < lo) | (arr[:, 0] > width + CLAMP_TOLERANCE)
           | (arr[:, 1] < lo) | (arr[:, 1] > height + CLAMP_TOLERANCE))
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        issues.append(Issue(f"{path}[{k}]",
                            f"vertex {arr[k].tolist()} outside {width}x{height} image"))
        return None
    arr[:, 0] = np.clip(arr[:, 0], 0, width)
    arr[:, 1] = np.clip(arr[:, 1], 0, height)
    return Polygon.from_array(arr)


def _build(doc: dict) -> tuple[GroundTruthSet, list[Issue]]:
    issues: list[Issue] = []
    annotations = []
    seen: dict[str, int] = {}
    for a_idx, raw_ann in enumerate(doc["annotations"]):
        a_path = f"$.annotations[{a_idx}]"
        image_id = raw_ann["image_id"]
        if image_id in seen:
            issues.append(Issue(f"{a_path}.image_id",
                                f"duplicate image_id {image_id!r} (first at index {seen[image_id]})"))
        seen.setdefault(image_id, a_idx)
        w, h = raw_ann["image_width"], raw_ann["image_height"]
        paragraphs = []
        for p_idx, raw_para in enumerate(raw_ann["paragraphs"]):
            p_path = f"{a_path}.paragraphs[{p_idx}]"
            lines = []
            for l_idx, raw_line in enumerate(raw_para["lines"]):
                l_path = f"{p_path}.lines[{l_idx}]"
                words = []
                for w_idx, raw_word in enumerate(raw_line["words"]):
                    w_path = f"{l_path}.words[{w_idx}]"
                    poly = _polygon(raw_word["vertices"], w, h, f"{w_path}.vertices", issues)
                    if raw_word["legible"] and not raw_word["text"]:
                        issues.append(Issue(f"{w_path}.text", "legible word has empty transcription"))
                    if poly is not None:
                        words.append(Word(poly, raw_word["text"], raw_word["legible"], raw_word["vertical"]))
                if not raw_line["words"] and raw_line["legible"]:
                    issues.append(Issue(f"{l_path}.words", "legible line has no words"))
                poly = _polygon(raw_line["vertices"], w, h, f"{l_path}.vertices", issues)
                if poly is not None:
                    lines.append(Line(poly, tuple(words), raw_line["text"], raw_line["legible"],
                                      raw_line["vertical"], raw_line["handwritten"]))
            if not raw_para["lines"] and raw_para["legible"]:
                issues.append(Issue(f"{p_path}.lines", "legible paragraph has no lines"))
            poly = _polygon(raw_para["vertices"], w, h, f"{p_path}.vertices", issues)
            if poly is not None:
                paragraphs.append(Paragraph(poly, tuple(lines), raw_para["legible"]))
        annotations.append(HierAnnotation(image_id, w, h, tuple(paragraphs)))
    if issues:
        return GroundTruthSet(), issues
    return GroundTruthSet(tuple(annotations)), issues


def parse_ground_truth(data: bytes | str) -> GroundTruthSet:
    """Parse and fully validate a ground-truth JSON document.

    Raises:
      MalformedJSONError: the bytes are not JSON.
      SchemaError: the structure does not match :data:`GROUND_TRUTH_SCHEMA`.
      InvariantError: the structure is fine but a semantic invariant fails.
    """
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedJSONError([Issue("$", f"malformed JSON: {exc}")]) from None
    validator = jsonschema.Draft7Validator(GROUND_TRUTH_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise SchemaError([Issue(_json_path(e.absolute_path), e.message) for e in errors])
    gts, issues = _build(doc)
    if issues:
        raise InvariantError(issues)
    return gts


def load_ground_truth(path) -> GroundTruthSet:
    """Read a ground-truth file; a ``.gz`` suffix means gzip-compressed."""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as f:
        return parse_ground_truth(f.read())


def _poly_json(p: Polygon) -> list:
    return [[x, y] for x, y in p.vertices]


def to_json(gts: GroundTruthSet) -> dict:
    """Canonical JSON form; ``parse_ground_truth(dumps(to_json(g)))`` reproduces ``g``."""
    return {"annotations": [
        {"image_id": a.image_id, "image_width": a.image_width, "image_height": a.image_height,
         "paragraphs": [
             {"vertices": _poly_json(p.polygon), "legible": p.legible,
              "lines": [
                  {"vertices": _poly_json(l.polygon), "text": l.text, "legible": l.legible,
                   "vertical": l.vertical, "handwritten": l.handwritten,
                   "words": [
                       {"vertices": _poly_json(w.polygon), "text": w.text,
                        "legible": w.legible, "vertical": w.vertical}
                       for w in l.words]}
                  for l in p.lines]}
             for p in a.paragraphs]}
        for a in gts.annotations]}


# ---------------------------------------------------------------------------
# Derived masks
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class DerivedMask:
    """One evaluation entity.  ``legible=False`` marks a don't-care region."""

    index: int
    mask: np.ndarray
    cluster: int
    legible: bool


def _grid(a: HierAnnotation, width: int | None, height: int | None):
    width = a.image_width if width is None else width
    height = a.image_height if height is None else height
    return width, height, width / a.image_width, height / a.image_height


def derive_masks(a: HierAnnotation, level: Level, width: int | None = None,
                 height: int | None = None) -> list[DerivedMask]:
    """Pixel masks for every entity of ``a`` at the requested level.

    Line and paragraph masks are unions of the rasterized word polygons
    beneath them, never the coarser line/paragraph polygons.  A line that has
    no words (only allowed when it is illegible) falls back to its own
    polygon so that it can still act as a don't-care region.  Entities that
    rasterize to zero pixels are dropped with a warning.

    By default masks are produced at image resolution; pass ``width`` and
    ``height`` to rasterize onto a rescaled grid instead.

    The ``index`` of each result counts entities at that level in reading
    order (including dropped ones) and ``cluster`` is the index of the
    enclosing paragraph.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    w, h, sx, sy = _grid(a, width, height)

    def raster(poly: Polygon) -> np.ndarray:
        if sx != 1.0 or sy != 1.0:
            poly = poly.scaled(sx, sy)
        return geometry.rasterize(poly, w, h)

    out: list[DerivedMask] = []
    idx = 0
    for p_idx, para in enumerate(a.paragraphs):
        para_mask = geometry.empty_mask(w, h)
        for line in para.lines:
            if line.words:
                word_masks = [raster(word.polygon) for word in line.words]
                line_mask = geometry.union(word_masks, w, h)
            else:
                word_masks = []
                line_mask = raster(line.polygon)
            para_mask |= line_mask
            if level == "word":
                for word, m in zip(line.words, word_masks):
                    _emit(out, idx, m, p_idx, word.legible, a.image_id, level)
                    idx += 1
            elif level == "line":
                _emit(out, idx, line_mask, p_idx, line.legible, a.image_id, level)
                idx += 1
        if level == "paragraph":
            _emit(out, idx, para_mask, p_idx, para.legible, a.image_id, level)
            idx += 1
    return out


def _emit(out, idx, mask, cluster, legible, image_id, level):
    if not mask.any():
        logger.warning("%s: %s %d rasterizes to zero pixels; dropped", image_id, level, idx)
        return
    out.append(DerivedMask(idx, mask, cluster, legible))


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------

HEATMAP_SIZE = 64


def _histogram(values: Sequence[int]) -> dict:
    """Unit-width integer histogram from 0 up to the maximum observed value."""
    if not values:
        return {"bin_edges": [], "counts": []}
    top = int(max(values))
    counts = np.bincount(np.asarray(values, dtype=np.int64), minlength=top + 1)
    return {"bin_edges": list(range(top + 2)), "counts": counts.tolist()}


def _word_centroid(word: Word, a: HierAnnotation) -> tuple[float, float]:
    mask = geometry.rasterize(word.polygon, a.image_width, a.image_height)
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        cx, cy = word.polygon.as_array().mean(axis=0)
        return float(cx), float(cy)
    return float(xs.mean() + 0.5), float(ys.mean() + 0.5)


def dataset_stats(gts: GroundTruthSet, heatmap: bool = True) -> dict:
    """Dataset-level counts, per-entity histograms and a word-location heat map.

    Word totals are reported twice, once counting every word and once only
    the legible ones.  The heat map bins legible word-mask centroids on a
    64x64 grid in normalized image coordinates and sums to 1 (all zeros for
    a set without legible words).
    """
    n_images = len(gts.annotations)
    words_per_image, legible_per_image = [], []
    words_per_line, words_per_paragraph = [], []
    n_lines = n_paragraphs = 0
    heat = np.zeros((HEATMAP_SIZE, HEATMAP_SIZE), dtype=np.int64)

    for a in gts.annotations:
        total = legible = 0
        for para in a.paragraphs:
            n_paragraphs += 1
            para_words = 0
            for line in para.lines:
                n_lines += 1
                words_per_line.append(len(line.words))
                para_words += len(line.words)
                for word in line.words:
                    total += 1
                    if word.legible:
                        legible += 1
                        if heatmap:
                            cx, cy = _word_centroid(word, a)
                            gx = min(int(cx / a.image_width * HEATMAP_SIZE), HEATMAP_SIZE - 1)
                            gy = min(int(cy / a.image_height * HEATMAP_SIZE), HEATMAP_SIZE - 1)
                            heat[gy, gx] += 1
            words_per_paragraph.append(para_words)
        words_per_image.append(total)
        legible_per_image.append(legible)

    total_words = int(sum(words_per_image))
    legible_words = int(sum(legible_per_image))
    heat_total = heat.sum()
    heat_norm = heat / heat_total if heat_total else heat.astype(float)
    report = {
        "num_images": n_images,
        "num_paragraphs": n_paragraphs,
        "num_lines": n_lines,
        "num_words": total_words,
        "num_legible_words": legible_words,
        "mean_words_per_image": total_words / n_images if n_images else 0.0,
        "mean_legible_words_per_image": legible_words / n_images if n_images else 0.0,
        "words_per_image": _histogram(words_per_image),
        "legible_words_per_image": _histogram(legible_per_image),
        "words_per_line": _histogram(words_per_line),
        "words_per_paragraph": _histogram(words_per_paragraph),
    }
    if heatmap:
        report["word_location_heatmap"] = heat_norm.tolist()
    return report
