"""Random hierarchical annotations for tests, demos and self-checks.

Paragraphs occupy disjoint horizontal bands, lines are stacked inside a
paragraph and words sit side by side inside a line, so entities never
overlap at any level.  Word quads are jittered rectangles that stay inside
their own cell.
"""

from __future__ import annotations

import json

import numpy as np

from hierkit import annotation
from hierkit.annotation import GroundTruthSet, HierAnnotation, Line, Paragraph, Word
from hierkit.geometry import Polygon


def _rect(x0, y0, x1, y1) -> Polygon:
    return Polygon(((x0, y0), (x1, y0), (x1, y1), (x0, y1)))


def random_annotation(rng: np.random.Generator, image_id: str = "img", width: int = 96,
                      height: int = 96, max_paragraphs: int = 3, max_lines: int = 3,
                      max_words: int = 3, word_size: tuple[int, int] = (8, 8),
                      illegible_prob: float = 0.0, jitter: float = 0.0) -> HierAnnotation:
    """Random non-overlapping annotation.

    Words are at least ``word_size`` pixels (width, height) so that with the
    default size every word covers 64 pixels, above the decoder's 32-pixel
    area filter.  ``jitter`` moves each word corner inward by up to that
    many pixels.
    """
    ww, wh = word_size
    gap = 2
    line_h = wh + gap
    n_par = int(rng.integers(0, max_paragraphs + 1))
    band_lines = max(1, (height - gap) // line_h)
    paragraphs = []
    row = 0
    for _ in range(n_par):
        n_lines = int(rng.integers(1, max_lines + 1))
        if row + n_lines > band_lines:
            break
        lines = []
        for k in range(n_lines):
            y0 = gap + (row + k) * line_h
            max_fit = max(1, (width - gap) // (ww + gap))
            n_words = int(rng.integers(1, min(max_words, max_fit) + 1))
            words = []
            for j in range(n_words):
                x0 = gap + j * (ww + gap)
                pts = np.array([[x0, y0], [x0 + ww, y0], [x0 + ww, y0 + wh], [x0, y0 + wh]], float)
                if jitter:
                    inward = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]], float)
                    pts += inward * rng.uniform(0, jitter, size=(4, 2))
                legible = bool(rng.random() >= illegible_prob)
                words.append(Word(Polygon.from_array(pts), f"w{j}" if legible else "", legible, False))
            x1 = gap + n_words * (ww + gap) - gap
            line_legible = any(w.legible for w in words)
            lines.append(Line(_rect(gap, y0, x1, y0 + wh), tuple(words),
                              " ".join(w.text for w in words if w.text), line_legible))
        top = gap + row * line_h
        bottom = gap + (row + n_lines) * line_h - gap
        para_legible = any(l.legible for l in lines)
        paragraphs.append(Paragraph(_rect(gap, top, width - gap, bottom), tuple(lines), para_legible))
        row += n_lines
    return HierAnnotation(image_id, width, height, tuple(paragraphs))


def random_ground_truth(rng: np.random.Generator, n_images: int, **kwargs) -> GroundTruthSet:
    return GroundTruthSet(tuple(random_annotation(rng, f"img_{k:04d}", **kwargs)
                                for k in range(n_images)))


def dumps(gts: GroundTruthSet) -> str:
    return json.dumps(annotation.to_json(gts))
