"""Decoded detections: per-image entities with masks, scores and cluster ids."""

from __future__ import annotations

import dataclasses

import numpy as np


@dataclasses.dataclass(frozen=True, eq=False)
class Entity:
    id: int
    mask: np.ndarray
    score: float = 1.0
    cluster: int | None = None


@dataclasses.dataclass(frozen=True, eq=False)
class ImagePrediction:
    image_id: str
    entities: tuple[Entity, ...] = ()

    def with_entities(self, entities) -> "ImagePrediction":
        return dataclasses.replace(self, entities=tuple(entities))

    def partition(self) -> set[frozenset[int]]:
        """Entity ids grouped by cluster, for order-free comparisons."""
        groups: dict[int, set[int]] = {}
        for e in self.entities:
            groups.setdefault(e.cluster, set()).add(e.id)
        return {frozenset(g) for g in groups.values()}
