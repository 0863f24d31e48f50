"""File formats: the raw tensor container, detection manifests and prediction JSON.

Tensor container layout (one tensor per file)::

    b"UDT1" | u32 little-endian header length | UTF-8 JSON header | float32 LE payload

with header ``{"dtype": "f32", "shape": [...], "order": "row-major"}``.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hierkit import geometry
from hierkit.entities import Entity, ImagePrediction

MAGIC = b"UDT1"


class ContainerError(ValueError):
    """A tensor file is truncated, has the wrong magic or an inconsistent header."""


def encode_tensor(array) -> bytes:
    arr = np.asarray(array, dtype="<f4")
    header = json.dumps({"dtype": "f32", "shape": list(arr.shape), "order": "row-major"},
                        separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<I", len(header)) + header + np.ascontiguousarray(arr).tobytes()


def decode_tensor(data: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(data) < 8 or data[:4] != MAGIC:
        raise ContainerError(f"{name}: bad magic bytes {data[:4]!r}, expected {MAGIC!r}")
    (hlen,) = struct.unpack("<I", data[4:8])
    if 8 + hlen > len(data):
        raise ContainerError(f"{name}: header length {hlen} exceeds file size")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ContainerError(f"{name}: unreadable header ({exc})") from None
    if header.get("dtype") != "f32" or header.get("order", "row-major") != "row-major":
        raise ContainerError(f"{name}: unsupported dtype/order {header}")
    if any(s < 0 for s in shape):
        raise ContainerError(f"{name}: negative dimension in shape {shape}")
    payload = data[8 + hlen:]
    expected = 4 * int(np.prod(shape, dtype=np.int64))
    if len(payload) != expected:
        raise ContainerError(f"{name}: payload has {len(payload)} bytes, shape {list(shape)} needs {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes(), name=str(path))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class ManifestEntry:
    """Tensor file paths for one image, resolved relative to the manifest."""

    image_id: str
    masks: Path
    textness: Path
    affinity: Path | None = None
    embeddings: Path | None = None
    tau: float = 1.0
    image_width: int | None = None
    image_height: int | None = None


def read_manifest(path) -> list[ManifestEntry]:
    """Load a manifest: one image object, or ``{"images": [...]}``.

    Each image object has ``image_id``, ``masks``, ``textness`` and either
    ``affinity`` or ``embeddings`` (+ optional ``tau``); ``image_width`` /
    ``image_height`` are optional and only used when upsampling.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    items = doc["images"] if "images" in doc else [doc]
    base = path.parent
    out = []
    for item in items:
        if ("affinity" in item) == ("embeddings" in item):
            raise ValueError(f"{path}: image {item.get('image_id')!r} needs exactly one of "
                             "'affinity' or 'embeddings'")
        out.append(ManifestEntry(
            image_id=str(item["image_id"]),
            masks=base / item["masks"],
            textness=base / item["textness"],
            affinity=base / item["affinity"] if "affinity" in item else None,
            embeddings=base / item["embeddings"] if "embeddings" in item else None,
            tau=float(item.get("tau", 1.0)),
            image_width=item.get("image_width"),
            image_height=item.get("image_height"),
        ))
    return out


def write_manifest(path, entries: Sequence[dict]) -> None:
    Path(path).write_text(json.dumps({"images": list(entries)}, indent=1) + "\n")


# ---------------------------------------------------------------------------
# Prediction JSON
# ---------------------------------------------------------------------------

def predictions_to_json(preds: Iterable[ImagePrediction]) -> dict:
    """Canonical ordering: images by id, entities by id."""
    images = []
    for p in sorted(preds, key=lambda p: p.image_id):
        ents = [{"id": int(e.id), "mask": geometry.rle_encode(e.mask).to_json(),
                 "score": float(e.score), "cluster": None if e.cluster is None else int(e.cluster)}
                for e in sorted(p.entities, key=lambda e: e.id)]
        images.append({"image_id": p.image_id, "entities": ents})
    return {"predictions": images}


def dumps_predictions(preds: Iterable[ImagePrediction]) -> str:
    # json.dumps writes floats with repr(), the shortest round-trip form.
    return json.dumps(predictions_to_json(preds), separators=(",", ":")) + "\n"


def predictions_from_json(doc: dict) -> list[ImagePrediction]:
    out = []
    for img in doc["predictions"]:
        ents = tuple(
            Entity(int(e["id"]), geometry.rle_decode(geometry.RleMask.from_json(e["mask"])),
                   float(e.get("score", 1.0)),
                   None if e.get("cluster") is None else int(e["cluster"]))
            for e in img["entities"])
        out.append(ImagePrediction(str(img["image_id"]), ents))
    return out


def load_predictions(path: str | os.PathLike) -> list[ImagePrediction]:
    with open(path, "rb") as f:
        return predictions_from_json(json.loads(f.read()))
