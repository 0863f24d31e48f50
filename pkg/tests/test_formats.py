import json
import struct

import numpy as np
import pytest

from hierkit import formats
from hierkit.entities import Entity, ImagePrediction
from hierkit.formats import ContainerError


def test_tensor_round_trip_fuzz(rng):
    for _ in range(200):
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(s) for s in rng.integers(0, 6, size=ndim))
        arr = rng.normal(size=shape).astype(np.float32)
        back = formats.decode_tensor(formats.encode_tensor(arr))
        assert back.dtype == np.float32 and back.shape == shape
        assert np.array_equal(back, arr)


def test_tensor_header_layout():
    data = formats.encode_tensor(np.array([1.0, 2.0]))
    assert data[:4] == b"UDT1"
    (hlen,) = struct.unpack("<I", data[4:8])
    assert json.loads(data[8:8 + hlen]) == {"dtype": "f32", "shape": [2], "order": "row-major"}
    assert data[8 + hlen:] == struct.pack("<2f", 1.0, 2.0)


def test_tensor_errors_name_the_file(tmp_path):
    good = formats.encode_tensor(np.ones((2, 3)))
    cases = {
        "magic.udt": b"XXXX" + good[4:],
        "short.udt": good[:-4],
        "hlen.udt": good[:4] + struct.pack("<I", 10_000) + good[8:],
        "tiny.udt": b"UD",
    }
    for name, data in cases.items():
        p = tmp_path / name
        p.write_bytes(data)
        with pytest.raises(ContainerError, match=name):
            formats.read_tensor(p)


def test_tensor_rejects_other_dtype():
    header = json.dumps({"dtype": "f64", "shape": [1], "order": "row-major"}).encode()
    data = b"UDT1" + struct.pack("<I", len(header)) + header + b"\0" * 8
    with pytest.raises(ContainerError, match="dtype"):
        formats.decode_tensor(data)


def test_manifest_paths_are_relative(tmp_path):
    sub = tmp_path / "run"
    sub.mkdir()
    formats.write_manifest(sub / "m.json", [
        {"image_id": "a", "masks": "a_m.udt", "textness": "a_y.udt", "affinity": "a_a.udt"},
        {"image_id": "b", "masks": "b_m.udt", "textness": "b_y.udt", "embeddings": "b_h.udt", "tau": 0.3},
    ])
    a, b = formats.read_manifest(sub / "m.json")
    assert a.masks == sub / "a_m.udt" and a.embeddings is None
    assert b.affinity is None and b.tau == 0.3
    single = tmp_path / "one.json"
    single.write_text(json.dumps({"image_id": "c", "masks": "m", "textness": "y", "affinity": "a"}))
    assert formats.read_manifest(single)[0].image_id == "c"
    single.write_text(json.dumps({"image_id": "c", "masks": "m", "textness": "y"}))
    with pytest.raises(ValueError, match="exactly one"):
        formats.read_manifest(single)


def test_prediction_json_round_trip_and_ordering(rng):
    preds = []
    for image_id in ("b", "a"):
        ents = tuple(Entity(i, rng.random((5, 7)) < 0.3, float(rng.random()), int(rng.integers(3)))
                     for i in (4, 1, 2))
        preds.append(ImagePrediction(image_id, ents + (Entity(9, np.zeros((5, 7), bool)),)))
    text = formats.dumps_predictions(preds)
    doc = json.loads(text)
    assert [p["image_id"] for p in doc["predictions"]] == ["a", "b"]
    assert [e["id"] for e in doc["predictions"][0]["entities"]] == [1, 2, 4, 9]
    assert doc["predictions"][0]["entities"][-1]["cluster"] is None
    back = formats.predictions_from_json(doc)
    assert formats.dumps_predictions(back) == text
    original = {e.id: e for e in preds[1].entities}
    for e in back[0].entities:
        assert np.array_equal(e.mask, original[e.id].mask)
        assert e.score == original[e.id].score
