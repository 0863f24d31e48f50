import copy
import json

import numpy as np
import pytest

from hierkit import annotation, geometry, synthetic
from hierkit.annotation import InvariantError, MalformedJSONError, SchemaError


def rect(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]


def word(x0, y0, x1, y1, text="a", legible=True):
    return {"vertices": rect(x0, y0, x1, y1), "text": text, "legible": legible, "vertical": False}


def line(words, legible=True):
    return {"vertices": rect(0, 0, 10, 10), "text": "", "legible": legible, "vertical": False,
            "handwritten": False, "words": words}


def para(lines, legible=True):
    return {"vertices": rect(0, 0, 20, 20), "legible": legible, "lines": lines}


def doc(*paragraphs, image_id="a", w=20, h=20):
    return {"annotations": [{"image_id": image_id, "image_width": w, "image_height": h,
                             "paragraphs": list(paragraphs)}]}


MINIMAL = doc(para([line([word(1, 1, 5, 5)])]))


def test_minimal_file_parses():
    gts = annotation.parse_ground_truth(json.dumps(MINIMAL).encode())
    assert len(gts.annotations) == 1
    ann = gts.annotations[0]
    assert ann.image_id == "a"
    assert len(list(ann.words())) == 1


def test_two_vertex_word_is_schema_error_with_path():
    bad = copy.deepcopy(MINIMAL)
    bad["annotations"][0]["paragraphs"][0]["lines"][0]["words"][0]["vertices"] = [[0, 0], [1, 1]]
    with pytest.raises(SchemaError) as exc:
        annotation.parse_ground_truth(json.dumps(bad))
    paths = [i.path for i in exc.value.issues]
    assert "$.annotations[0].paragraphs[0].lines[0].words[0].vertices" in paths


def test_malformed_json():
    with pytest.raises(MalformedJSONError):
        annotation.parse_ground_truth(b"{not json")


def test_invariant_errors_are_collected():
    bad = doc(para([line([word(1, 1, 5, 5, text="")]), line([], legible=True)]))
    bad["annotations"].append(copy.deepcopy(bad["annotations"][0]))
    bad["annotations"][0]["paragraphs"][0]["lines"][0]["words"][0]["vertices"][2] = [50, 50]
    with pytest.raises(InvariantError) as exc:
        annotation.parse_ground_truth(json.dumps(bad))
    paths = {i.path for i in exc.value.issues}
    assert "$.annotations[0].paragraphs[0].lines[0].words[0].text" in paths
    assert "$.annotations[0].paragraphs[0].lines[1].words" in paths
    assert "$.annotations[0].paragraphs[0].lines[0].words[0].vertices[2]" in paths
    assert "$.annotations[1].image_id" in paths


def test_clamping_tolerance():
    ok = doc(para([line([word(-0.5, 1, 20.9, 5)])]))
    gts = annotation.parse_ground_truth(json.dumps(ok))
    verts = next(gts.annotations[0].words())[1].polygon.vertices
    assert min(v[0] for v in verts) == 0.0 and max(v[0] for v in verts) == 20.0


def test_illegible_line_may_be_empty():
    ok = doc(para([line([], legible=False)], legible=False))
    annotation.parse_ground_truth(json.dumps(ok))


def test_parse_is_deterministic_and_round_trips(rng):
    gts = synthetic.random_ground_truth(rng, 5, illegible_prob=0.3, jitter=1.5)
    text = synthetic.dumps(gts)
    a = annotation.parse_ground_truth(text)
    b = annotation.parse_ground_truth(text.encode())
    assert a == b == gts
    assert json.dumps(annotation.to_json(a)) == text


def test_tree_counts(rng):
    gts = synthetic.random_ground_truth(rng, 10)
    for ann in gts.annotations:
        assert sum(len(p.lines) for p in ann.paragraphs) == len(list(ann.lines()))
        assert sum(len(l.words) for _, l in ann.lines()) == len(list(ann.words()))


def _parse(d):
    return annotation.parse_ground_truth(json.dumps(d)).annotations[0]


def test_derive_masks_disjoint_union():
    ann = _parse(doc(para([line([word(0, 0, 2, 2), word(3, 0, 5, 2)]),
                           line([word(0, 4, 3, 6), word(4, 4, 6, 6)])])))
    words = annotation.derive_masks(ann, "word")
    paras = annotation.derive_masks(ann, "paragraph")
    assert len(words) == 4 and len(paras) == 1
    assert paras[0].mask.sum() == sum(w.mask.sum() for w in words) == 4 + 4 + 6 + 4
    assert {w.cluster for w in words} == {0}


def test_derive_masks_overlapping_words():
    a = word(0, 0, 4, 2)
    b = word(2, 0, 6, 2)
    ann = _parse(doc(para([line([a, b])])))
    wa = geometry.rasterize(a["vertices"], 20, 20)
    wb = geometry.rasterize(b["vertices"], 20, 20)
    k = int((wa & wb).sum())
    assert k == 4
    (l,) = annotation.derive_masks(ann, "line")
    assert l.mask.sum() == wa.sum() + wb.sum() - k


def test_derive_masks_uses_word_polygons_not_line_polygon():
    ann = _parse(doc(para([line([word(1, 1, 3, 3)])])))
    (l,) = annotation.derive_masks(ann, "line")
    assert l.mask.sum() == 4  # the 10x10 line polygon is metadata only


def test_derive_masks_empty_image():
    ann = _parse(doc())
    for level in annotation.LEVELS:
        assert annotation.derive_masks(ann, level) == []


def test_derive_masks_marks_illegible_and_drops_empty(caplog):
    ann = _parse(doc(para([line([word(1, 1, 3, 3), word(5, 5, 5.2, 5.2, text="", legible=False)])]),
                     para([line([word(10, 10, 14, 14, "", False)], legible=False)], legible=False)))
    words = annotation.derive_masks(ann, "word")
    assert [w.index for w in words] == [0, 2]
    assert [w.legible for w in words] == [True, False]
    assert "zero pixels" in caplog.text
    lines = annotation.derive_masks(ann, "line")
    assert [(l.cluster, l.legible) for l in lines] == [(0, True), (1, False)]


def test_paragraph_masks_equal_grouped_line_union(rng):
    gts = synthetic.random_ground_truth(rng, 20, illegible_prob=0.3, jitter=2.0)
    for ann in gts.annotations:
        lines = annotation.derive_masks(ann, "line")
        for p in annotation.derive_masks(ann, "paragraph"):
            members = [l.mask for l in lines if l.cluster == p.cluster]
            assert np.array_equal(p.mask, geometry.union(members, ann.image_width, ann.image_height))


def test_derive_masks_rescaled_grid():
    ann = _parse(doc(para([line([word(0, 0, 8, 8)])])))
    (w,) = annotation.derive_masks(ann, "word", 5, 5)
    assert w.mask.shape == (5, 5) and w.mask.sum() == 4


def test_stats_single_image():
    gts = annotation.parse_ground_truth(json.dumps(
        doc(para([line([word(0, 0, 2, 2), word(3, 0, 5, 2)]), line([word(0, 4, 3, 6)])]))))
    s = annotation.dataset_stats(gts)
    assert s["num_images"] == 1 and s["num_words"] == 3
    assert s["mean_words_per_image"] == 3.0
    assert s["words_per_line"] == {"bin_edges": [0, 1, 2, 3], "counts": [0, 1, 1]}
    assert s["words_per_paragraph"]["counts"][3] == 1
    heat = np.array(s["word_location_heatmap"])
    assert heat.shape == (64, 64) and heat.sum() == pytest.approx(1.0)


def test_stats_empty_set():
    s = annotation.dataset_stats(annotation.GroundTruthSet())
    assert s["num_images"] == 0 and s["num_words"] == 0
    assert s["mean_words_per_image"] == 0.0
    assert s["words_per_image"] == {"bin_edges": [], "counts": []}
    assert np.array(s["word_location_heatmap"]).sum() == 0


def test_stats_separates_legible_counts():
    gts = annotation.parse_ground_truth(json.dumps(
        doc(para([line([word(0, 0, 2, 2), word(3, 0, 5, 2, "", False)])]))))
    s = annotation.dataset_stats(gts)
    assert (s["num_words"], s["num_legible_words"]) == (2, 1)
