import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from hierkit import cli, decoder, formats, synthetic
from hierkit.entities import Entity, ImagePrediction

GOLDEN = Path(__file__).parent / "golden"


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def rect(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]


def one_word_gt(tmp_path, vertices=None):
    word = {"vertices": vertices or rect(0, 0, 10, 1), "text": "w", "legible": True, "vertical": False}
    line = {"vertices": rect(0, 0, 10, 1), "text": "w", "legible": True, "vertical": False,
            "handwritten": False, "words": [word]}
    doc = {"annotations": [{"image_id": "img", "image_width": 10, "image_height": 10,
                            "paragraphs": [{"vertices": rect(0, 0, 10, 1), "legible": True,
                                            "lines": [line]}]}]}
    p = tmp_path / "gt.json"
    p.write_text(json.dumps(doc))
    return p


# -- validate ---------------------------------------------------------------

def test_validate_ok(tmp_path, capsys):
    code, out, _ = run(capsys, "validate", one_word_gt(tmp_path))
    assert code == 0 and "0 errors" in out


def test_validate_reports_paths(tmp_path, capsys):
    p = one_word_gt(tmp_path)
    doc = json.loads(p.read_text())
    doc["annotations"][0]["paragraphs"][0]["lines"][0]["words"][0]["vertices"] = []
    p.write_text(json.dumps(doc))
    code, out, _ = run(capsys, "validate", p)
    assert code == 1
    assert "$.annotations[0].paragraphs[0].lines[0].words[0].vertices" in out


def test_validate_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "validate", tmp_path / "nope.json")
    assert code == 2 and "cannot read" in err


def test_usage_error_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["evaluate"])
    assert exc.value.code == 2


# -- stats ------------------------------------------------------------------

def test_stats_two_image_fixture(tmp_path, capsys):
    gts = synthetic.random_ground_truth(np.random.default_rng(5), 2, illegible_prob=0.3)
    gt = tmp_path / "gt.json"
    gt.write_text(synthetic.dumps(gts))
    code, out, _ = run(capsys, "stats", gt, "--out", tmp_path / "s.json")
    assert code == 0
    report = json.loads((tmp_path / "s.json").read_text())
    words = [w for a in gts.annotations for _, w in a.words()]
    assert report["num_images"] == 2
    assert report["num_words"] == len(words)
    assert report["num_legible_words"] == sum(w.legible for w in words)
    assert f"mean_words_per_image={len(words) / 2:.1f}" in out


def test_stats_empty(tmp_path, capsys):
    gt = tmp_path / "gt.json"
    gt.write_text('{"annotations": []}')
    code, out, _ = run(capsys, "stats", gt, "--no-heatmap")
    assert code == 0 and "images=0 words=0" in out


# -- decode -----------------------------------------------------------------

def test_decode_golden(tmp_path, capsys, monkeypatch):
    expected = (GOLDEN / "decode_expected.json").read_bytes()
    for threads in ("1", "4"):
        monkeypatch.setenv("HIERKIT_THREADS", threads)
        out = tmp_path / f"pred{threads}.json"
        code, _, _ = run(capsys, "decode", GOLDEN / "manifest.json", "--min-pixels", 4, "--out", out)
        assert code == 0
        assert out.read_bytes() == expected
    code, stdout, _ = run(capsys, "decode", GOLDEN / "manifest.json", "--min-pixels", 4, "--threads", 3)
    assert stdout.encode() == expected


def test_decode_saturated_textness_threshold(capsys):
    code, out, _ = run(capsys, "decode", GOLDEN / "manifest.json", "--tc", "1.0")
    assert code == 0
    assert all(p["entities"] == [] for p in json.loads(out)["predictions"])


def test_decode_upsample(capsys):
    code, out, _ = run(capsys, "decode", GOLDEN / "manifest.json", "--min-pixels", 4, "--upsample")
    mask = json.loads(out)["predictions"][0]["entities"][0]["mask"]
    assert code == 0 and (mask["width"], mask["height"]) == (64, 64)


def test_decode_corrupt_magic(tmp_path, capsys):
    for f in GOLDEN.glob("g1_*"):
        (tmp_path / f.name).write_bytes(f.read_bytes())
    (tmp_path / "g1_masks.udt").write_bytes(b"JUNK" + (GOLDEN / "g1_masks.udt").read_bytes()[4:])
    manifest = json.loads((GOLDEN / "manifest.json").read_text())
    manifest["images"] = manifest["images"][:1]
    (tmp_path / "m.json").write_text(json.dumps(manifest))
    code, _, err = run(capsys, "decode", tmp_path / "m.json")
    assert code == 1
    assert "g1_masks.udt" in err and "magic" in err


def test_decode_missing_tensor_is_io_error(tmp_path, capsys):
    (tmp_path / "m.json").write_text(json.dumps(
        {"image_id": "x", "masks": "m.udt", "textness": "y.udt", "affinity": "a.udt"}))
    code, _, _ = run(capsys, "decode", tmp_path / "m.json")
    assert code == 2


# -- evaluate ---------------------------------------------------------------

def write_preds(path, masks, clusters=None):
    ents = tuple(Entity(i, m, 1.0, None if clusters is None else clusters[i]) for i, m in enumerate(masks))
    path.write_text(formats.dumps_predictions([ImagePrediction("img", ents)]))
    return path


def test_evaluate_one_tp_one_fp(tmp_path, capsys):
    gt = one_word_gt(tmp_path)
    tp = np.zeros((10, 10), bool)
    tp[0, :8] = True
    fp = np.zeros((10, 10), bool)
    fp[5:8, 5:8] = True
    pred = write_preds(tmp_path / "p.json", [tp, fp])
    code, out, _ = run(capsys, "evaluate", gt, pred, "--level", "word")
    report = json.loads(out)
    assert code == 0
    assert (report["tp"], report["fp"], report["fn"]) == (1, 1, 0)
    assert report["pq"] == pytest.approx(0.5333, abs=1e-4)
    assert abs(report["pq"] - report["f1"] * report["tightness"]) <= 1e-9


@pytest.mark.parametrize("level", ["word", "line", "paragraph"])
def test_evaluate_gt_as_prediction(tmp_path, capsys, level):
    from hierkit import metrics
    gts = synthetic.random_ground_truth(np.random.default_rng(8), 4, illegible_prob=0.2)
    gt = tmp_path / "gt.json"
    gt.write_text(synthetic.dumps(gts))
    pred = tmp_path / "p.json"
    pred.write_text(formats.dumps_predictions(metrics.ground_truth_as_predictions(gts, level)))
    code, out, _ = run(capsys, "evaluate", gt, pred, "--level", level, "--threads", 2)
    assert code == 0 and json.loads(out)["pq"] == 1.0


def test_evaluate_unknown_image(tmp_path, capsys):
    gt = one_word_gt(tmp_path)
    pred = tmp_path / "p.json"
    pred.write_text(formats.dumps_predictions([ImagePrediction("ghost"), ImagePrediction("alien")]))
    code, _, err = run(capsys, "evaluate", gt, pred)
    assert code == 1 and "alien, ghost" in err


# -- loss / grad-check ------------------------------------------------------

def loss_fixture(tmp_path, n=None):
    """Softened tensors derived from a synthetic annotation."""
    gts = synthetic.random_ground_truth(np.random.default_rng(3), 2, width=48, height=48)
    (tmp_path / "gt.json").write_text(synthetic.dumps(gts))
    rng = np.random.default_rng(4)
    entries = []
    for ann in gts.annotations:
        t, _ = decoder.tensors_from_annotation(ann, "line", n=n)
        masks = 0.8 * t.masks + 0.2 / t.n
        aff = np.clip(0.6 * t.affinity + 0.2 + rng.uniform(-0.1, 0.1, t.affinity.shape), 0.05, 0.95)
        textness = np.clip(0.8 * t.textness + 0.1, 0.05, 0.95)
        for key, arr in (("masks", masks), ("textness", textness), ("affinity", aff)):
            formats.write_tensor(tmp_path / f"{ann.image_id}_{key}.udt", arr)
        entries.append({"image_id": ann.image_id, "masks": f"{ann.image_id}_masks.udt",
                        "textness": f"{ann.image_id}_textness.udt",
                        "affinity": f"{ann.image_id}_affinity.udt"})
    formats.write_manifest(tmp_path / "m.json", entries)
    return tmp_path / "m.json", tmp_path / "gt.json"


def test_loss_balancing_modes_differ(tmp_path, capsys):
    manifest, gt = loss_fixture(tmp_path)
    results = {}
    for mode in ("vanilla", "alpha"):
        code, out, _ = run(capsys, "loss", manifest, gt, "--balancing", mode)
        assert code == 0
        results[mode] = json.loads(out)
    lay = {m: r["mean"]["l_lay"] for m, r in results.items()}
    assert all(np.isfinite(v) for v in lay.values())
    assert lay["vanilla"] != lay["alpha"]
    row = results["alpha"]["per_image"][0]
    assert row["total"] == pytest.approx(3 * row["l_det"] + row["l_lay"], abs=1e-12)


def test_loss_too_few_queries(tmp_path, capsys):
    manifest, gt = loss_fixture(tmp_path)
    doc = json.loads(manifest.read_text())
    first = doc["images"][0]
    masks = formats.read_tensor(tmp_path / first["masks"])
    keep = 1
    formats.write_tensor(tmp_path / first["masks"], np.concatenate(
        [masks[:keep], masks[keep:].sum(axis=0, keepdims=True)]))
    formats.write_tensor(tmp_path / first["textness"], formats.read_tensor(tmp_path / first["textness"])[:2])
    formats.write_tensor(tmp_path / first["affinity"], formats.read_tensor(tmp_path / first["affinity"])[:2, :2])
    code, _, err = run(capsys, "loss", manifest, gt)
    assert code == 1 and "exceed" in err


def test_grad_check_random_pass(capsys):
    code, out, _ = run(capsys, "grad-check", "--trials", 5, "--seed", 1)
    assert code == 0 and out.startswith("PASS (max rel err") and "< 0.001" in out


def test_grad_check_on_fixture(tmp_path, capsys):
    manifest, gt = loss_fixture(tmp_path)
    code, out, _ = run(capsys, "grad-check", "--manifest", manifest, "--gt", gt, "--max-pixels", 40,
                       "--balancing", "focal", "--out", tmp_path / "g.json")
    assert code == 0 and "PASS" in out
    assert json.loads((tmp_path / "g.json").read_text())["passed"] is True


# -- render -----------------------------------------------------------------

def render(tmp_path, capsys, entities):
    img = tmp_path / "img.png"
    Image.fromarray(np.full((8, 8, 3), 100, np.uint8)).save(img)
    pred = tmp_path / "p.json"
    pred.write_text(formats.dumps_predictions([ImagePrediction("img", tuple(entities))]))
    out = tmp_path / "out.png"
    code, _, _ = run(capsys, "render", img, pred, out)
    assert code == 0
    return np.asarray(Image.open(out)), np.asarray(Image.open(img))


def halves():
    left = np.zeros((8, 8), bool)
    left[:, :4] = True
    return left, ~left


def test_render_same_cluster_same_color(tmp_path, capsys):
    left, right = halves()
    out, _ = render(tmp_path, capsys, [Entity(0, left, 1.0, 3), Entity(1, right, 1.0, 3)])
    assert (out[0, 0] == out[0, 7]).all()


def test_render_distinct_clusters(tmp_path, capsys):
    left, right = halves()
    out, base = render(tmp_path, capsys, [Entity(0, left, 1.0, 0), Entity(1, right, 1.0, 1)])
    assert not (out[0, 0] == out[0, 7]).all()
    assert not (out[0, 0] == base[0, 0]).all()


def test_render_empty_is_copy(tmp_path, capsys):
    out, base = render(tmp_path, capsys, [])
    assert np.array_equal(out, base)


def test_render_unknown_image_id(tmp_path, capsys):
    img = tmp_path / "other.png"
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(img)
    pred = tmp_path / "p.json"
    pred.write_text(formats.dumps_predictions([ImagePrediction("img")]))
    code, _, err = run(capsys, "render", img, pred, tmp_path / "o.png")
    assert code == 1 and "other" in err
