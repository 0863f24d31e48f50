"""``hierkit`` command line: validate, stats, decode, evaluate, loss, grad-check, render.

Exit codes: 0 success, 1 domain or validation failure, 2 I/O or usage error.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from hierkit import annotation, decoder, formats, losses, matching, metrics

EXIT_OK, EXIT_FAIL, EXIT_IO = 0, 1, 2

log = logging.getLogger("hierkit")


class _Fail(Exception):
    """Domain failure carrying an exit code."""

    def __init__(self, message: str, code: int = EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("HIERKIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise _Fail(f"HIERKIT_THREADS must be an integer, got {env!r}", EXIT_IO) from None
    return os.cpu_count() or 1


def _mapper(args):
    n = _threads(args)
    if n == 1:
        return map, None
    pool = concurrent.futures.ThreadPoolExecutor(max_workers=n)
    return pool.map, pool


def _dump(obj, out: str | None) -> None:
    text = json.dumps(obj, separators=(",", ":")) + "\n"
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _load_gt(path) -> annotation.GroundTruthSet:
    try:
        return annotation.load_ground_truth(path)
    except OSError as exc:
        raise _Fail(f"cannot read {path}: {exc.strerror or exc}", EXIT_IO) from None
    except annotation.GroundTruthError as exc:
        raise _Fail(f"{path}: invalid ground truth: {exc}") from None


def _load_tensors(entry: formats.ManifestEntry) -> decoder.DetectionTensors:
    try:
        masks = formats.read_tensor(entry.masks).astype(np.float64)
        textness = formats.read_tensor(entry.textness).astype(np.float64)
        affinity = embeddings = None
        if entry.affinity is not None:
            affinity = formats.read_tensor(entry.affinity).astype(np.float64)
        else:
            embeddings = decoder.normalize_rows(formats.read_tensor(entry.embeddings))
    except formats.ContainerError as exc:
        raise _Fail(str(exc)) from None
    except OSError as exc:
        raise _Fail(f"cannot read tensor file {exc.filename}: {exc.strerror}", EXIT_IO) from None
    t = decoder.DetectionTensors(masks, textness, affinity, embeddings, entry.tau, entry.image_id)
    try:
        t.validate()
    except ValueError as exc:
        raise _Fail(f"{entry.masks}: {exc}") from None
    return t


def _read_manifest(path):
    try:
        return formats.read_manifest(path)
    except OSError as exc:
        raise _Fail(f"cannot read manifest {path}: {exc.strerror}", EXIT_IO) from None
    except (ValueError, KeyError) as exc:
        raise _Fail(f"{path}: malformed manifest ({exc})") from None


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_validate(args) -> int:
    try:
        data = Path(args.gt).read_bytes()
    except OSError as exc:
        print(f"error: cannot read {args.gt}: {exc.strerror}", file=sys.stderr)
        return EXIT_IO
    try:
        gts = annotation.parse_ground_truth(data)
    except annotation.GroundTruthError as exc:
        for issue in exc.issues:
            print(issue)
        print(f"{len(exc.issues)} errors")
        return EXIT_FAIL
    print(f"{len(gts.annotations)} images, 0 errors")
    return EXIT_OK


def cmd_stats(args) -> int:
    sets = [_load_gt(path) for path in args.gt]
    if len(sets) > 1:
        for path, g in zip(args.gt, sets):
            print(f"{path}: images={len(g.annotations)}")
    try:
        gts = annotation.GroundTruthSet(tuple(a for g in sets for a in g.annotations))
    except ValueError as exc:
        raise _Fail(f"cannot combine ground-truth files: {exc}") from None
    report = annotation.dataset_stats(gts, heatmap=not args.no_heatmap)
    if args.out:
        _dump(report, args.out)
    print(f"images={report['num_images']} words={report['num_words']} "
          f"legible_words={report['num_legible_words']} "
          f"mean_words_per_image={report['mean_words_per_image']:.1f} "
          f"mean_legible_words_per_image={report['mean_legible_words_per_image']:.1f}")
    return EXIT_OK


def cmd_decode(args) -> int:
    entries = _read_manifest(args.manifest)
    params = decoder.DecodeParams(args.tm, args.tc, args.ta, args.min_pixels)
    mapper, pool = _mapper(args)

    def run(entry):
        pred = decoder.decode(_load_tensors(entry), params)
        if args.upsample:
            pred = decoder.upsample(pred, args.upsample, entry.image_width, entry.image_height)
        return pred

    try:
        preds = list(mapper(run, entries))
    finally:
        if pool:
            pool.shutdown()
    text = formats.dumps_predictions(preds)
    if args.out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    gts = _load_gt(args.gt)
    try:
        preds = formats.load_predictions(args.pred)
    except OSError as exc:
        raise _Fail(f"cannot read {args.pred}: {exc.strerror}", EXIT_IO) from None
    except (ValueError, KeyError, TypeError) as exc:
        raise _Fail(f"{args.pred}: malformed predictions ({exc})") from None
    unknown = sorted({p.image_id for p in preds} - gts.by_id().keys())
    if unknown:
        raise _Fail("unknown image_id(s) in predictions: " + ", ".join(unknown))
    mapper, pool = _mapper(args)
    try:
        report = metrics.evaluate_dataset(preds, gts, args.level, args.include_illegible, mapper)
    except ValueError as exc:
        raise _Fail(str(exc)) from None
    finally:
        if pool:
            pool.shutdown()
    _dump(report.to_json(), None)
    return EXIT_OK


def _loss_config(args) -> losses.LossConfig:
    return losses.LossConfig(alpha=args.alpha, alpha_l=args.alpha_l, balancing_mode=args.balancing,
                             focal_gamma=args.focal_gamma, lambdas=tuple(args.lambdas),
                             include_diagonal=not args.exclude_diagonal)


def _matched_instance(entry, ann, level):
    """Tensors + ground truth of one image -> matched loss inputs."""
    t = _load_tensors(entry)
    n, h, w = t.masks.shape
    derived = [d for d in annotation.derive_masks(ann, level, w, h) if d.legible]
    real = [matching.TargetSlot(d.mask, 1, d.cluster) for d in derived]
    if len(real) > n:
        raise _Fail(f"{entry.image_id}: {len(real)} ground-truth {level}s exceed N={n} queries")
    if real:
        targets = matching.pad_targets(real, n)
    else:
        targets = [matching.TargetSlot.padding(h, w) for _ in range(n)]
    m_hat = np.clip(t.masks, 0.0, 1.0)
    preds = [matching.PredictionSlot(m_hat[i], float(t.textness[i])) for i in range(n)]
    sigma = matching.match(preds, targets)
    return {
        "y_hat": t.textness,
        "m_hat": m_hat,
        "y": np.array([s.is_text for s in targets], dtype=np.float64),
        "m": np.stack([s.mask for s in targets]).astype(np.float64),
        "clusters": np.array([s.cluster_id for s in targets]),
        "affinity": t.affinity_matrix(),
        "sigma": np.array(sigma.sigma),
    }


def _gt_for(entries, gts):
    by_id = gts.by_id()
    missing = sorted(e.image_id for e in entries if e.image_id not in by_id)
    if missing:
        raise _Fail("manifest image_id(s) missing from ground truth: " + ", ".join(missing))
    return by_id


def cmd_loss(args) -> int:
    cfg = _loss_config(args)
    entries = _read_manifest(args.manifest)
    by_id = _gt_for(entries, _load_gt(args.gt))
    rows = []
    for entry in sorted(entries, key=lambda e: e.image_id):
        inst = _matched_instance(entry, by_id[entry.image_id], args.level)
        l_det = losses.detection_loss_arrays(inst["y_hat"], inst["m_hat"], inst["y"], inst["m"],
                                             cfg.alpha, inst["sigma"])
        l_lay = losses.layout_loss_arrays(inst["affinity"], inst["y"], inst["clusters"],
                                          inst["sigma"], cfg)
        b = losses.total_loss(l_det, l_lay, args.l_seg, args.l_ins, cfg)
        rows.append({"image_id": entry.image_id, **b.to_json()})
    keys = ("l_det", "l_lay", "l_seg", "l_ins", "total")
    mean = {k: float(np.mean([r[k] for r in rows])) if rows else 0.0 for k in keys}
    _dump({"balancing_mode": cfg.balancing_mode, "per_image": rows, "mean": mean}, args.out)
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = _loss_config(args)
    instances = []
    if args.manifest:
        if not args.gt:
            raise _Fail("--manifest requires --gt", EXIT_IO)
        entries = _read_manifest(args.manifest)
        by_id = _gt_for(entries, _load_gt(args.gt))
        for entry in sorted(entries, key=lambda e: e.image_id):
            instances.append((entry.image_id, _matched_instance(entry, by_id[entry.image_id], args.level)))
    else:
        rng = np.random.default_rng(args.seed)
        for k in range(args.trials):
            n = int(rng.integers(1, args.n + 1))
            instances.append((f"random-{k}", losses.random_instance(rng, n, args.size, args.size)))
    rng = np.random.default_rng(args.seed)
    results = []
    for name, inst in instances:
        try:
            det = losses.grad_check("detection", inst, cfg, max_pixels=args.max_pixels, rng=rng)
            lay = losses.grad_check("layout", inst, cfg)
        except ValueError as exc:
            raise _Fail(f"{name}: {exc}") from None
        results.append({"instance": name, "detection": det, "layout": lay})
    worst = max((max(r["detection"], r["layout"]) for r in results), default=0.0)
    passed = worst < losses.GRAD_TOL
    if args.out:
        _dump({"balancing_mode": cfg.balancing_mode, "tolerance": losses.GRAD_TOL,
               "max_rel_error": worst, "passed": passed, "instances": results}, args.out)
    verdict = "PASS" if passed else "FAIL"
    op = "<" if passed else ">="
    print(f"{verdict} (max rel err {worst:.3g} {op} {losses.GRAD_TOL:g})")
    return EXIT_OK if passed else EXIT_FAIL


PALETTE = (
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48), (145, 30, 180),
    (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212), (0, 128, 128), (170, 110, 40),
)


def cluster_color(cluster: int | None) -> tuple[int, int, int]:
    return PALETTE[(cluster or 0) % len(PALETTE)]


def render_overlay(image: np.ndarray, pred, opacity: float = 0.5) -> np.ndarray:
    """Alpha-blend entity masks onto an RGB image, one color per cluster."""
    out = image.astype(np.float64)
    h, w = out.shape[:2]
    for e in pred.entities:
        mask = e.mask
        if mask.shape != (h, w):
            ys = np.minimum((np.arange(h) * mask.shape[0]) // h, mask.shape[0] - 1)
            xs = np.minimum((np.arange(w) * mask.shape[1]) // w, mask.shape[1] - 1)
            mask = mask[np.ix_(ys, xs)]
        color = np.array(cluster_color(e.cluster), dtype=np.float64)
        out[mask] = (1.0 - opacity) * out[mask] + opacity * color
    return np.rint(out).astype(np.uint8)


def cmd_render(args) -> int:
    from PIL import Image

    try:
        image = np.asarray(Image.open(args.image).convert("RGB"))
        preds = formats.load_predictions(args.pred)
    except OSError as exc:
        raise _Fail(f"cannot read input: {exc}", EXIT_IO) from None
    image_id = args.image_id or Path(args.image).stem
    match = [p for p in preds if p.image_id == image_id]
    if not match:
        raise _Fail(f"image_id {image_id!r} not found in {args.pred}")
    Image.fromarray(render_overlay(image, match[0])).save(args.out, format="PNG")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_loss_flags(p):
    p.add_argument("--level", choices=annotation.LEVELS, default="line")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--alpha-l", type=float, default=0.5)
    p.add_argument("--balancing", choices=("vanilla", "alpha", "focal"), default="alpha")
    p.add_argument("--focal-gamma", type=float, default=2.0)
    p.add_argument("--lambdas", type=float, nargs=4, default=(3.0, 1.0, 1.0, 1.0),
                   metavar=("DET", "LAY", "SEG", "INS"))
    p.add_argument("--exclude-diagonal", action="store_true",
                   help="drop self-pairs from the layout loss")
    p.add_argument("--out", help="write JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a ground-truth JSON file")
    p.add_argument("gt")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("gt", nargs="+", help="one or more ground-truth files, pooled")
    p.add_argument("--out")
    p.add_argument("--no-heatmap", action="store_true", help="skip the word-location heat map")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("decode", help="decode detector tensors into a prediction file")
    p.add_argument("manifest")
    p.add_argument("--out")
    p.add_argument("--tm", type=float, default=0.4)
    p.add_argument("--tc", type=float, default=0.5)
    p.add_argument("--ta", type=float, default=0.5)
    p.add_argument("--min-pixels", type=int, default=32)
    p.add_argument("--upsample", type=int, nargs="?", const=4, default=0,
                   help="nearest-neighbour upsampling factor for output masks (default 4 if given)")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="Panoptic Quality of predictions against ground truth")
    p.add_argument("gt")
    p.add_argument("pred")
    p.add_argument("--level", choices=annotation.LEVELS, default="line")
    p.add_argument("--include-illegible", action="store_true",
                   help="score illegible entities as regular targets instead of don't-care")
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("loss", help="training losses of detector tensors against ground truth")
    p.add_argument("manifest")
    p.add_argument("gt")
    p.add_argument("--l-seg", type=float, default=0.0)
    p.add_argument("--l-ins", type=float, default=0.0)
    _add_loss_flags(p)
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("grad-check", help="finite-difference check of the loss gradients")
    p.add_argument("--manifest")
    p.add_argument("--gt")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--n", type=int, default=4, help="max queries per random instance")
    p.add_argument("--size", type=int, default=8, help="random mask side length")
    p.add_argument("--max-pixels", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _add_loss_flags(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("render", help="overlay predicted entities on an image")
    p.add_argument("image")
    p.add_argument("pred")
    p.add_argument("out")
    p.add_argument("--image-id", help="defaults to the image file stem")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
