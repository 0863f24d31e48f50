# Scoring detections with Panoptic Quality
#
# PQ = sum of matched IoUs / (TP + FP/2 + FN/2).  A prediction and a target
# match when their IoU exceeds 0.5, and illegible targets are don't-care:
# a prediction landing on one is simply ignored.

import numpy as np

from hierkit import annotation, metrics, synthetic

rng = np.random.default_rng(7)
gts = synthetic.random_ground_truth(rng, 5, illegible_prob=0.2)
print(annotation.dataset_stats(gts, heatmap=False)["num_words"], "words in", len(gts.annotations), "images")

# Ground truth scored against itself is perfect at every level.  Paragraph
# predictions are line entities carrying a cluster id; their union per
# cluster is what gets compared.
for level in annotation.LEVELS:
    preds = metrics.ground_truth_as_predictions(gts, level)
    r = metrics.evaluate_dataset(preds, gts, level)
    print(f"{level:9s} PQ {r.pq:.3f}  TP {r.tp}")

# Now damage the word predictions: drop every third entity and erode the
# rest by one row.  Recall falls, and tightness falls with the erosion.
damaged = []
for p in metrics.ground_truth_as_predictions(gts, "word"):
    kept = []
    for e in p.entities:
        if e.id % 3 == 0:
            continue
        rows = np.flatnonzero(e.mask.any(axis=1))
        m = e.mask.copy()
        m[rows[0]] = False
        kept.append(type(e)(e.id, m, e.score, e.cluster))
    damaged.append(p.with_entities(kept))

r = metrics.evaluate_dataset(damaged, gts, "word")
print(f"damaged   PQ {r.pq:.3f} = F1 {r.f1:.3f} x T {r.tightness:.3f}  (TP {r.tp} FP {r.fp} FN {r.fn})")
