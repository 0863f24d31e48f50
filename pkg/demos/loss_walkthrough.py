# Training losses by hand
#
# Predictions are first matched one-to-one to targets (padded with empty
# "no text" slots) by maximizing  textness x Dice.  The detection loss then
# rewards good positives and penalizes confident negatives, and the layout
# loss is a balanced cross-entropy on pairwise affinities.

import numpy as np

from hierkit import losses, matching
from hierkit.losses import LossConfig
from hierkit.matching import PredictionSlot, TargetSlot

h = w = 6
t0 = np.zeros((h, w), bool); t0[:3, :3] = True
t1 = np.zeros((h, w), bool); t1[3:, 3:] = True
targets = matching.pad_targets([TargetSlot(t0, 1, 0), TargetSlot(t1, 1, 0)], 3)

preds = [PredictionSlot(np.full((h, w), 0.05), 0.1),
         PredictionSlot(0.9 * t1, 0.8),
         PredictionSlot(0.9 * t0 + 0.05, 0.7)]
sigma = matching.match(preds, targets)
print("assignment:", sigma.sigma, f"similarity {sigma.total_similarity:.3f}")

l_det = losses.detection_loss(preds, targets, sigma)
affinity = np.array([[0.9, 0.2, 0.3], [0.2, 0.9, 0.6], [0.3, 0.6, 0.9]])
for mode in ("vanilla", "alpha", "focal"):
    cfg = LossConfig(balancing_mode=mode)
    l_lay = losses.layout_loss(affinity, targets, sigma, cfg)
    print(f"{mode:7s} L_det {l_det:+.4f}  L_lay {l_lay:.4f}  total {losses.total_loss(l_det, l_lay, cfg=cfg).total:+.4f}")

# The hand-written gradients treat the dotted factors of the detection loss
# as constants.  A finite-difference check confirms them.
inst = losses.random_instance(np.random.default_rng(0), 4, 8, 8)
print("max relative error, detection:", f"{losses.grad_check('detection', inst):.1e}")
print("max relative error, layout:   ", f"{losses.grad_check('layout', inst):.1e}")
