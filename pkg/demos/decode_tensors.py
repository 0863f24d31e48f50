# From detector tensors to words and paragraphs
#
# The detector emits N soft masks that sum to one at each pixel, a textness
# score per query and an N x N affinity between queries.  Decoding takes
# the per-pixel argmax, keeps confident pixels, drops weak or tiny
# entities, then links entities whose affinity clears a threshold.

import numpy as np

from hierkit import decoder, synthetic
from hierkit.decoder import DecodeParams

rng = np.random.default_rng(3)
ann = synthetic.random_annotation(rng, "demo", width=64, height=64)

# Build "perfect" tensors from the annotation: one-hot masks, textness 1 on
# real entities, affinity 1 inside a paragraph.  The last query soaks up
# the background.
tensors, derived = decoder.tensors_from_annotation(ann, "line")
print("queries:", tensors.n, " lines:", len(derived))

pred = decoder.decode(tensors)
print("decoded:", len(pred.entities), "entities in", len(pred.partition()), "paragraphs")

# Make it realistic: blur the masks toward uniform and squash the affinity
# toward 0.5 with noise.  The paragraph count now depends on t_a.
noisy_masks = 0.7 * tensors.masks + 0.3 / tensors.n
a = np.clip(0.3 + 0.4 * tensors.affinity + rng.normal(scale=0.15, size=tensors.affinity.shape), 0, 1)
noisy = decoder.DetectionTensors(noisy_masks, tensors.textness * 0.9, (a + a.T) / 2)

for t_a in (0.3, 0.5, 0.8):
    p = decoder.decode(noisy, DecodeParams(t_a=t_a))
    print(f"t_a={t_a}: {len(p.entities)} entities, {len(p.partition())} paragraphs")

# Raising t_c above every textness leaves nothing.
print("t_c=0.95:", len(decoder.decode(noisy, DecodeParams(t_c=0.95)).entities), "entities")
