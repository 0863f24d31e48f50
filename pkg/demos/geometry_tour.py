# Polygons, masks and run-length codes
#
# Every text entity starts life as a polygon in image coordinates.  Scoring
# happens on pixels, so the first step is always rasterization: a pixel
# belongs to the polygon when its center (x + 0.5, y + 0.5) is inside,
# using the even-odd rule.

import numpy as np

from hierkit import geometry
from hierkit.geometry import Polygon

# A slanted word box on a 12x8 canvas.
word = Polygon(((1.0, 1.0), (10.0, 2.0), (9.5, 6.0), (0.5, 5.0)))
mask = geometry.rasterize(word, 12, 8)
print(mask.astype(int))
print("pixels:", int(mask.sum()))

# Self-intersecting outlines are legal.  A bow-tie fills both lobes, and
# nothing is filled where the outline crosses itself an even number of times.
bowtie = geometry.rasterize(((0, 0), (8, 8), (8, 0), (0, 8)), 8, 8)
print(bowtie.astype(int))

# Overlap measures.  IoU drives the evaluation; Dice drives the training
# similarity.  For binary masks they are tied by Dice = 2 IoU / (1 + IoU).
shifted = np.roll(mask, 1, axis=1)
i, d = geometry.iou(mask, shifted), geometry.dice(mask, shifted)
print(f"IoU {i:.3f}  Dice {d:.3f}  2i/(1+i) {2 * i / (1 + i):.3f}")

# Masks travel in JSON as row-major run lengths that begin with a
# background run, so an all-foreground mask starts with a 0.
rle = geometry.rle_encode(mask)
print(rle.to_json())
assert np.array_equal(geometry.rle_decode(rle), mask)
