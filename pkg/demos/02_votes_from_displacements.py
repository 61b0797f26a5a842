"""From a displacement field to detections.

Every pixel votes for the location its displacement points at. Features
are the peaks of the vote map. Here the field is built by hand: each pixel
points at the nearest of a few planted anchors, plus Gaussian noise, so
the effect of regression error on localization is visible.

    python3 demos/02_votes_from_displacements.py [noise_px]
"""

import sys

import numpy as np

from covdet import detect

noise = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0
rng = np.random.default_rng(0)
h, w = 96, 128
anchors = np.array([[20.0, 20.0], [64.5, 30.25], [100.0, 70.0], [30.0, 75.5], [75.0, 80.0]])

yy, xx = np.mgrid[0:h, 0:w].astype(float)
d2 = (xx[..., None] - anchors[:, 0]) ** 2 + (yy[..., None] - anchors[:, 1]) ** 2
near = np.argmin(d2, axis=-1)
values = np.stack([anchors[near, 0] - xx, anchors[near, 1] - yy], axis=-1)
values += rng.normal(scale=noise, size=values.shape)
field = detect.DisplacementField(values, np.ones((h, w), dtype=bool))

votes = detect.accumulate_votes(field)
dets = detect.detect_from_field(field, max_detections=len(anchors))
print(f"displacement noise {noise} px, total votes {votes.sum():.0f}")
for d in dets:
    err = np.hypot(anchors[:, 0] - d.x, anchors[:, 1] - d.y).min()
    print(f"  detection ({d.x:6.2f}, {d.y:6.2f})  votes {d.confidence:7.1f}  error {err:.2f} px")
