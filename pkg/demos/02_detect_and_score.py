"""
From a confidence map to detections and scores
==============================================

No network here: the "confidence" is a blurred copy of the ground truth
plus clutter, which is enough to exercise thresholding, component
extraction, target matching and the threshold sweep.
"""

import numpy as np
from scipy import ndimage

from lpnet.datagen import DatasetSpec, sample_scene
from lpnet.detect import ThresholdSpec, adaptive_threshold, detect
from lpnet.metrics import evaluate

rng = np.random.default_rng(0)
confs, masks = [], []
for seed in range(8):
    _, mask = sample_scene(DatasetSpec(), seed)
    conf = ndimage.gaussian_filter(mask.astype(float), 0.8) * 2.5
    conf += 0.25 * ndimage.gaussian_filter(rng.random(mask.shape), 3)
    confs.append(np.clip(conf, 0, 0.999))
    masks.append(mask)

t, seg = adaptive_threshold(confs[0], ThresholdSpec(k=4, v_min=0.5))
print("adaptive threshold on image 0: %.3f, %d pixels above it" % (t, seg.sum()))
for d in detect(confs[0]):
    print("  detection at (%.1f, %.1f), area %d" % (*d.centroid, d.area))

# %%
# Sweeping 255 fixed thresholds gives the Pd-Fa curve; the best F1 over the
# sweep is reported at both target and pixel level.

report = evaluate(confs, masks, threshold_spec=ThresholdSpec())
print("Pd at Fa=0.2:", report.pd_at_fa)
print("AUC (Fa in [0, 2]): %.3f" % report.auc)
print("best target F1 %.3f at t=%.3f" % (report.target.f1, report.target.threshold))
print("best pixel  F1 %.3f at t=%.3f" % (report.pixel.f1, report.pixel.threshold))
print("adaptive operating point:", report.adaptive)
