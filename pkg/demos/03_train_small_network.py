"""
Training the desk-scale network
===============================

The full-width network is slow on a CPU, so this uses the narrow preset
with the same stage layout.  A few hundred steps on a handful of scenes is
enough to see the loss fall and targets appear in the confidence map.

    python3 demos/03_train_small_network.py [steps]
"""

import sys
import time

import numpy as np

from lpnet.datagen import DatasetSpec, sample_scene
from lpnet.detect import detect
from lpnet.metrics import evaluate
from lpnet.model import DESK_CONFIG, LPNet, param_count
from lpnet.train import TrainConfig, train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 60

pairs = [sample_scene(DatasetSpec(), 100 + i) for i in range(6)]
images = [np.round(p[0] * 255) / 255 for p in pairs]
masks = [p[1] for p in pairs]

model = LPNet(DESK_CONFIG, seed=0, dtype=np.float32)
print("parameters:", param_count(DESK_CONFIG))

cfg = TrainConfig(lr=3e-3, batch_size=2, steps=steps, schedule="cosine", recalibrate_bn=True)
t0 = time.time()
history = train(model, images, masks, cfg).history
print("%d steps in %.0fs" % (steps, time.time() - t0))
for row in history[:: max(1, steps // 6)]:
    print("  step %3d  attention %.4f  patch %.3f" % (row["step"], row["loss_a"],
                                                   row["mean_patch_loss"]))

# %%
# The attention density should now concentrate on the targets.

density = model.eval().attention_density(model.global_features(images[0])).data[0, 0]
model.train()
print("density mass on target pixels: %.3f" % density[masks[0]].sum())

conf = [model.predict(img) for img in images]
report = evaluate(conf, masks)
print("training-set pixel F1 %.3f, target F1 %.3f" % (report.pixel.f1, report.target.f1))
for d in detect(conf[0]):
    print("  image 0 detection at (%.1f, %.1f)" % d.centroid)
