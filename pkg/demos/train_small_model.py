"""
Training a small straightening model
====================================

A reduced generator and a two-block ViT-Patch discriminator trained for a
few epochs on 96 px pairs.  The full-size default run takes tens of minutes
on CPU; this one takes seconds and shows the moving parts:
checkpoints, the metrics log and straightening with a paired driving image.
"""
import csv
import tempfile
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from chromstraight.synthdata import DataConfig, load_pairs, make_dataset
from chromstraight.training import ModelConfig, TrainConfig, pairs_to_tensors, straighten_batch, train_loop

root = Path(tempfile.mkdtemp())
make_dataset(DataConfig(n_train=8, n_test=4, n_pool=0, num_types=4, image_size=96, seed=1), root / "data")
train, test = load_pairs(root / "data", "train"), load_pairs(root / "data", "test")

model = ModelConfig(regions=4, heatmap_size=32, image_size=96, blocks=2, embed_dim=48, heads=3)
result = train_loop(TrainConfig(epochs=6, milestones=(4,), seed=1), model, train, root / "run",
                    val_pairs=test, log=print)

###############################################################################
# The metrics log has one row per epoch, plus the untrained epoch 0.

with open(root / "run" / "reports" / "metrics.csv") as fh:
    for r in csv.DictReader(fh):
        print(r["epoch"], r["val_perceptual"])

###############################################################################
# Straighten the held-out sources, driving each with its straight partner.

src, drv = pairs_to_tensors(test)
out = straighten_batch(result.state.generator, src, drv)
fig, axes = plt.subplots(len(test), 3, figsize=(6, 2.2 * len(test)))
for row, s, d, o in zip(axes, src[:, 0], drv[:, 0], out[:, 0]):
    for ax, img, title in zip(row, (s, o, d), ("source", "straightened", "target")):
        ax.imshow(img.numpy(), cmap="gray", vmin=0, vmax=1)
        ax.set_title(title, fontsize=8)
        ax.axis("off")
fig.tight_layout()
fig.savefig("small_model.png", dpi=90)
print("wrote small_model.png")
