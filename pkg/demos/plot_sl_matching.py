"""
Picking a driving chromosome by size, then appearance
=====================================================

Every test source needs a straight driving image.  Candidates are first
ranked by how close their midline length and width are to the source's, and
the three best are re-ranked by perceptual distance.
"""
import tempfile
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

from chromstraight import fileio
from chromstraight.morphometry import measure
from chromstraight.slmatch import CandidatePool, select_driving
from chromstraight.synthdata import DataConfig, make_dataset

out = Path(tempfile.mkdtemp())
make_dataset(DataConfig(n_train=0, n_test=3, n_pool=30, seed=4), out)
pool_images = {k: fileio.read_png(p) for k, p in fileio.list_images(out / "pool").items()}
pool = CandidatePool.from_images(pool_images)
sources = {k: fileio.read_png(p) for k, p in fileio.list_images(out / "test" / "source").items()}

###############################################################################
# Measurements of the first source, then the match for each source.

sid, src = sorted(sources.items())[0]
prof = measure(src)
print(f"{sid}: length {prof.length:.1f} px, width {prof.width:.0f} px, {len(prof.midpoints)} rows")

fig, axes = plt.subplots(len(sources), 4, figsize=(8, 2.3 * len(sources)))
for row, (sid, src) in zip(axes, sorted(sources.items())):
    res = select_driving(src, pool, sid)
    row[0].imshow(src, cmap="gray", vmin=0, vmax=1)
    row[0].set_title(sid, fontsize=8)
    for ax, cid, s1, s2 in zip(row[1:], res.top3_ids, res.phase1_scores, res.phase2_scores):
        ax.imshow(pool_images[cid], cmap="gray", vmin=0, vmax=1)
        mark = " *" if cid == res.chosen_id else ""
        ax.set_title(f"{cid}{mark}\nsize {s1:.3f}  perc {s2:.3f}", fontsize=7)
    for ax in row:
        ax.axis("off")
fig.tight_layout()
fig.savefig("sl_matching.png", dpi=90)
print("wrote sl_matching.png")
