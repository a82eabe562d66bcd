"""
The decoy benchmark: a dataset with a built-in lie
==================================================

Each class is an oriented Gaussian bar, the genuine signal.  On the
confounded splits a small bright corner patch rides along whose position
and intensity encode the label perfectly, so a lazy classifier can skip
the bar entirely.  The two test splits then withdraw the lie: test_clean
has no patch at all, test_swapped pastes a patch drawn for a random
class.
"""

import numpy as np

from xbl.data import DecoySpec, generate_decoy_dataset, read_pgm, save_split

spec = DecoySpec(num_classes=4, image_size=24, train_per_class=6,
                 val_per_class=2, test_per_class=4, patch_size=4)
data = generate_decoy_dataset(spec, seed=0)

print("split sizes:",
      {name: len(getattr(data, name))
       for name in ("train", "validation", "test_clean", "test_swapped")})

# ---------------------------------------------------------------------------
# a look at one confounded instance


def ascii_panel(grid, levels=" .:-=+*#%@"):
    lo, hi = grid.min(), grid.max()
    span = (hi - lo) or 1.0
    idx = ((grid - lo) / span * (len(levels) - 1)).astype(int)
    return "\n".join("".join(levels[v] for v in row) for row in idx)


im = data.train[0]
print(f"\ntrain[0]: class {im.label}, pixels in [{im.pixels.min():.2f}, "
      f"{im.pixels.max():.2f}]")
print(ascii_panel(im.pixels))

# The relevance mask marks the bar (where a model SHOULD look); the
# confounder mask marks the injected patch (where it should not).
print("\nrelevance mask covers", int(im.relevance_mask.sum()), "pixels")
print("confounder mask covers", int(im.confounder_mask.sum()), "pixels")

# ---------------------------------------------------------------------------
# the confound only exists on the confounded splits

counts = [int(im.confounder_mask.sum()) for im in data.test_clean]
print("\ntest_clean confounder pixels per image:", sorted(set(counts)))

# On test_swapped the patch class is re-drawn uniformly, so its corner and
# intensity no longer agree with the label.
sw = data.test_swapped[0]
print(f"test_swapped[0]: label {sw.label}, patch pixels "
      f"{int(sw.confounder_mask.sum())}")

# ---------------------------------------------------------------------------
# round trip through the on-disk format

# Images and both masks travel as 8-bit PGM files plus a manifest, the
# same layout `xbl generate` writes.
import tempfile
from pathlib import Path

tmp = Path(tempfile.mkdtemp(prefix="decoy_demo_"))
save_split(tmp, data)
back = read_pgm(tmp / "train" / "class_0" / "img_0000.pgm")
first_class0 = next(im for im in data.train if im.label == 0)
print("\nPGM quantization error:",
      f"{np.abs(back - first_class0.pixels).max():.5f} (<= half a gray level)")
print("wrote", sum(1 for _ in tmp.rglob("*.pgm")), "PGM files under", tmp)
