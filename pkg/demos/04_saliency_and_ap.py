"""
Catching the model red-handed with GradCAM
==========================================

Saliency turns the shortcut from a suspicion into a picture.  GradCAM
weights the last conv features by their class-score gradients, giving a
heatmap of where the evidence for a class came from.  Activation
Precision (AP) scores that picture: the fraction of the top tau percent
of saliency pixels that land inside the ground-truth relevant region.
Ranking a trained model's explanations by AP finds both its best habit
and its worst.
"""

import tempfile
from pathlib import Path

import numpy as np

from xbl.config import RunConfig
from xbl.data import generate_decoy_dataset
from xbl.exemplar import rank_explanations
from xbl.metrics import (activation_precision, dataset_ap,
                         dataset_confounder_mass, heatmap_mass_fraction)
from xbl.model import build_classifier
from xbl.saliency import explanation_product, gradcam, save_triptych
from xbl.train import fit

cfg = RunConfig(train_per_class=24, val_per_class=8, test_per_class=24,
                epochs_unrefined=20, batch_size=16, lr=1e-3, seed=0,
                output_dir="unused")
data = generate_decoy_dataset(cfg.decoy_spec(), seed=cfg.seed)
model = build_classifier(cfg.model_config())
fit(model, data.train, data.validation, cfg, epochs=cfg.epochs_unrefined,
    loss_mode="ce_only", rng_tag="demo-shortcut")

# ---------------------------------------------------------------------------
# rank every training explanation by AP

ranking = rank_explanations(model, data.train, tau=cfg.tau)
(best_idx, best_ap), (worst_idx, worst_ap) = ranking[0], ranking[-1]
print(f"ranked {len(ranking)} training explanations at tau={cfg.tau}")
print(f"best:  index {best_idx}, AP {best_ap:.3f}")
print(f"worst: index {worst_idx}, AP {worst_ap:.3f}")


def ascii_panel(grid, levels=" .:-=+*#%@"):
    lo, hi = grid.min(), grid.max()
    span = (hi - lo) or 1.0
    idx = ((grid - lo) / span * (len(levels) - 1)).astype(int)
    return "\n".join("".join(levels[v] for v in row) for row in idx)


# ---------------------------------------------------------------------------
# the two habits, up close

# The best explanation concentrates its heat on the bar.  The worst puts
# its sharpest pixels somewhere else entirely; note how much of its mass
# sits on the tiny corner patch relative to the patch's area share.
for title, idx in (("best", best_idx), ("worst", worst_idx)):
    im = data.train[idx]
    heat = gradcam(model, im.pixels)
    ap = activation_precision(heat, im.relevance_mask, tau=cfg.tau)
    patch_share = heatmap_mass_fraction(heat, im.confounder_mask)
    print(f"\n--- {title} (true class {im.label}, explained class "
          f"{heat.source_class}) ---")
    print(ascii_panel(heat.values))
    print(f"AP {ap:.3f}   heat mass on patch {patch_share:.3f} "
          f"(patch area share {im.confounder_mask.mean():.3f})")

# ---------------------------------------------------------------------------
# split-level summaries

print("\ndataset AP, test_clean:   ", f"{dataset_ap(model, data.test_clean):.4f}")
print("confounder mass, swapped: ",
      f"{dataset_confounder_mass(model, data.test_swapped):.4f}")

# ---------------------------------------------------------------------------
# shareable panels

# The same pictures travel as PGM triptychs: image | heatmap | product.
# The product (image * heatmap) is the "explanation in image units" that
# refinement will later compare against exemplars.
out = Path(tempfile.mkdtemp(prefix="saliency_demo_"))
best_im = data.train[best_idx]
best_heat = gradcam(model, best_im.pixels)
panel = save_triptych(out / "best.pgm", best_im.pixels, best_heat)
print(f"\nwrote image|heatmap|product panel {panel.shape} to {out / 'best.pgm'}")
product = explanation_product(best_im.pixels, best_heat)
print("low-heat pixels go dark in the product:",
      f"{(product < 0.05).mean():.2f} of pixels below 0.05")
