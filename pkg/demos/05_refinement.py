"""
Refining with two exemplary explanations
========================================

Refinement needs no pixel-level feedback on every image.  It takes just
two frozen exemplars from the model's own ranked explanations, the best
and the worst, and adds a triplet term to the loss: every instance's
explanation product should sit closer to the good exemplar than to the
bad one, by a margin.  Attention migrates off the corner patch while
cross-entropy keeps the classifier a classifier.
"""

import dataclasses
import tempfile
from pathlib import Path

from xbl.config import RunConfig
from xbl.data import generate_decoy_dataset
from xbl.exemplar import load_exemplars, select_exemplars
from xbl.metrics import accuracy, dataset_ap, dataset_confounder_mass
from xbl.model import build_classifier
from xbl.train import fit

# Seed 1 of this miniature setup yields a heavily patch-driven model,
# which makes the before/after contrast easy to see in half a minute.
cfg = RunConfig(train_per_class=48, val_per_class=12, test_per_class=32,
                epochs_unrefined=25, batch_size=16, lr=5e-4, seed=1,
                output_dir="unused")
data = generate_decoy_dataset(cfg.decoy_spec(), seed=cfg.seed)
model = build_classifier(cfg.model_config())
fit(model, data.train, data.validation, cfg, epochs=cfg.epochs_unrefined,
    loss_mode="ce_only", rng_tag="demo-shortcut")

before = {
    "accuracy": accuracy(model, data.test_clean),
    "AP": dataset_ap(model, data.test_clean, tau=cfg.tau),
    "confounder mass": dataset_confounder_mass(model, data.test_swapped),
}
print("unrefined model, clean-split accuracy "
      f"{before['accuracy']:.3f}, AP {before['AP']:.3f}, "
      f"swapped-split confounder mass {before['confounder mass']:.4f}")

# ---------------------------------------------------------------------------
# pick and persist the exemplars

out_dir = Path(tempfile.mkdtemp(prefix="refine_demo_")) / "exemplars"
pair = select_exemplars(model, data.train, policy="auto", tau=cfg.tau,
                        out_dir=out_dir)
print(f"\nauto-selected exemplars: good from train[{pair.good_source_id}], "
      f"bad from train[{pair.bad_source_id}]")
print("persisted alongside a manifest:",
      sorted(p.name for p in out_dir.iterdir()))

# The pair reloads bit-identically, so a later `xbl refine` run can reuse
# the very same targets.
reloaded = load_exemplars(out_dir)
print("reload matches:",
      (reloaded.c_good.data == pair.c_good.data).all()
      and (reloaded.c_bad.data == pair.c_bad.data).all())

# ---------------------------------------------------------------------------
# triplet refinement

rcfg = dataclasses.replace(cfg, lr=1e-4, loss_mode="exbl")
result = fit(model, data.train, data.validation, rcfg, epochs=40,
             loss_mode="exbl", exemplars=pair, rng_tag="demo-refine")
print(f"\nrefined for {len(result.records)} epochs "
      f"(early stop: {result.stopped_early})")

after = {
    "accuracy": accuracy(model, data.test_clean),
    "AP": dataset_ap(model, data.test_clean, tau=cfg.tau),
    "confounder mass": dataset_confounder_mass(model, data.test_swapped),
}
for key in before:
    print(f"{key:16s} {before[key]:.4f} -> {after[key]:.4f}")

print("\nAttention moved: AP climbs and the patch loses most of its heat. "
      "At this miniature scale accuracy stays where it was; recovering it "
      "takes the full experiment scale the acceptance tests run (where the "
      "clean-split accuracy typically holds or improves).")
