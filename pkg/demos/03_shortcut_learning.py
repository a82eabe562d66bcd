"""
Watching a classifier take the bait
===================================

Train a small CNN with plain cross-entropy on the confounded decoy set
and it aces training while quietly keying on the corner patch.  The two
held-out splits expose the habit: accuracy survives on neither the
patch-free images nor the patch-shuffled ones.
"""

import numpy as np

from xbl.config import RunConfig
from xbl.data import corner_rule_accuracy, generate_decoy_dataset
from xbl.metrics import accuracy, confusion
from xbl.model import build_classifier
from xbl.train import fit

# Reduced counts, fewer epochs, and a hotter learning rate keep this demo
# under ten seconds; the default experiment scale lives in the acceptance
# tests.
cfg = RunConfig(train_per_class=24, val_per_class=8, test_per_class=24,
                epochs_unrefined=20, batch_size=16, lr=1e-3, seed=0,
                output_dir="unused")

data = generate_decoy_dataset(cfg.decoy_spec(), seed=cfg.seed)
model = build_classifier(cfg.model_config())

# ---------------------------------------------------------------------------
# how strong is the shortcut on its own?

# A trivial hand-written rule that reads only the brightest corner tells
# us what the patch alone is worth on each split.
spec = cfg.decoy_spec()
print("corner-rule accuracy, train:      ",
      f"{corner_rule_accuracy(data.train, spec):.3f}")
print("corner-rule accuracy, test_swapped:",
      f"{corner_rule_accuracy(data.test_swapped, spec):.3f}")

# ---------------------------------------------------------------------------
# cross-entropy training

result = fit(model, data.train, data.validation, cfg,
             epochs=cfg.epochs_unrefined, loss_mode="ce_only",
             rng_tag="demo-shortcut")
print(f"\ntrained {len(result.records)} epochs "
      f"(best validation loss {result.best_val_loss:.4f})")

for split_name in ("train", "test_clean", "test_swapped"):
    acc = accuracy(model, getattr(data, split_name))
    print(f"accuracy on {split_name:12s} {acc:.3f}")

# ---------------------------------------------------------------------------
# where do the swapped predictions go?

# Rows are true classes, columns predictions.  A patch-driven model sends
# each swapped image to the class its transplanted patch advertises, so
# the mass smears off the diagonal.
print("\nconfusion on test_swapped:")
print(confusion(model, data.test_swapped))

print("\nThe gap between train and the two test splits is the shortcut: "
      "the model learned the patch, not the bar.")
