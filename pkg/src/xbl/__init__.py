"""Exemplar-guided explanation refinement for small convolutional classifiers.

The package trains a compact CNN on a synthetic "decoy" benchmark whose
class label is leaked through a corner patch, exposes the resulting
shortcut with GradCAM saliency, and then refines the model with a
triplet-style explanation loss anchored on one good and one bad exemplar
explanation.  Activation precision quantifies how much of the model's
saliency lands on genuinely class-relevant pixels before and after
refinement.
"""

from .autodiff import (
    Graph,
    Tensor,
    backward,
    constant,
    finite_diff_check,
    load_checkpoint,
    op_forward,
    parameter,
    save_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "constant",
    "finite_diff_check",
    "load_checkpoint",
    "op_forward",
    "parameter",
    "save_checkpoint",
    "__version__",
]
