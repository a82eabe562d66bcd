"""Gradient-weighted class evidence maps and explanation products.

A heatmap for class c weighs each final-stage feature channel by the
spatial mean of d(logit_c)/d(channel), sums the weighted channels, clips
at zero, resamples bilinearly to input resolution and rescales so the
peak sits at exactly 1.0.  The explanation product is that map times the
input image: the pixels the model actually leaned on, in pixel units.

Two routes share the arithmetic:

* :func:`gradcam` / :func:`gradcam_batch` run outside any recording graph
  and return plain arrays for inspection and scoring.
* :func:`attention_products` re-expresses the map inside a caller's live
  graph so a loss built on it can push gradients back into the feature
  extractor.  Channel weights and the normalization divisor enter that
  graph as constants captured from a separate evaluation pass: treating
  them as locally constant keeps every recorded op first-order, which is
  all the tape can differentiate.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import Tensor, bilinear_matrix, constant, op_forward
from .data import write_pgm
from .errors import ContractError, DimensionError
from .model import Classifier, class_score_gradients

__all__ = [
    "Heatmap",
    "cam_from_features",
    "gradcam",
    "gradcam_batch",
    "explanation_product",
    "save_triptych",
    "AttentionPlan",
    "plan_attention",
    "attention_products",
]


@dataclass(frozen=True)
class Heatmap:
    """Normalized class-evidence map at input resolution.

    ``values`` lies in [0, 1] with max exactly 1.0, except for the
    degenerate all-zero map (``raw_max == 0``) which stays all zero.
    ``raw_max`` is the pre-normalization peak, i.e. the divisor used.
    """

    values: np.ndarray
    source_class: int
    raw_max: float


def cam_from_features(features: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Raw evidence maps at feature resolution: relu(sum_k alpha_k A_k).

    ``alpha_k`` is the spatial mean of the gradient for channel k.  Inputs
    are (N, C, h, w); the result is (N, h, w), non-negative, un-normalized.
    """
    features = np.asarray(features)
    grads = np.asarray(grads)
    if features.ndim != 4 or features.shape != grads.shape:
        raise DimensionError(
            f"expected matching (N, C, h, w) arrays, got {features.shape} and {grads.shape}")
    alphas = grads.mean(axis=(2, 3))
    cam = np.einsum("nc,nchw->nhw", alphas, features, optimize=True)
    return np.maximum(cam, 0.0)


def _upsample_maps(maps: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    ly = bilinear_matrix(out_h, maps.shape[1], dtype=maps.dtype)
    lx = bilinear_matrix(out_w, maps.shape[2], dtype=maps.dtype)
    return np.einsum("ab,cd,nbd->nac", ly, lx, maps, optimize=True)


def gradcam_batch(
    model: Classifier,
    images: np.ndarray,
    class_indices: Sequence[int] | np.ndarray | None = None,
) -> list[Heatmap]:
    """One heatmap per image, for its predicted class unless indices are given."""
    batch = model.as_input_batch(images)
    feats, grads, _, classes = class_score_gradients(model, batch, class_indices)
    raw = cam_from_features(feats, grads)
    up = _upsample_maps(raw, batch.shape[2], batch.shape[3])
    out = []
    for i in range(up.shape[0]):
        peak = float(up[i].max())
        if peak > 0.0:
            values = (up[i] / peak).astype(np.float32)
        else:
            values = np.zeros_like(up[i], dtype=np.float32)
        out.append(Heatmap(values=values, source_class=int(classes[i]), raw_max=peak))
    return out


def gradcam(model: Classifier, image: np.ndarray,
            class_index: int | None = None) -> Heatmap:
    indices = None if class_index is None else [int(class_index)]
    return gradcam_batch(model, np.asarray(image)[None], indices)[0]


def explanation_product(image: np.ndarray, heatmap: Heatmap) -> np.ndarray:
    """Pixelwise image * heatmap, the explanation in image units."""
    image = np.asarray(image)
    if image.shape != heatmap.values.shape:
        raise DimensionError(
            f"image shape {image.shape} does not match heatmap {heatmap.values.shape}")
    return (image * heatmap.values).astype(np.float32)


def save_triptych(path, image: np.ndarray, heatmap: Heatmap) -> np.ndarray:
    """Write image | heatmap | product side by side as one PGM panel.

    Panels are separated by single full-white columns, so the panel is
    (H, 3W + 2).  Returns the composed grid.
    """
    image = np.asarray(image, dtype=np.float32)
    product = explanation_product(image, heatmap)
    sep = np.ones((image.shape[0], 1), dtype=np.float32)
    panel = np.concatenate([image, sep, heatmap.values, sep, product], axis=1)
    write_pgm(path, panel)
    return panel


# ---------------------------------------------------------------------------
# in-graph route


class AttentionPlan(NamedTuple):
    """Frozen per-image coefficients captured from an evaluation pass."""

    alphas: np.ndarray    # (N, C) channel weights
    divisors: np.ndarray  # (N,) normalization constants, strictly positive
    classes: np.ndarray   # (N,) class each map explains


def plan_attention(
    model: Classifier,
    images: np.ndarray,
    class_indices: Sequence[int] | np.ndarray | None = None,
) -> AttentionPlan:
    """Capture channel weights and divisors for :func:`attention_products`.

    The divisor is the upsampled raw map's peak plus a small floor, so
    dividing stays safe when a map is identically zero.
    """
    batch = model.as_input_batch(images)
    feats, grads, _, classes = class_score_gradients(model, batch, class_indices)
    alphas = grads.mean(axis=(2, 3))
    raw = cam_from_features(feats, grads)
    up = _upsample_maps(raw, batch.shape[2], batch.shape[3])
    divisors = up.max(axis=(1, 2)) + 1e-8
    return AttentionPlan(alphas=alphas, divisors=divisors, classes=classes)


def attention_products(plan: AttentionPlan, feature: Tensor,
                       images: np.ndarray) -> Tensor:
    """Differentiable explanation products inside the active graph.

    ``feature`` must be the feature-stage activation (N, C, h, w) recorded
    in the caller's graph; gradients flow through it into the extractor.
    ``images`` are the matching inputs, entered as a constant.  Returns an
    (N, 1, H, W) tensor of heatmap * image products.
    """
    n, c, h, w = feature.data.shape
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4 or images.shape[0] != n:
        raise DimensionError(
            f"images shape {images.shape} does not pair with feature batch {n}")
    if plan.alphas.shape != (n, c):
        raise ContractError(
            f"plan covers {plan.alphas.shape}, feature needs {(n, c)}; "
            "rebuild the plan for this batch")
    dt = feature.data.dtype
    out_h, out_w = images.shape[2], images.shape[3]
    alpha = constant(plan.alphas.reshape(n, c, 1, 1).astype(dt), name="cam.alpha")
    weighted = op_forward("elementwise_mul", (feature, alpha))
    summed = op_forward("sum", (weighted,), {"axis": 1, "keepdims": True})
    raw = op_forward("relu", (summed,))
    up = op_forward("upsample_bilinear", (raw,), {"out_h": out_h, "out_w": out_w})
    inv = constant((1.0 / plan.divisors).reshape(n, 1, 1, 1).astype(dt), name="cam.scale")
    normalized = op_forward("elementwise_mul", (up, inv))
    pixels = constant(images.astype(dt), name="cam.pixels")
    return op_forward("elementwise_mul", (normalized, pixels))
