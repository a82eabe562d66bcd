"""Explanation and classification quality measures.

Activation Precision asks: of the pixels the explanation marks as
relevant (the top tau percent of heatmap values), how many fall inside
the annotated relevant region?  Ranks are all that matter, so any
strictly monotone rescaling of the heatmap leaves the score unchanged.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .data import LabeledImage, stack_pixels
from .errors import ContractError, DimensionError
from .model import Classifier, predict
from .saliency import Heatmap, gradcam_batch

__all__ = [
    "threshold_top_tau",
    "activation_precision",
    "dataset_ap",
    "accuracy",
    "confusion",
    "heatmap_mass_fraction",
    "dataset_confounder_mass",
]

_AP_CHUNK = 128


def _values_of(h) -> np.ndarray:
    return h.values if isinstance(h, Heatmap) else np.asarray(h)


def threshold_top_tau(h, tau: float) -> np.ndarray:
    """Keep the top tau percent of values: 1 at or above the (100 - tau)
    percentile, 0 strictly below it.

    The percentile interpolates linearly between the two closest order
    statistics.  Ties at the threshold survive, so a constant map comes
    back all ones and the survivor count is never zero.
    """
    if not 0 < tau < 100:
        raise ContractError(f"tau must be in (0, 100), got {tau}")
    values = _values_of(h)
    flat = np.sort(values.ravel())
    pos = (flat.size - 1) * (100.0 - tau) / 100.0
    lo = math.floor(pos)
    frac = pos - lo
    if frac == 0.0:
        threshold = flat[lo]
    elif frac < 0.5:
        threshold = flat[lo] + (flat[lo + 1] - flat[lo]) * frac
    else:
        # evaluated from the upper end for the same rounding the sorted
        # order statistics would give when approached from above
        threshold = flat[lo + 1] - (flat[lo + 1] - flat[lo]) * (1.0 - frac)
    return (values >= threshold).astype(np.uint8)


def activation_precision(h, mask: np.ndarray, tau: float) -> float:
    """Fraction of top-tau survivor pixels that land inside the mask."""
    values = _values_of(h)
    mask = np.asarray(mask)
    if mask.shape != values.shape:
        raise DimensionError(
            f"mask shape {mask.shape} does not match heatmap {values.shape}")
    survivors = threshold_top_tau(values, tau)
    kept = int(survivors.sum())
    inside = int((survivors & (mask != 0)).sum())
    return inside / kept


def dataset_ap(model: Classifier, data: Sequence[LabeledImage],
               tau: float = 5.0) -> float:
    """Mean Activation Precision over instances, explained at the
    predicted class, scored against each instance's relevance mask."""
    data = list(data)
    if not data:
        raise ContractError("dataset_ap needs at least one instance")
    missing = [i for i, im in enumerate(data) if im.relevance_mask is None]
    if missing:
        raise ContractError(
            f"instances missing relevance masks: {missing}")
    total = 0.0
    for start in range(0, len(data), _AP_CHUNK):
        chunk = data[start:start + _AP_CHUNK]
        heatmaps = gradcam_batch(model, stack_pixels(chunk))
        for im, hm in zip(chunk, heatmaps):
            total += activation_precision(hm, im.relevance_mask, tau)
    return total / len(data)


def _predicted_labels(model: Classifier, data: Sequence[LabeledImage]) -> np.ndarray:
    if not data:
        raise ContractError("need at least one instance")
    probs = predict(model, stack_pixels(list(data)))
    return probs.argmax(axis=1)


def accuracy(model: Classifier, data: Sequence[LabeledImage]) -> float:
    predicted = _predicted_labels(model, data)
    labels = np.array([im.label for im in data])
    return float((predicted == labels).mean())


def confusion(model: Classifier, data: Sequence[LabeledImage]) -> np.ndarray:
    """Count matrix: rows are true classes, columns predicted classes."""
    predicted = _predicted_labels(model, data)
    k = model.cfg.num_classes
    out = np.zeros((k, k), dtype=np.int64)
    for im, p in zip(data, predicted):
        out[im.label, p] += 1
    return out


def heatmap_mass_fraction(h, mask: np.ndarray) -> float:
    """Share of total heatmap mass inside the masked region.

    An all-zero heatmap carries no mass anywhere and scores 0.
    """
    values = _values_of(h)
    mask = np.asarray(mask)
    if mask.shape != values.shape:
        raise DimensionError(
            f"mask shape {mask.shape} does not match heatmap {values.shape}")
    total = float(values.sum())
    if total == 0.0:
        return 0.0
    return float((values * (mask != 0)).sum()) / total


def dataset_confounder_mass(model: Classifier, data: Sequence[LabeledImage]) -> float:
    """Mean heatmap mass falling on annotated confounder regions."""
    data = list(data)
    if not data:
        raise ContractError("dataset_confounder_mass needs at least one instance")
    missing = [i for i, im in enumerate(data) if im.confounder_mask is None]
    if missing:
        raise ContractError(
            f"instances missing confounder masks: {missing}")
    total = 0.0
    for start in range(0, len(data), _AP_CHUNK):
        chunk = data[start:start + _AP_CHUNK]
        heatmaps = gradcam_batch(model, stack_pixels(chunk))
        for im, hm in zip(chunk, heatmaps):
            total += heatmap_mass_fraction(hm, im.confounder_mask)
    return total / len(data)
