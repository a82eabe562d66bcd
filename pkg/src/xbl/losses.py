"""Training objectives: cross-entropy, weight decay, and explanation losses.

The refinement loss treats saliency as something to be steered, not just
observed.  Each batch instance's explanation product (image times its
evidence map, built in the live graph) is pulled toward one fixed good
exemplar explanation and pushed away from one fixed bad one through a
margin hinge on Euclidean distances.  The exemplar products never receive
gradient: they are anchors, not parameters.

The input-gradient penalty keeps its exact value by a dedicated backward
pass on a private graph.  Its parameter gradient cannot be expressed on a
first-order tape (it is a gradient of a gradient), so the recorded term
is a directional finite-difference surrogate that shares the exact value
and approximates the true parameter gradient; see :func:`rrr_loss`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import (Graph, Tensor, add, backward, constant, op_forward,
                       preserve_grads, scale)
from .data import LabeledImage, stack_pixels
from .errors import ContractError, DimensionError, GraphError
from .model import Classifier
from .saliency import Heatmap, attention_products, plan_attention

__all__ = [
    "LossWeights",
    "ExemplarPair",
    "cross_entropy",
    "l2_penalty",
    "mask_explanation_loss",
    "rrr_loss",
    "exbl_triplet_loss",
    "triplet_hinge",
    "total_loss",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_l2: float = 1e-4
    expl_scale: float = 1.0
    margin: float = 1.0

    def __post_init__(self):
        for field_name in ("lambda_l2", "expl_scale", "margin"):
            v = getattr(self, field_name)
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"{field_name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class ExemplarPair:
    """One good and one bad explanation product, fixed during refinement."""

    c_good: Tensor
    c_bad: Tensor
    good_source_id: str
    bad_source_id: str

    @classmethod
    def from_arrays(cls, good: np.ndarray, bad: np.ndarray,
                    good_source_id: str = "good", bad_source_id: str = "bad"):
        good = np.asarray(good, dtype=np.float32)
        bad = np.asarray(bad, dtype=np.float32)
        if good.shape != bad.shape or good.ndim != 2:
            raise DimensionError(
                f"exemplar products must share one 2-D shape, got {good.shape} and {bad.shape}")
        return cls(c_good=Tensor(good, requires_grad=False, name="exemplar.good"),
                   c_bad=Tensor(bad, requires_grad=False, name="exemplar.bad"),
                   good_source_id=good_source_id, bad_source_id=bad_source_id)


def cross_entropy(probabilities: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood; probabilities clipped to [1e-12, 1]."""
    probs = probabilities.data
    if probs.ndim != 2:
        raise DimensionError(f"expected (N, K) probabilities, got shape {probs.shape}")
    n, k = probs.shape
    row_gap = np.abs(probs.sum(axis=1) - 1.0).max()
    if row_gap > 1e-5:
        raise ContractError(
            f"probability rows must sum to 1 (worst gap {row_gap:.2e}); "
            "pass softmax outputs")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"{n} rows need {n} labels, got shape {labels.shape}")
    if (labels < 0).any() or (labels >= k).any():
        raise IndexError(f"label out of range for {k} classes")
    onehot = np.zeros((n, k), dtype=probs.dtype)
    onehot[np.arange(n), labels] = 1.0
    clipped_lo = op_forward("max_with_scalar", (probabilities,), {"value": 1e-12})
    # min(x, 1) spelled through max: -max(-x, -1)
    neg = scale(clipped_lo, -1.0)
    clipped = scale(op_forward("max_with_scalar", (neg,), {"value": -1.0}), -1.0)
    logs = op_forward("log", (clipped,))
    picked = op_forward("elementwise_mul", (logs, constant(onehot, name="ce.onehot")))
    total = op_forward("sum", (picked,))
    return scale(total, -1.0 / n)


def l2_penalty(params: Iterable[Tensor], lambda_l2: float) -> Tensor:
    """lambda * sum of squared entries over the given (trainable) tensors."""
    if lambda_l2 < 0:
        raise ContractError(f"lambda_l2 must be >= 0, got {lambda_l2}")
    acc: Tensor | None = None
    for p in params:
        sq = op_forward("square", (p,))
        term = op_forward("sum", (sq,))
        acc = term if acc is None else add(acc, term)
    if acc is None:
        return constant(0.0, name="l2.empty")
    return scale(acc, float(lambda_l2))


def _as_explanation_array(exp) -> np.ndarray:
    if isinstance(exp, Heatmap):
        return exp.values
    if isinstance(exp, Tensor):
        return exp.data
    return np.asarray(exp)


def mask_explanation_loss(masks: Sequence[np.ndarray], explanations: Sequence) -> Tensor:
    """Total explanation mass falling inside annotated (forbidden) regions.

    Sums mask * explanation over pixels and batch.  Explanations may be
    arrays, heatmaps, or live tensors; tensors keep their gradient path.
    """
    if len(masks) != len(explanations):
        raise DimensionError(
            f"{len(masks)} masks for {len(explanations)} explanations")
    acc: Tensor | None = None
    for i, (mask, exp) in enumerate(zip(masks, explanations)):
        exp_t = exp if isinstance(exp, Tensor) else constant(
            _as_explanation_array(exp), name=f"mexp.{i}")
        mask = np.asarray(mask)
        flat_shape = tuple(s for s in exp_t.data.shape if s != 1)
        if tuple(s for s in mask.shape if s != 1) != flat_shape:
            raise DimensionError(
                f"instance {i}: mask shape {mask.shape} does not cover "
                f"explanation shape {exp_t.data.shape}")
        mask_t = constant(mask.reshape(exp_t.data.shape).astype(exp_t.data.dtype),
                          name=f"mexp.mask{i}")
        overlap = op_forward("elementwise_mul", (exp_t, mask_t))
        term = op_forward("sum", (overlap,))
        acc = term if acc is None else add(acc, term)
    if acc is None:
        raise ContractError("mask_explanation_loss needs at least one instance")
    return acc


def _log_prob_sum_input_grad(model: Classifier, pixels: np.ndarray
                             ) -> tuple[float, np.ndarray]:
    """Value and input gradient of sum over instances and classes of log p."""
    from .autodiff import parameter

    with Graph(mode="eval") as g:
        x = parameter(pixels.astype(model.cfg.numpy_dtype()), name="rrr.x")
        fp = model.forward(x, train=False)
        clipped = op_forward("max_with_scalar", (fp.probs,), {"value": 1e-12})
        logs = op_forward("log", (clipped,))
        s = op_forward("sum", (logs,))
        # probe pass: only the input gradient is wanted, keep parameters clean
        with preserve_grads(t for _, t in model.named_params()):
            backward(g, s)
    return float(s.data), x.grad.copy()


def rrr_loss(model: Classifier, batch: Tensor | np.ndarray,
             masks: Sequence[np.ndarray]) -> Tensor:
    """Squared masked input gradient of the summed log class probabilities.

    The returned tensor's value is exact: the input gradient comes from a
    dedicated backward pass on a private graph.  Because the tape is
    first-order, the parameter-gradient path is a surrogate: with
    v = mask * input-gradient held constant, the directional difference
    (2/eps) * (S(x + eps*v) - S(x)) is recorded, whose parameter gradient
    approximates that of the true penalty to first order.  The surrogate
    contributes exactly zero to the forward value.
    """
    if Graph.current() is None:
        raise GraphError("rrr_loss records surrogate ops and needs an active graph")
    pixels = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    pixels = model.as_input_batch(pixels)
    n = pixels.shape[0]
    if len(masks) != n:
        raise ContractError(f"got {len(masks)} masks for a batch of {n}; "
                            "every instance needs its confounder mask")
    mask_stack = np.stack([np.asarray(m) for m in masks]).astype(pixels.dtype)
    if mask_stack.shape != (n, pixels.shape[2], pixels.shape[3]):
        raise DimensionError(
            f"mask stack shape {mask_stack.shape} does not match batch "
            f"{(n, pixels.shape[2], pixels.shape[3])}")
    mask_stack = mask_stack[:, None]  # (N,1,H,W) to pair with input layout

    _, input_grad = _log_prob_sum_input_grad(model, pixels)
    v = mask_stack * input_grad
    value = float((v.astype(np.float64) ** 2).sum())

    peak = float(np.abs(v).max())
    if peak == 0.0:
        return constant(np.asarray(value, dtype=pixels.dtype), name="rrr.value")
    eps = 1e-3 / peak

    def _log_prob_sum(x_data: np.ndarray, tag: str) -> Tensor:
        x = constant(x_data.astype(model.cfg.numpy_dtype()), name=f"rrr.{tag}")
        fp = model.forward(x, train=False)
        clipped = op_forward("max_with_scalar", (fp.probs,), {"value": 1e-12})
        logs = op_forward("log", (clipped,))
        return op_forward("sum", (logs,))

    s_plus = _log_prob_sum(pixels + eps * v, "xplus")
    s_base = _log_prob_sum(pixels, "xbase")
    surrogate = scale(op_forward("elementwise_sub", (s_plus, s_base)), 2.0 / eps)
    # value-neutral: surrogate minus its own detached value is exactly zero
    # in the forward pass but keeps the parameter-gradient path alive
    drift = op_forward("elementwise_sub",
                       (surrogate, constant(surrogate.data.copy(), name="rrr.anchor")))
    return add(constant(np.asarray(value, dtype=pixels.dtype), name="rrr.value"), drift)


def triplet_hinge(products: Tensor, exemplars: ExemplarPair, margin: float) -> Tensor:
    """Sum over instances of max(d_good - d_bad + margin, 0).

    ``products`` is the in-graph (N, 1, H, W) explanation-product tensor;
    distances are Euclidean over all pixels, unnormalized.
    """
    if margin < 0:
        raise ContractError(f"margin must be >= 0, got {margin}")
    shape = products.data.shape
    if len(shape) != 4 or shape[2:] != exemplars.c_good.data.shape:
        raise DimensionError(
            f"products shape {shape} does not match exemplar "
            f"shape {exemplars.c_good.data.shape}")
    dt = products.data.dtype

    def distance(ref: Tensor, tag: str) -> Tensor:
        ref_c = constant(ref.data.reshape(1, 1, *ref.data.shape).astype(dt),
                         name=f"triplet.{tag}")
        diff = op_forward("elementwise_sub", (products, ref_c))
        sq = op_forward("square", (diff,))
        ssum = op_forward("sum", (sq,), {"axis": (1, 2, 3)})
        return op_forward("sqrt", (ssum,))

    d_good = distance(exemplars.c_good, "good")
    d_bad = distance(exemplars.c_bad, "bad")
    gap = op_forward("elementwise_sub", (d_good, d_bad))
    shifted = add(gap, constant(np.asarray(margin, dtype=dt), name="triplet.margin"))
    terms = op_forward("max_with_scalar", (shifted,), {"value": 0.0})
    return op_forward("sum", (terms,))


def exbl_triplet_loss(model: Classifier, batch: Sequence[LabeledImage],
                      exemplars: ExemplarPair, margin: float) -> Tensor:
    """Pull each instance's explanation product toward the good exemplar.

    The evidence maps are rebuilt inside the active graph from the current
    parameters (channel weights and divisors captured from an evaluation
    pass), so the hinge's gradient reshapes the feature extractor.
    """
    if Graph.current() is None:
        raise GraphError("exbl_triplet_loss builds graph ops and needs an active graph")
    pixels = stack_pixels(list(batch))
    plan = plan_attention(model, pixels)
    x = constant(model.as_input_batch(pixels), dtype=model.cfg.numpy_dtype(),
                 name="triplet.x")
    feature = model.forward_features(x, train=False)
    products = attention_products(plan, feature, pixels)
    return triplet_hinge(products, exemplars, margin)


def total_loss(ce: Tensor, expl: Tensor, l2: Tensor, w: LossWeights) -> Tensor:
    """ce + expl_scale * expl + l2 (lambda already applied inside l2)."""
    return add(add(ce, scale(expl, w.expl_scale)), l2)
