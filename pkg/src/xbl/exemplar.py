"""Choosing the two anchor explanations that steer refinement.

The refinement loss needs exactly one good and one bad explanation
product.  The automatic policy formalizes "good" as the training instance
whose evidence map concentrates best on its relevance mask (highest
Activation Precision) and "bad" as the one that concentrates worst; a
manual policy accepts two instance ids instead.  Products are quantized
to 8-bit grey levels before the pair is built, so the persisted PGM files
reload bit-identically to what the loss saw.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LabeledImage, read_pgm, stack_pixels, write_pgm
from .errors import ContractError, SelectionError
from .losses import ExemplarPair
from .metrics import activation_precision
from .model import Classifier
from .saliency import explanation_product, gradcam_batch
from .utils import atomic_write_text

__all__ = [
    "model_checksum",
    "pair_checksum",
    "rank_explanations",
    "select_exemplars",
    "load_exemplars",
    "GOOD_FILE",
    "BAD_FILE",
    "MANIFEST_FILE",
]

GOOD_FILE = "exemplar_good.pgm"
BAD_FILE = "exemplar_bad.pgm"
MANIFEST_FILE = "exemplars.txt"


def model_checksum(model: Classifier) -> str:
    """Order-sensitive digest of every named weight array."""
    h = hashlib.sha256()
    for name, tensor in model.named_params():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensor.data).tobytes())
    return h.hexdigest()


def pair_checksum(pair: ExemplarPair) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(pair.c_good.data).tobytes())
    h.update(np.ascontiguousarray(pair.c_bad.data).tobytes())
    return h.hexdigest()


def _quantize(product: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grey levels a PGM file can hold, as float32."""
    levels = np.rint(np.clip(product, 0.0, 1.0) * 255.0).astype(np.uint8)
    return levels.astype(np.float32) / 255.0


def rank_explanations(model: Classifier, data: Sequence[LabeledImage],
                      tau: float = 5.0) -> list[tuple[int, float]]:
    """(instance index, Activation Precision) sorted best first.

    Ties in AP break toward the lower index, so the ranking is a total
    order and selection stays deterministic.
    """
    data = list(data)
    if not data:
        raise ContractError("rank_explanations needs at least one instance")
    missing = [i for i, im in enumerate(data) if im.relevance_mask is None]
    if missing:
        raise ContractError(f"instances missing relevance masks: {missing}")
    heatmaps = gradcam_batch(model, stack_pixels(data))
    scored = [(i, activation_precision(hm, im.relevance_mask, tau))
              for i, (im, hm) in enumerate(zip(data, heatmaps))]
    return sorted(scored, key=lambda row: (-row[1], row[0]))


def select_exemplars(model: Classifier, data: Sequence[LabeledImage],
                     policy: str = "auto", tau: float = 5.0,
                     good_id: int | None = None, bad_id: int | None = None,
                     out_dir: str | Path | None = None) -> ExemplarPair:
    """Build the anchor pair; optionally persist it under ``out_dir``.

    ``auto`` takes the best and worst ranked instances; ``manual`` takes
    the two given indices as (good, bad) regardless of their scores.
    """
    data = list(data)
    if policy == "auto":
        if len(data) < 2:
            raise SelectionError(
                f"auto selection needs at least 2 instances, got {len(data)}")
        ranking = rank_explanations(model, data, tau)
        good_id, bad_id = ranking[0][0], ranking[-1][0]
        scores = dict(ranking)
    elif policy == "manual":
        if good_id is None or bad_id is None:
            raise SelectionError("manual selection needs good_id and bad_id")
        for label, idx in (("good_id", good_id), ("bad_id", bad_id)):
            if not 0 <= idx < len(data):
                raise SelectionError(
                    f"{label} {idx} outside dataset of {len(data)} instances")
        scores = None
    else:
        raise SelectionError(f"unknown policy {policy!r}, expected auto or manual")
    if good_id == bad_id:
        raise SelectionError(f"good and bad exemplars must differ, both are {good_id}")

    chosen = [data[good_id], data[bad_id]]
    heatmaps = gradcam_batch(model, stack_pixels(chosen))
    products = [_quantize(explanation_product(im.pixels, hm))
                for im, hm in zip(chosen, heatmaps)]
    pair = ExemplarPair.from_arrays(products[0], products[1],
                                    good_source_id=str(good_id),
                                    bad_source_id=str(bad_id))
    if out_dir is not None:
        if scores is None:
            heat = dict(zip((good_id, bad_id), heatmaps))
            scores = {idx: activation_precision(heat[idx],
                                                data[idx].relevance_mask, tau)
                      if data[idx].relevance_mask is not None else float("nan")
                      for idx in (good_id, bad_id)}
        _persist(Path(out_dir), model, pair, data, scores, tau, policy)
    return pair


def _persist(out_dir: Path, model: Classifier, pair: ExemplarPair,
             data: Sequence[LabeledImage], scores: dict, tau: float,
             policy: str) -> None:
    good_id, bad_id = int(pair.good_source_id), int(pair.bad_source_id)
    write_pgm(out_dir / GOOD_FILE, pair.c_good.data)
    write_pgm(out_dir / BAD_FILE, pair.c_bad.data)
    lines = [
        f"policy = {policy}",
        f"tau = {tau}",
        f"good_id = {good_id}",
        f"bad_id = {bad_id}",
        f"good_class = {data[good_id].label}",
        f"bad_class = {data[bad_id].label}",
        f"good_ap = {scores[good_id]:.10f}",
        f"bad_ap = {scores[bad_id]:.10f}",
        f"model_checksum = {model_checksum(model)}",
    ]
    atomic_write_text(out_dir / MANIFEST_FILE, "\n".join(lines) + "\n")


def load_exemplars(path: str | Path) -> ExemplarPair:
    """Reload a persisted pair; bit-identical to what was selected."""
    path = Path(path)
    manifest = path / MANIFEST_FILE
    if not manifest.exists():
        raise SelectionError(f"no exemplar manifest at {manifest}")
    fields = {}
    for line in manifest.read_text().splitlines():
        if "=" in line:
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    good = read_pgm(path / GOOD_FILE)
    bad = read_pgm(path / BAD_FILE)
    return ExemplarPair.from_arrays(good, bad,
                                    good_source_id=fields.get("good_id", "?"),
                                    bad_source_id=fields.get("bad_id", "?"))
