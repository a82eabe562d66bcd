"""Minibatch training with Adam, plateau decay and best-weight early stop.

One `fit` call covers both phases of the pipeline.  The unrefined phase
minimizes cross entropy plus L2; the refinement phase adds an explanation
term, either the exemplar triplet hinge or the masked input-gradient
penalty.  Validation loss drives both the learning-rate schedule (halved
after a plateau) and early stopping (best weights restored), so the
returned model never scores worse on validation than any epoch did.

All randomness (shuffling, dropout) is derived from the run seed plus
structured tags, never from global state, which is what makes end-to-end
runs bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Graph, Tensor, add, backward, constant, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import LabeledImage, labels_of, stack_pixels
from .errors import ContractError, DatasetError
from .losses import (ExemplarPair, LossWeights, cross_entropy, exbl_triplet_loss,
                     l2_penalty, rrr_loss, total_loss)
from .metrics import accuracy
from .model import Classifier, predict
from .utils import atomic_write_text, derive_rng

__all__ = ["Adam", "EpochRecord", "FitResult", "fit",
           "save_model", "load_model", "CLIP_FLOOR"]

CLIP_FLOOR = 1e-12


@dataclass
class Adam:
    """Standard Adam with bias correction; state is keyed by parameter name."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)
    _t: int = 0

    def step(self, params: Sequence[tuple[str, Tensor]]) -> None:
        self._t += 1
        c1 = 1.0 - self.beta1 ** self._t
        c2 = 1.0 - self.beta2 ** self._t
        for name, tensor in params:
            if tensor.grad is None:
                continue
            g = tensor.grad
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(tensor.data)
                self._v[name] = np.zeros_like(tensor.data)
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            tensor.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class FitResult:
    records: list
    best_epoch: int
    best_val_loss: float
    stopped_early: bool


def _zero_grads(model: Classifier) -> None:
    for _, tensor in model.named_params():
        tensor.grad = None


def _snapshot(model: Classifier) -> dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.named_params()}


def _restore(model: Classifier, weights: dict[str, np.ndarray]) -> None:
    for name, tensor in model.named_params():
        tensor.data = weights[name].copy()


def _confounder_masks(batch: Sequence[LabeledImage]) -> list[np.ndarray]:
    missing = [i for i, im in enumerate(batch) if im.confounder_mask is None]
    if missing:
        raise DatasetError(
            f"input-gradient penalty needs confounder masks; instances {missing} have none")
    return [im.confounder_mask for im in batch]


def _explanation_term(model: Classifier, batch: Sequence[LabeledImage],
                      loss_mode: str, exemplars: ExemplarPair | None,
                      margin: float) -> Tensor | None:
    if loss_mode == "ce_only":
        return None
    if loss_mode == "exbl":
        if exemplars is None:
            raise ContractError("loss_mode=exbl needs an exemplar pair")
        return exbl_triplet_loss(model, batch, exemplars, margin)
    if loss_mode == "rrr":
        pixels = stack_pixels(list(batch))
        return rrr_loss(model, pixels, _confounder_masks(batch))
    raise ContractError(f"unknown loss_mode {loss_mode!r}")


def _validation_loss(model: Classifier, data: Sequence[LabeledImage],
                     loss_mode: str, exemplars: ExemplarPair | None,
                     weights: LossWeights) -> float:
    """Cross entropy plus the scaled explanation term; L2 excluded.

    Dropout is off and no gradients flow, so this is a pure measurement of
    the quantity the optimizer is trying to move.
    """
    data = list(data)
    probs = predict(model, stack_pixels(data))
    rows = probs[np.arange(len(data)), labels_of(data)]
    ce = float(-np.mean(np.log(np.clip(rows, CLIP_FLOOR, 1.0))))
    if loss_mode == "ce_only" or weights.expl_scale == 0.0:
        return ce
    with Graph(mode="eval"):
        expl = _explanation_term(model, data, loss_mode, exemplars,
                                 weights.margin)
        value = float(expl.item())
    return ce + weights.expl_scale * value


def _write_log(path: Path, run_tag: str, records: Sequence[EpochRecord]) -> None:
    lines = ["run_id,epoch,train_loss,val_loss,val_acc,lr"]
    lines += [f"{run_tag},{r.epoch},{r.train_loss:.8f},{r.val_loss:.8f},"
              f"{r.val_acc:.6f},{r.lr:.3e}" for r in records]
    atomic_write_text(path, "\n".join(lines) + "\n")


def fit(model: Classifier, train_data: Sequence[LabeledImage],
        val_data: Sequence[LabeledImage], cfg: RunConfig, *,
        epochs: int, loss_mode: str, exemplars: ExemplarPair | None = None,
        log_path: str | Path | None = None, run_tag: str = "",
        rng_tag: str = "fit") -> FitResult:
    """Train in place for up to ``epochs``; leaves the best weights installed."""
    train_data, val_data = list(train_data), list(val_data)
    if not train_data or not val_data:
        raise ContractError("fit needs non-empty train and validation data")
    if loss_mode == "rrr":
        _confounder_masks(train_data)
    weights = LossWeights(lambda_l2=cfg.lambda_l2, expl_scale=cfg.expl_scale,
                          margin=cfg.margin)
    optimizer = Adam(lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2,
                     eps=cfg.adam_eps)
    records: list[EpochRecord] = []
    best_val = math.inf
    best_epoch = -1
    best_weights = _snapshot(model)
    stopped_early = False
    n = len(train_data)

    for epoch in range(epochs):
        order = derive_rng(cfg.seed, rng_tag, "shuffle", epoch).permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            batch = [train_data[i] for i in order[start:start + cfg.batch_size]]
            rng = derive_rng(cfg.seed, rng_tag, "dropout", epoch, step)
            with Graph(mode="train", rng=rng) as g:
                x = constant(model.as_input_batch(stack_pixels(batch)),
                             dtype=model.cfg.numpy_dtype())
                fp = model.forward(x, train=True)
                ce = cross_entropy(fp.probs, labels_of(batch))
                l2 = l2_penalty((t for _, t in model.trainable_params()),
                                cfg.lambda_l2)
                expl = _explanation_term(model, batch, loss_mode, exemplars,
                                         cfg.margin)
                loss = add(ce, l2) if expl is None else total_loss(ce, expl, l2, weights)
                _zero_grads(model)
                backward(g, loss)
            optimizer.step(model.trainable_params())
            total += float(loss.item()) * len(batch)

        val_loss = _validation_loss(model, val_data, loss_mode, exemplars, weights)
        val_acc = accuracy(model, val_data)
        records.append(EpochRecord(epoch=epoch, train_loss=total / n,
                                   val_loss=val_loss, val_acc=val_acc,
                                   lr=optimizer.lr))
        if log_path is not None:
            _write_log(Path(log_path), run_tag, records)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_weights = _snapshot(model)
        else:
            stalled = epoch - best_epoch
            if stalled >= cfg.early_stop_patience:
                stopped_early = True
                break
            if stalled % cfg.lr_plateau_epochs == 0:
                optimizer.lr *= cfg.lr_decay_factor

    _restore(model, best_weights)
    return FitResult(records=records, best_epoch=best_epoch,
                     best_val_loss=best_val, stopped_early=stopped_early)


def save_model(path: str | Path, model: Classifier) -> None:
    save_checkpoint(path, model.named_params())


def load_model(path: str | Path, model: Classifier) -> Classifier:
    """Install checkpointed weights into ``model`` and return it."""
    model.load_weights(load_checkpoint(path))
    return model
