"""Reverse-mode automatic differentiation over eagerly evaluated numpy tapes.

The engine is deliberately small: a ``Tensor`` wraps one float32/float64
array, a ``Graph`` is an append-only tape of operation records, and
``op_forward`` both computes an op eagerly and records it.  ``backward``
replays the tape in reverse, accumulating vector-Jacobian products
additively across fan-out.  The op set is exactly what the classifier and
the explanation losses need; there is no broadcasting zoo, no views, no
higher-order differentiation.

Two properties the rest of the package leans on:

* every recorded graph can be re-executed bit-for-bit via
  ``Graph.recompute`` (dropout masks are drawn once and cached on the
  node), which is what makes ``finite_diff_check`` a trustworthy oracle;
* constants entering a graph are leaves, so quantities that are
  deliberately detached (GradCAM channel weights, normalization divisors)
  stay constant both for ``backward`` and for finite differences.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, GraphError, NumericError
from .utils import atomic_write_bytes

__all__ = [
    "OP_KINDS",
    "Tensor",
    "Graph",
    "Node",
    "active_graph",
    "op_forward",
    "backward",
    "finite_diff_check",
    "constant",
    "parameter",
    "add",
    "scale",
    "bilinear_matrix",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A named numpy array plus gradient slot.

    ``data`` is always a float32 or float64 ndarray (scalars become 0-d
    arrays).  ``grad`` stays ``None`` until a backward pass deposits into
    it; repeated backward passes accumulate additively and the caller is
    responsible for zeroing between optimization steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.array(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not np.isfinite(arr).all():
            raise NumericError(f"tensor {name or '<anon>'}: non-finite values at creation")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


class Node:
    """One recorded operation: kind, input tensors, produced output, attrs.

    ``ctx`` carries values that must survive re-execution (currently only
    dropout keep-masks) so that a recompute of the tape is deterministic.
    """

    __slots__ = ("kind", "inputs", "output", "attrs", "ctx")

    def __init__(self, kind: str, inputs: tuple[Tensor, ...], attrs: dict):
        self.kind = kind
        self.inputs = inputs
        self.output: Tensor | None = None
        self.attrs = attrs
        self.ctx: dict = {}


_ACTIVE: list["Graph"] = []


class Graph:
    """Append-only tape of Nodes in construction (= topological) order."""

    def __init__(self, mode: str = "train", rng: np.random.Generator | None = None):
        if mode not in ("train", "eval"):
            raise ContractError(f"graph mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        self.rng = rng
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Graph":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def owns(self, tensor: Tensor) -> bool:
        return id(tensor) in self._produced

    @staticmethod
    def current() -> "Graph | None":
        """Innermost active graph, or None outside any `with Graph(...)`."""
        return _ACTIVE[-1] if _ACTIVE else None

    def recompute(self) -> None:
        """Re-execute every node in order, writing outputs in place.

        Inputs may have been perturbed since the original run; cached
        dropout masks are reused so the replayed function is the same
        deterministic function of the leaf values.
        """
        with np.errstate(all="ignore"):
            for node in self.nodes:
                out = _FORWARD[node.kind](node, self)
                node.output.data[...] = np.asarray(out)


def active_graph() -> Graph:
    if not _ACTIVE:
        raise GraphError("no active graph; wrap op calls in `with Graph(...):`")
    return _ACTIVE[-1]


# ---------------------------------------------------------------------------
# op registry


def _as_tuple_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _require_ndim(op: str, label: str, arr: np.ndarray, ndim: int) -> None:
    if arr.ndim != ndim:
        raise DimensionError(f"{op}: {label} must have rank {ndim}, got shape {arr.shape}")


def _conv2d_fwd(node: Node, graph: Graph) -> np.ndarray:
    x, w, b = (t.data for t in node.inputs)
    _require_ndim("conv2d", "input", x, 4)
    _require_ndim("conv2d", "weights", w, 4)
    _require_ndim("conv2d", "bias", b, 1)
    stride = int(node.attrs.get("stride", 1))
    if stride != 1:
        raise ContractError("conv2d: only stride 1 is supported")
    pad = int(node.attrs.get("padding", 0))
    if pad < 0:
        raise ContractError("conv2d: padding must be >= 0")
    n, ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    if ci != ci2 or b.shape[0] != co:
        raise DimensionError(
            f"conv2d: incompatible shapes input {x.shape}, weights {w.shape}, bias {b.shape}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError(
            f"conv2d: padded input {h + 2 * pad}x{wd + 2 * pad} smaller than kernel {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwij,ocij->nohw", win, w, optimize=True)
    out += b[None, :, None, None]
    return out


def _conv2d_bwd(g: np.ndarray, node: Node):
    xt, wt, bt = node.inputs
    x, w = xt.data, wt.data
    pad = int(node.attrs.get("padding", 0))
    kh, kw = w.shape[2], w.shape[3]
    gx = gw = gb = None
    if wt.requires_grad:
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        gw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
    if bt.requires_grad:
        gb = g.sum(axis=(0, 2, 3))
    if xt.requires_grad:
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        wing = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        wf = np.flip(w, axis=(2, 3))
        gxp = np.einsum("nohwij,ocij->nchw", wing, wf, optimize=True)
        h, wd = x.shape[2], x.shape[3]
        gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
    return gx, gw, gb


def _dense_fwd(node: Node, graph: Graph) -> np.ndarray:
    x, w, b = (t.data for t in node.inputs)
    _require_ndim("dense", "input", x, 2)
    _require_ndim("dense", "weights", w, 2)
    _require_ndim("dense", "bias", b, 1)
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise DimensionError(
            f"dense: incompatible shapes input {x.shape}, weights {w.shape}, bias {b.shape}")
    return x @ w + b


def _dense_bwd(g: np.ndarray, node: Node):
    xt, wt, bt = node.inputs
    gx = g @ wt.data.T if xt.requires_grad else None
    gw = xt.data.T @ g if wt.requires_grad else None
    gb = g.sum(axis=0) if bt.requires_grad else None
    return gx, gw, gb


def _relu_fwd(node: Node, graph: Graph) -> np.ndarray:
    return np.maximum(node.inputs[0].data, 0)


def _relu_bwd(g: np.ndarray, node: Node):
    # Subgradient at exactly 0 is taken as 0.
    return (g * (node.inputs[0].data > 0),)


def _max_pool2d_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    _require_ndim("max_pool2d", "input", x, 4)
    k = int(node.attrs.get("window", 2))
    n, c, h, w = x.shape
    if k < 1 or h % k or w % k:
        raise DimensionError(f"max_pool2d: window {k} does not tile input {x.shape}")
    r = _pool_windows(x, k)
    return r.max(axis=-1)


def _pool_windows(x: np.ndarray, k: int) -> np.ndarray:
    n, c, h, w = x.shape
    return (x.reshape(n, c, h // k, k, w // k, k)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(n, c, h // k, w // k, k * k))


def _max_pool2d_bwd(g: np.ndarray, node: Node):
    x = node.inputs[0].data
    k = int(node.attrs.get("window", 2))
    n, c, h, w = x.shape
    r = _pool_windows(x, k)
    idx = r.argmax(axis=-1)  # ties resolve to the first maximum
    buf = np.zeros_like(r)
    np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
    gx = (buf.reshape(n, c, h // k, w // k, k, k)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(n, c, h, w))
    return (gx,)


def _avg_pool_global_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    _require_ndim("avg_pool2d_global", "input", x, 4)
    return x.mean(axis=(2, 3))


def _avg_pool_global_bwd(g: np.ndarray, node: Node):
    x = node.inputs[0].data
    h, w = x.shape[2], x.shape[3]
    gx = np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy()
    return (gx,)


def _softmax_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    if x.ndim < 1:
        raise DimensionError("softmax: requires at least rank 1")
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd(g: np.ndarray, node: Node):
    s = node.output.data
    return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)


def _binary_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def _mul_fwd(node: Node, graph: Graph) -> np.ndarray:
    a, b = node.inputs[0].data, node.inputs[1].data
    _binary_shapes("elementwise_mul", a, b)
    return a * b


def _mul_bwd(g: np.ndarray, node: Node):
    at, bt = node.inputs
    ga = _unbroadcast(g * bt.data, at.data.shape) if at.requires_grad else None
    gb = _unbroadcast(g * at.data, bt.data.shape) if bt.requires_grad else None
    return ga, gb


def _sub_fwd(node: Node, graph: Graph) -> np.ndarray:
    a, b = node.inputs[0].data, node.inputs[1].data
    _binary_shapes("elementwise_sub", a, b)
    return a - b


def _sub_bwd(g: np.ndarray, node: Node):
    at, bt = node.inputs
    ga = _unbroadcast(g, at.data.shape) if at.requires_grad else None
    gb = _unbroadcast(-g, bt.data.shape) if bt.requires_grad else None
    return ga, gb


def _square_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    return x * x


def _square_bwd(g: np.ndarray, node: Node):
    return (2.0 * node.inputs[0].data * g,)


def _reduce_grad(g: np.ndarray, x: np.ndarray, axis, keepdims: bool) -> np.ndarray:
    axes = _as_tuple_axis(axis, x.ndim)
    if axes is None:
        return np.broadcast_to(g, x.shape).copy()
    gg = g
    if not keepdims:
        for a in sorted(axes):
            gg = np.expand_dims(gg, a)
    return np.broadcast_to(gg, x.shape).copy()


def _sum_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    axis = node.attrs.get("axis")
    keepdims = bool(node.attrs.get("keepdims", False))
    return np.asarray(x.sum(axis=_as_tuple_axis(axis, x.ndim), keepdims=keepdims))


def _sum_bwd(g: np.ndarray, node: Node):
    x = node.inputs[0].data
    return (_reduce_grad(g, x, node.attrs.get("axis"), bool(node.attrs.get("keepdims", False))),)


def _mean_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    axis = node.attrs.get("axis")
    keepdims = bool(node.attrs.get("keepdims", False))
    return np.asarray(x.mean(axis=_as_tuple_axis(axis, x.ndim), keepdims=keepdims))


def _mean_bwd(g: np.ndarray, node: Node):
    x = node.inputs[0].data
    axes = _as_tuple_axis(node.attrs.get("axis"), x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    grad = _reduce_grad(g, x, node.attrs.get("axis"), bool(node.attrs.get("keepdims", False)))
    return (grad / count,)


def _sqrt_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    if (x < 0).any():
        raise NumericError("sqrt: negative input")
    return np.sqrt(x)


def _sqrt_bwd(g: np.ndarray, node: Node):
    # Guard the x == 0 corner so a zero distance does not poison the step
    # with infinities; the true subdifferential there is unbounded anyway.
    denom = np.maximum(node.output.data, 1e-12)
    return (g * 0.5 / denom,)


def _log_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    if (x <= 0).any():
        raise NumericError("log: non-positive input")
    return np.log(x)


def _log_bwd(g: np.ndarray, node: Node):
    return (g / node.inputs[0].data,)


def _dropout_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    p = float(node.attrs.get("p", 0.5))
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: rate must be in [0, 1), got {p}")
    if "mask" not in node.ctx:
        wanted = bool(node.attrs.get("active", True))
        if graph.mode != "train" or not wanted or p == 0.0:
            node.ctx["mask"] = None
        else:
            if graph.rng is None:
                raise GraphError("dropout in train mode needs a graph rng")
            keep = graph.rng.random(x.shape) >= p
            # Inverted scaling keeps the expected activation unchanged.
            node.ctx["mask"] = keep.astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    mask = node.ctx["mask"]
    return x.copy() if mask is None else x * mask


def _dropout_bwd(g: np.ndarray, node: Node):
    mask = node.ctx["mask"]
    return (g.copy() if mask is None else g * mask,)


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Interpolation matrix for 1-D bilinear resampling with half-pixel centers.

    Output sample ``o`` reads source coordinate ``(o + 0.5) * n_in / n_out - 0.5``
    (the align-corners-false convention); edge samples replicate the border.
    Resampling a 2-D grid is ``L_rows @ grid @ L_cols.T``.
    """
    if n_out < 1 or n_in < 1:
        raise ContractError("bilinear_matrix: sizes must be positive")
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i0c = np.clip(i0, 0, n_in - 1)
    i1c = np.clip(i0 + 1, 0, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, i0c), 1.0 - frac)
    np.add.at(mat, (rows, i1c), frac)
    return mat.astype(dtype)


def _upsample_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    _require_ndim("upsample_bilinear", "input", x, 4)
    oh, ow = int(node.attrs["out_h"]), int(node.attrs["out_w"])
    if oh < 1 or ow < 1:
        raise ContractError("upsample_bilinear: output size must be positive")
    if "ly" not in node.ctx:
        node.ctx["ly"] = bilinear_matrix(oh, x.shape[2], dtype=x.dtype)
        node.ctx["lx"] = bilinear_matrix(ow, x.shape[3], dtype=x.dtype)
    ly, lx = node.ctx["ly"], node.ctx["lx"]
    return np.einsum("ab,cd,nkbd->nkac", ly, lx, x, optimize=True)


def _upsample_bwd(g: np.ndarray, node: Node):
    ly, lx = node.ctx["ly"], node.ctx["lx"]
    return (np.einsum("ab,cd,nkac->nkbd", ly, lx, g, optimize=True),)


def _max_scalar_fwd(node: Node, graph: Graph) -> np.ndarray:
    x = node.inputs[0].data
    v = float(node.attrs.get("value", 0.0))
    return np.maximum(x, np.asarray(v, dtype=x.dtype))


def _max_scalar_bwd(g: np.ndarray, node: Node):
    x = node.inputs[0].data
    v = float(node.attrs.get("value", 0.0))
    return (g * (x > v),)


_FORWARD: dict[str, Callable[[Node, Graph], np.ndarray]] = {
    "conv2d": _conv2d_fwd,
    "dense": _dense_fwd,
    "relu": _relu_fwd,
    "max_pool2d": _max_pool2d_fwd,
    "avg_pool2d_global": _avg_pool_global_fwd,
    "softmax": _softmax_fwd,
    "elementwise_mul": _mul_fwd,
    "elementwise_sub": _sub_fwd,
    "square": _square_fwd,
    "sum": _sum_fwd,
    "mean": _mean_fwd,
    "sqrt": _sqrt_fwd,
    "log": _log_fwd,
    "dropout": _dropout_fwd,
    "upsample_bilinear": _upsample_fwd,
    "max_with_scalar": _max_scalar_fwd,
}

_BACKWARD: dict[str, Callable[[np.ndarray, Node], tuple]] = {
    "conv2d": _conv2d_bwd,
    "dense": _dense_bwd,
    "relu": _relu_bwd,
    "max_pool2d": _max_pool2d_bwd,
    "avg_pool2d_global": _avg_pool_global_bwd,
    "softmax": _softmax_bwd,
    "elementwise_mul": _mul_bwd,
    "elementwise_sub": _sub_bwd,
    "square": _square_bwd,
    "sum": _sum_bwd,
    "mean": _mean_bwd,
    "sqrt": _sqrt_bwd,
    "log": _log_bwd,
    "dropout": _dropout_bwd,
    "upsample_bilinear": _upsample_bwd,
    "max_with_scalar": _max_scalar_bwd,
}

OP_KINDS = frozenset(_FORWARD)


def op_forward(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Execute one op eagerly and record it on the active graph.

    Raises NumericError if the result contains NaN or infinities; the tape
    never holds non-finite values.
    """
    if kind not in _FORWARD:
        raise ContractError(f"unknown op kind {kind!r}")
    graph = active_graph()
    tensors = tuple(inputs)
    for t in tensors:
        if not isinstance(t, Tensor):
            raise ContractError(f"{kind}: inputs must be Tensors, got {type(t).__name__}")
    node = Node(kind, tensors, dict(attrs or {}))
    with np.errstate(all="ignore"):
        data = np.asarray(_FORWARD[kind](node, graph))
    if not np.isfinite(data).all():
        raise NumericError(f"{kind}: non-finite values in output")
    out = Tensor._wrap(data, requires_grad=any(t.requires_grad for t in tensors))
    node.output = out
    graph.nodes.append(node)
    graph._produced.add(id(out))
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into ``.grad`` for every tensor that
    requires gradients and is reachable from ``loss``.

    The walk is a single reverse sweep over the tape; nodes that do not
    feed the loss receive no adjoint and are skipped.  Fan-out sums
    adjoints, matching the multivariate chain rule.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not graph.owns(loss):
        raise GraphError("backward: loss tensor was not produced by this graph")
    adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(graph.nodes):
        g = adjoint.pop(id(node.output), None)
        if g is None:
            continue
        out = node.output
        if out.requires_grad:
            out.grad = g if out.grad is None else out.grad + g
        grads = _BACKWARD[node.kind](g, node)
        for tensor, tg in zip(node.inputs, grads):
            if tg is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in adjoint:
                adjoint[key] = adjoint[key] + tg
            else:
                adjoint[key] = tg
                holders[key] = tensor
    for key, g in adjoint.items():
        tensor = holders[key]
        if tensor.requires_grad:
            tensor.grad = g if tensor.grad is None else tensor.grad + g


@contextmanager
def preserve_grads(tensors: Iterable[Tensor]):
    """Shield ``.grad`` of the given tensors from backward passes inside.

    Probe passes (saliency, input-gradient captures) run ``backward`` for
    their own ends; without this guard their adjoints would silently
    accumulate into shared parameters and corrupt the caller's training
    gradient.
    """
    saved = [(t, t.grad) for t in tensors]
    try:
        yield
    finally:
        for t, g in saved:
            t.grad = g


def finite_diff_check(graph: Graph, loss: Tensor, wrt: Tensor,
                      epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-8).  The
    analytic gradient comes from ``backward`` in the graph's own precision;
    the numeric reference replays the recorded tape in float64 so the
    oracle is not drowned by single-precision cancellation.  Anything that
    entered the graph as a constant stays constant during the replays,
    exactly as ``backward`` treats it.  Side effect: one backward pass, so
    ``.grad`` fields of reachable tensors get populated.
    """
    if epsilon <= 0:
        raise ContractError("finite_diff_check: epsilon must be positive")
    saved = wrt.grad
    wrt.grad = None
    backward(graph, loss)
    analytic = np.zeros_like(wrt.data) if wrt.grad is None else wrt.grad.astype(np.float64)
    wrt.grad = saved

    tensors: dict[int, Tensor] = {}
    for node in graph.nodes:
        for t in node.inputs:
            tensors.setdefault(id(t), t)
        tensors.setdefault(id(node.output), node.output)
    if id(wrt) not in tensors:
        raise GraphError("finite_diff_check: wrt tensor does not appear in the graph")
    originals = {key: t.data for key, t in tensors.items()}
    for t in tensors.values():
        t.data = t.data.astype(np.float64)
    try:
        numeric = np.zeros(wrt.data.size, dtype=np.float64)
        flat = wrt.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            graph.recompute()
            up = float(loss.data.reshape(()))
            flat[i] = orig - epsilon
            graph.recompute()
            down = float(loss.data.reshape(()))
            flat[i] = orig
            numeric[i] = (up - down) / (2.0 * epsilon)
    finally:
        # The float32 buffers were never touched; swapping them back restores
        # the graph bit-for-bit.
        for key, t in tensors.items():
            t.data = originals[key]
    a = analytic.reshape(-1)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(a - numeric) / denom))


# ---------------------------------------------------------------------------
# convenience constructors built on the core op set


def constant(value, dtype=None, name: str | None = None) -> Tensor:
    """A leaf tensor that never receives gradients."""
    return Tensor(value, requires_grad=False, name=name, dtype=dtype)


def parameter(value, name: str, dtype=None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name, dtype=dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b composed from the core set (subtract the negation)."""
    neg = op_forward("elementwise_mul", (b, constant(-1.0, dtype=b.dtype)))
    return op_forward("elementwise_sub", (a, neg))


def scale(x: Tensor, factor: float) -> Tensor:
    return op_forward("elementwise_mul", (x, constant(float(factor), dtype=x.dtype)))


# ---------------------------------------------------------------------------
# checkpoint serialization

CHECKPOINT_MAGIC = b"XBLW1"


def save_checkpoint(path: str | Path, tensors: Iterable[tuple[str, Tensor | np.ndarray]]) -> None:
    """Serialize named tensors: ``XBLW1 <n>`` header line, then per tensor a
    little-endian uint32 name length, the UTF-8 name, uint32 rank, uint32
    dims, and the raw float32 payload.  Round-trips bit-exactly for float32
    data; float64 data is cast down on write.
    """
    items = [(name, np.ascontiguousarray(
        t.data if isinstance(t, Tensor) else t, dtype="<f4")) for name, t in tensors]
    chunks = [CHECKPOINT_MAGIC + f" {len(items)}\n".encode("ascii")]
    for name, arr in items:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        if arr.ndim:
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Inverse of ``save_checkpoint``; returns name -> float32 array in file order."""
    blob = Path(path).read_bytes()
    newline = blob.find(b"\n")
    if newline < 0:
        raise ContractError(f"{path}: missing checkpoint header line")
    header = blob[:newline].split()
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
        raise ContractError(f"{path}: bad checkpoint magic {blob[:newline]!r}")
    count = int(header[1])
    offset = newline + 1
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(blob):
            raise ContractError(f"{path}: truncated checkpoint at byte {offset}")
        piece = blob[offset:offset + n]
        offset += n
        return piece

    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n_items = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(take(4 * n_items), dtype="<f4").reshape(shape)
        out[name] = arr.copy()
    if offset != len(blob):
        raise ContractError(f"{path}: {len(blob) - offset} trailing bytes after last tensor")
    return out
