"""A small convolutional classifier assembled from the autodiff op set.

Architecture: a stack of 3x3 conv blocks (ReLU after each, 2x2 max-pool
after all but the last), global average pooling, one hidden dense layer
with ReLU and dropout, then a dense softmax head.  The "feature layer" is
the ReLU output of the last conv block; saliency maps are computed from
its activations and gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .autodiff import Graph, Tensor, backward, constant, op_forward, preserve_grads
from .errors import ConfigError, ContractError, DimensionError
from .utils import derive_rng

__all__ = [
    "ModelConfig",
    "Classifier",
    "ForwardPass",
    "build_classifier",
    "predict",
    "feature_maps_and_grads",
    "class_score_gradients",
    "freeze_layers",
]


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    image_size: int = 32
    in_channels: int = 1
    conv_channels: tuple[int, ...] = (8, 16, 32)
    kernel_size: int = 3
    padding: int = 1
    hidden_width: int = 64
    dropout_rate: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size < 1 or self.in_channels < 1:
            raise ConfigError("image_size and in_channels must be positive")
        if not self.conv_channels or any(c < 1 for c in self.conv_channels):
            raise ConfigError(f"bad conv_channels {self.conv_channels}")
        if self.kernel_size < 1 or self.padding < 0:
            raise ConfigError("kernel_size must be >= 1 and padding >= 0")
        if self.hidden_width < 1:
            raise ConfigError("hidden_width must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.spatial_sizes()

    def numpy_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def spatial_sizes(self) -> list[int]:
        """Spatial extent after each conv block; raises ConfigError if the
        input is too small for the receptive field or pooling plan."""
        size = self.image_size
        sizes = []
        for i in range(len(self.conv_channels)):
            size = size + 2 * self.padding - self.kernel_size + 1
            if size < 1:
                raise ConfigError(
                    f"input {self.image_size} too small for conv block {i} "
                    f"(kernel {self.kernel_size}, padding {self.padding})")
            if i < len(self.conv_channels) - 1:
                if size % 2:
                    raise ConfigError(
                        f"conv block {i} output {size} not divisible by pool window 2")
                size //= 2
            sizes.append(size)
        if sizes[-1] < 2:
            raise ConfigError(
                f"feature layer spatial extent {sizes[-1]} is below the 2x2 minimum")
        return sizes


class _Conv:
    def __init__(self, name: str, w: Tensor, b: Tensor, padding: int):
        self.name, self.w, self.b, self.padding = name, w, b, padding

    def apply(self, x: Tensor, train: bool) -> Tensor:
        return op_forward("conv2d", (x, self.w, self.b), {"padding": self.padding})

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class _ReLU:
    def apply(self, x: Tensor, train: bool) -> Tensor:
        return op_forward("relu", (x,))

    def params(self):
        return []


class _MaxPool:
    def __init__(self, window: int = 2):
        self.window = window

    def apply(self, x: Tensor, train: bool) -> Tensor:
        return op_forward("max_pool2d", (x,), {"window": self.window})

    def params(self):
        return []


class _GlobalAvgPool:
    def apply(self, x: Tensor, train: bool) -> Tensor:
        return op_forward("avg_pool2d_global", (x,))

    def params(self):
        return []


class _Dense:
    def __init__(self, name: str, w: Tensor, b: Tensor):
        self.name, self.w, self.b = name, w, b

    def apply(self, x: Tensor, train: bool) -> Tensor:
        return op_forward("dense", (x, self.w, self.b))

    def params(self):
        return [(f"{self.name}.w", self.w), (f"{self.name}.b", self.b)]


class _Dropout:
    def __init__(self, rate: float):
        self.rate = rate

    def apply(self, x: Tensor, train: bool) -> Tensor:
        return op_forward("dropout", (x,), {"p": self.rate, "active": train})

    def params(self):
        return []


class _Softmax:
    def apply(self, x: Tensor, train: bool) -> Tensor:
        return op_forward("softmax", (x,))

    def params(self):
        return []


class ForwardPass(NamedTuple):
    probs: Tensor
    logits: Tensor
    feature: Tensor


@dataclass
class Classifier:
    cfg: ModelConfig
    layers: list = field(default_factory=list)
    feature_layer_index: int = 0
    frozen_prefix_count: int = 0

    def named_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        """Parameters of layers past the frozen prefix, in network order."""
        out = []
        for i, layer in enumerate(self.layers):
            if i >= self.frozen_prefix_count:
                out.extend(layer.params())
        return out

    def forward(self, x: Tensor, train: bool) -> ForwardPass:
        """Run the full network inside the active graph."""
        h = x
        feature = None
        logits = None
        for i, layer in enumerate(self.layers):
            h = layer.apply(h, train)
            if i == self.feature_layer_index:
                feature = h
            if isinstance(layer, _Dense):
                logits = h
        return ForwardPass(probs=h, logits=logits, feature=feature)

    def forward_features(self, x: Tensor, train: bool = False) -> Tensor:
        """Run only the conv stack, up to and including the feature layer."""
        h = x
        for layer in self.layers[: self.feature_layer_index + 1]:
            h = layer.apply(h, train)
        return h

    def as_input_batch(self, images: np.ndarray) -> np.ndarray:
        """Normalize (H,W) | (N,H,W) | (N,C,H,W) pixel arrays to (N,C,H,W)."""
        arr = np.asarray(images, dtype=self.cfg.numpy_dtype())
        if arr.ndim == 2:
            arr = arr[None, None]
        elif arr.ndim == 3:
            arr = arr[:, None]
        elif arr.ndim != 4:
            raise DimensionError(f"images must have rank 2..4, got shape {arr.shape}")
        expected = (self.cfg.in_channels, self.cfg.image_size, self.cfg.image_size)
        if arr.shape[1:] != expected:
            raise DimensionError(
                f"image batch shape {arr.shape} does not match model input {expected}")
        return arr

    def load_weights(self, weights: dict[str, np.ndarray]) -> None:
        """Install checkpointed arrays; names and shapes must match exactly."""
        params = dict(self.named_params())
        if set(weights) != set(params):
            missing = sorted(set(params) - set(weights))
            extra = sorted(set(weights) - set(params))
            raise ContractError(
                f"checkpoint mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}")
        for name, arr in weights.items():
            target = params[name]
            if tuple(arr.shape) != target.shape:
                raise ContractError(
                    f"checkpoint tensor {name} has shape {arr.shape}, expected {target.shape}")
            target.data = arr.astype(self.cfg.numpy_dtype())


def build_classifier(cfg: ModelConfig) -> Classifier:
    """Seeded He-uniform weights, zero biases; same seed, same bits."""
    cfg.validate()
    dtype = cfg.numpy_dtype()
    rng = derive_rng(cfg.seed, "init")

    def he_uniform(shape, fan_in):
        limit = math.sqrt(6.0 / fan_in)
        return rng.uniform(-limit, limit, size=shape).astype(dtype)

    layers: list = []
    in_ch = cfg.in_channels
    for i, out_ch in enumerate(cfg.conv_channels):
        w = Tensor(he_uniform((out_ch, in_ch, cfg.kernel_size, cfg.kernel_size),
                              in_ch * cfg.kernel_size * cfg.kernel_size),
                   requires_grad=True, name=f"conv{i}.w", dtype=dtype)
        b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True,
                   name=f"conv{i}.b", dtype=dtype)
        layers.append(_Conv(f"conv{i}", w, b, cfg.padding))
        layers.append(_ReLU())
        if i < len(cfg.conv_channels) - 1:
            layers.append(_MaxPool(2))
        in_ch = out_ch
    feature_layer_index = len(layers) - 1  # ReLU of the last conv block

    layers.append(_GlobalAvgPool())
    w = Tensor(he_uniform((in_ch, cfg.hidden_width), in_ch),
               requires_grad=True, name="fc0.w", dtype=dtype)
    b = Tensor(np.zeros(cfg.hidden_width, dtype=dtype), requires_grad=True,
               name="fc0.b", dtype=dtype)
    layers.append(_Dense("fc0", w, b))
    layers.append(_ReLU())
    layers.append(_Dropout(cfg.dropout_rate))
    w = Tensor(he_uniform((cfg.hidden_width, cfg.num_classes), cfg.hidden_width),
               requires_grad=True, name="fc1.w", dtype=dtype)
    b = Tensor(np.zeros(cfg.num_classes, dtype=dtype), requires_grad=True,
               name="fc1.b", dtype=dtype)
    layers.append(_Dense("fc1", w, b))
    layers.append(_Softmax())

    return Classifier(cfg=cfg, layers=layers, feature_layer_index=feature_layer_index)


def predict(model: Classifier, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """Class probabilities in evaluation mode (dropout off), shape (N, K)."""
    batch = model.as_input_batch(images)
    outputs = []
    for start in range(0, batch.shape[0], chunk):
        part = batch[start:start + chunk]
        with Graph(mode="eval"):
            xt = constant(part, dtype=model.cfg.numpy_dtype())
            fp = model.forward(xt, train=False)
        outputs.append(fp.probs.data.copy())
    return np.concatenate(outputs, axis=0)


def class_score_gradients(
    model: Classifier,
    images: np.ndarray,
    class_indices: Sequence[int] | np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Feature activations and their gradients w.r.t. per-instance class scores.

    The score for instance i is its pre-softmax logit at ``class_indices[i]``
    (argmax of the predicted probabilities when indices are omitted).
    Instances are independent in the forward pass, so one backward pass from
    the summed selected logits yields every per-instance gradient at once.

    Returns (features, feature_grads, probs, classes) as numpy arrays with
    shapes (N,C,h,w), (N,C,h,w), (N,K), (N,).
    """
    batch = model.as_input_batch(images)
    n, k = batch.shape[0], model.cfg.num_classes
    with Graph(mode="eval") as g:
        xt = constant(batch, dtype=model.cfg.numpy_dtype())
        fp = model.forward(xt, train=False)
        probs = fp.probs.data.copy()
        if class_indices is None:
            classes = probs.argmax(axis=1)
        else:
            classes = np.asarray(class_indices, dtype=np.int64)
            if classes.shape != (n,):
                raise DimensionError(
                    f"class_indices shape {classes.shape} does not match batch size {n}")
            if (classes < 0).any() or (classes >= k).any():
                raise IndexError(f"class index out of range for {k} classes")
        onehot = np.zeros((n, k), dtype=model.cfg.numpy_dtype())
        onehot[np.arange(n), classes] = 1.0
        picked = op_forward("elementwise_mul", (fp.logits, constant(onehot)))
        score = op_forward("sum", (picked,))
        # probe pass: must not leak adjoints into the shared parameters
        with preserve_grads(t for _, t in model.named_params()):
            backward(g, score)
    return fp.feature.data.copy(), fp.feature.grad.copy(), probs, classes


def feature_maps_and_grads(
    model: Classifier, image: np.ndarray, class_index: int
) -> tuple[Tensor, Tensor]:
    """Single-instance feature maps A and dScore/dA, each shaped (C, h, w)."""
    if not isinstance(class_index, (int, np.integer)):
        raise ContractError(f"class_index must be an integer, got {type(class_index).__name__}")
    if not 0 <= int(class_index) < model.cfg.num_classes:
        raise IndexError(
            f"class index {class_index} out of range for {model.cfg.num_classes} classes")
    arr = np.asarray(image)
    if arr.ndim in (2, 3):
        arr = arr[None]  # single instance -> batch of one
    feats, grads, _, _ = class_score_gradients(model, arr, [int(class_index)])
    return Tensor(feats[0]), Tensor(grads[0])


def freeze_layers(model: Classifier, n: int) -> Classifier:
    """Exclude the first ``n`` layers from optimizer updates.

    Forward behavior is untouched; only ``trainable_params`` shrinks.
    """
    if not 0 <= n <= len(model.layers):
        raise IndexError(f"freeze count {n} out of range for {len(model.layers)} layers")
    model.frozen_prefix_count = n
    return model
