"""Run configuration: one flat text file drives the whole pipeline.

The format is deliberately plain, `key = value` per line with `#`
comments, so configs diff cleanly and survive copy-paste.  Every key maps
onto one dataclass field and is type-checked against it; unknown keys are
errors rather than silent typos.  A canonical serialization (sorted keys,
output directory excluded) is hashed into the run id, so any two runs
with the same effective settings share an id and differently configured
runs never collide.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .data import DecoySpec
from .errors import ConfigError, GenerationError
from .model import ModelConfig

__all__ = ["RunConfig", "parse_config", "parse_config_text",
           "canonical_text", "config_hash", "run_id"]

_LOSS_MODES = ("ce_only", "exbl", "rrr")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # dataset geometry
    num_classes: int = 4
    image_size: int = 32
    train_per_class: int = 200
    val_per_class: int = 100
    test_per_class: int = 100
    confounder_correlation: float = 1.0
    noise_sigma: float = 0.05
    patch_size: int = 6
    signal_amplitude: float = 0.5
    bar_sigma_long: float = 6.0
    bar_sigma_short: float = 2.0
    mask_threshold: float = 0.2
    # network
    conv_channels: tuple = (8, 16, 32)
    kernel_size: int = 3
    padding: int = 1
    hidden_width: int = 64
    dropout_rate: float = 0.5
    dtype: str = "float32"
    # optimizer and schedule
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs_unrefined: int = 60
    epochs_refine: int = 100
    early_stop_patience: int = 5
    lr_plateau_epochs: int = 3
    lr_decay_factor: float = 0.5
    # refinement loss
    margin: float = 1.0
    tau: float = 5.0
    lambda_l2: float = 1e-4
    expl_scale: float = 1.0
    freeze_prefix: int = 0
    loss_mode: str = "ce_only"
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.loss_mode not in _LOSS_MODES:
            raise ConfigError(
                f"loss_mode must be one of {_LOSS_MODES}, got {self.loss_mode!r}")
        positives = {"lr": self.lr, "adam_eps": self.adam_eps,
                     "batch_size": self.batch_size,
                     "epochs_unrefined": self.epochs_unrefined,
                     "epochs_refine": self.epochs_refine,
                     "early_stop_patience": self.early_stop_patience,
                     "lr_plateau_epochs": self.lr_plateau_epochs,
                     "lr_decay_factor": self.lr_decay_factor}
        for name, value in positives.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        nonnegative = {"seed": self.seed, "margin": self.margin,
                       "lambda_l2": self.lambda_l2,
                       "expl_scale": self.expl_scale,
                       "freeze_prefix": self.freeze_prefix}
        for name, value in nonnegative.items():
            if value < 0:
                raise ConfigError(f"{name} must be >= 0, got {value}")
        for name, value in (("adam_beta1", self.adam_beta1),
                            ("adam_beta2", self.adam_beta2)):
            if not 0.0 < value < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {value}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ConfigError(
                f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        if not 0.0 < self.tau < 100.0:
            raise ConfigError(f"tau must lie in (0, 100), got {self.tau}")
        if self.freeze_prefix > len(self.conv_channels):
            raise ConfigError(
                f"freeze_prefix {self.freeze_prefix} exceeds the "
                f"{len(self.conv_channels)} conv blocks")
        if not self.output_dir:
            raise ConfigError("output_dir must be a non-empty path")
        # delegate the dataset and network checks to their own validators
        try:
            self.decoy_spec().validate()
        except GenerationError as exc:
            raise ConfigError(str(exc)) from exc
        self.model_config().validate()

    def decoy_spec(self) -> DecoySpec:
        return DecoySpec(
            num_classes=self.num_classes, image_size=self.image_size,
            train_per_class=self.train_per_class,
            val_per_class=self.val_per_class,
            test_per_class=self.test_per_class,
            confounder_correlation=self.confounder_correlation,
            noise_sigma=self.noise_sigma, patch_size=self.patch_size,
            signal_amplitude=self.signal_amplitude,
            bar_sigma_long=self.bar_sigma_long,
            bar_sigma_short=self.bar_sigma_short,
            mask_threshold=self.mask_threshold)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes, image_size=self.image_size,
            in_channels=1, conv_channels=tuple(self.conv_channels),
            kernel_size=self.kernel_size, padding=self.padding,
            hidden_width=self.hidden_width, dropout_rate=self.dropout_rate,
            seed=self.seed, dtype=self.dtype)


def _parse_value(key: str, text: str, kind: type):
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            parts = [p for p in text.replace(",", " ").split() if p]
            return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc
    return text


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse `key = value` lines; unknown keys and malformed lines are errors."""
    types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    kinds = {name: (tuple if "tuple" in str(t) else int if "int" in str(t)
                    else float if "float" in str(t) else str)
             for name, t in types.items()}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in kinds:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, val, kinds[key])
    if overrides:
        values.update(overrides)
    return RunConfig(**values)


def parse_config(path: str | Path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(), overrides)


def canonical_text(cfg: RunConfig, include_output_dir: bool = True) -> str:
    """Stable `key = value` rendering, fields in declaration order."""
    lines = []
    for f in dataclasses.fields(RunConfig):
        if f.name == "output_dir" and not include_output_dir:
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Digest of every setting except where outputs land on disk."""
    payload = canonical_text(cfg, include_output_dir=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def run_id(cfg: RunConfig) -> str:
    return config_hash(cfg)[:12]
