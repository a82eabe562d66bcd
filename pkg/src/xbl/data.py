"""Synthetic decoy benchmark: oriented-bar signals with corner-patch leaks.

Every image carries a class-specific oriented Gaussian bar through the
image center (the genuine signal, recorded in ``relevance_mask``).  On the
confounded splits a small corner patch whose position and intensity encode
the class is stamped on top with probability ``confounder_correlation``
(the shortcut, recorded in ``confounder_mask``).  The two masks are
disjoint by construction and generation fails loudly if they ever touch.

Splits:

* ``train`` / ``validation``: patch present with probability rho, matching
  the image's own class.
* ``test_clean``: no patches at all.
* ``test_swapped``: patch always present but drawn uniformly over all
  classes, so it carries no information about the label.  A patch-reading
  shortcut model scores about 1/K here.

Same spec + seed reproduces every pixel bit-for-bit; each image gets its
own derived RNG so generation order cannot leak between images.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DatasetError, GenerationError, ParseError
from .utils import atomic_write_bytes, atomic_write_text, derive_rng

__all__ = [
    "DecoySpec",
    "LabeledImage",
    "DatasetSplit",
    "SPLIT_NAMES",
    "generate_decoy_dataset",
    "write_pgm",
    "read_pgm",
    "save_split",
    "load_image_dir",
    "stack_pixels",
    "labels_of",
    "corner_rule_accuracy",
]

SPLIT_NAMES = ("train", "validation", "test_clean", "test_swapped")


@dataclass(frozen=True)
class DecoySpec:
    num_classes: int = 4
    image_size: int = 32
    train_per_class: int = 200
    val_per_class: int = 100
    test_per_class: int = 100
    confounder_correlation: float = 1.0
    noise_sigma: float = 0.05
    patch_size: int = 4
    signal_amplitude: float = 0.5
    bar_sigma_long: float = 6.0
    bar_sigma_short: float = 2.0
    mask_threshold: float = 0.2

    def validate(self) -> None:
        if self.num_classes < 2:
            raise GenerationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size < 8:
            raise GenerationError(f"image_size must be >= 8, got {self.image_size}")
        if min(self.train_per_class, self.val_per_class, self.test_per_class) < 1:
            raise GenerationError("per-class split sizes must be positive")
        if not 0.0 <= self.confounder_correlation <= 1.0:
            raise GenerationError(
                f"confounder_correlation must be in [0, 1], got {self.confounder_correlation}")
        if self.noise_sigma < 0:
            raise GenerationError("noise_sigma must be non-negative")
        if not 0 < self.patch_size <= self.image_size // 4:
            raise GenerationError(
                f"patch_size {self.patch_size} must fit well inside image_size {self.image_size}")
        if not 0 < self.signal_amplitude <= 1:
            raise GenerationError("signal_amplitude must be in (0, 1]")
        if self.bar_sigma_long <= 0 or self.bar_sigma_short <= 0:
            raise GenerationError("bar sigmas must be positive")
        if not 0 < self.mask_threshold < 1:
            raise GenerationError("mask_threshold must be in (0, 1)")


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    label: int
    relevance_mask: np.ndarray | None = None   # (H, W) uint8 in {0, 1}
    confounder_mask: np.ndarray | None = None  # (H, W) uint8 in {0, 1}


@dataclass
class DatasetSplit:
    train: list[LabeledImage] = field(default_factory=list)
    validation: list[LabeledImage] = field(default_factory=list)
    test_clean: list[LabeledImage] = field(default_factory=list)
    test_swapped: list[LabeledImage] = field(default_factory=list)

    def by_name(self, name: str) -> list[LabeledImage]:
        if name not in SPLIT_NAMES:
            raise DatasetError(f"unknown split {name!r}, expected one of {SPLIT_NAMES}")
        return getattr(self, name)


def stack_pixels(images: list[LabeledImage]) -> np.ndarray:
    return np.stack([im.pixels for im in images])


def labels_of(images: list[LabeledImage]) -> np.ndarray:
    return np.array([im.label for im in images], dtype=np.int64)


def _bar_field(spec: DecoySpec, label: int) -> np.ndarray:
    """Unit-amplitude oriented Gaussian bar for one class, angle k*180/K."""
    size = spec.image_size
    angle = np.pi * label / spec.num_classes
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    # u runs along the bar, v across it
    u = xx * np.cos(angle) + yy * np.sin(angle)
    v = -xx * np.sin(angle) + yy * np.cos(angle)
    field_ = np.exp(-(u ** 2 / (2 * spec.bar_sigma_long ** 2)
                      + v ** 2 / (2 * spec.bar_sigma_short ** 2)))
    return field_


def _corner_region(spec: DecoySpec, corner: int) -> tuple[slice, slice]:
    """Patch location for corner id 0..3: TL, TR, BL, BR."""
    p = spec.patch_size
    s = spec.image_size
    rows = slice(0, p) if corner in (0, 1) else slice(s - p, s)
    cols = slice(0, p) if corner in (0, 2) else slice(s - p, s)
    return rows, cols


def _patch_spec(spec: DecoySpec, patch_class: int) -> tuple[tuple[slice, slice], float]:
    region = _corner_region(spec, patch_class % 4)
    intensity = (patch_class + 1) / spec.num_classes
    return region, intensity


def _make_image(spec: DecoySpec, label: int, rng: np.random.Generator,
                patch_class: int | None) -> LabeledImage:
    bar = _bar_field(spec, label)
    base = spec.signal_amplitude * bar
    relevance = (bar > spec.mask_threshold).astype(np.uint8)
    confounder = np.zeros_like(relevance)
    if patch_class is not None:
        region, intensity = _patch_spec(spec, patch_class)
        base[region] = intensity
        confounder[region] = 1
    if (relevance & confounder).any():
        raise GenerationError(
            f"signal and confounder masks overlap for class {label} "
            f"(patch class {patch_class}); shrink the bar or the patch")
    noisy = base + rng.normal(0.0, spec.noise_sigma, size=base.shape)
    pixels = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    return LabeledImage(pixels=pixels, label=label,
                        relevance_mask=relevance, confounder_mask=confounder)


def generate_decoy_dataset(spec: DecoySpec, seed: int) -> DatasetSplit:
    """Build all four splits; class counts are balanced inside each split."""
    spec.validate()
    out = DatasetSplit()
    plans = (
        ("train", spec.train_per_class, "correlated"),
        ("validation", spec.val_per_class, "correlated"),
        ("test_clean", spec.test_per_class, "clean"),
        ("test_swapped", spec.test_per_class, "swapped"),
    )
    for split_tag, (split_name, per_class, mode) in enumerate(plans):
        bucket = out.by_name(split_name)
        for label in range(spec.num_classes):
            for index in range(per_class):
                rng = derive_rng(seed, "decoy", split_tag, label, index)
                if mode == "correlated":
                    with_patch = rng.random() < spec.confounder_correlation
                    patch_class = label if with_patch else None
                elif mode == "clean":
                    patch_class = None
                else:  # swapped: patch class independent of the label
                    patch_class = int(rng.integers(0, spec.num_classes))
                bucket.append(_make_image(spec, label, rng, patch_class))
    return out


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255) reading and writing


def write_pgm(path: str | Path, grid: np.ndarray) -> None:
    """Store a [0, 1] grid as binary PGM; quantization is round(v * 255)."""
    arr = np.asarray(grid)
    if arr.ndim != 2:
        raise DatasetError(f"PGM grids must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise DatasetError("refusing to write an empty PGM")
    scaled = np.rint(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + scaled.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Load a binary PGM back into a float32 grid in [0, 1] (pixel/255)."""
    blob = Path(path).read_bytes()
    pos = 0

    def fail(msg: str):
        raise ParseError(f"{path}: {msg} at byte {pos}")

    def next_token() -> bytes:
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos:pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        if pos >= len(blob):
            fail("unexpected end of header")
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        return blob[start:pos]

    magic = next_token()
    if magic != b"P5":
        fail(f"bad magic {magic!r}, expected b'P5'")
    dims = []
    for _ in range(3):
        token = next_token()
        if not token.isdigit():
            fail(f"non-numeric header field {token!r}")
        dims.append(int(token))
    width, height, maxval = dims
    if maxval != 255:
        fail(f"unsupported maxval {maxval}, expected 255")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        fail("missing whitespace before pixel payload")
    pos += 1
    expected = width * height
    payload = blob[pos:]
    if len(payload) != expected:
        fail(f"payload has {len(payload)} bytes, expected {expected}")
    grid = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return (grid.astype(np.float32) / 255.0)


# ---------------------------------------------------------------------------
# on-disk dataset layout


def _class_dir(label: int) -> str:
    return f"class_{label}"


def _mask_to_grid(mask: np.ndarray) -> np.ndarray:
    return mask.astype(np.float32)


def save_split(root: str | Path, dataset: DatasetSplit) -> None:
    """Write ``<root>/<split>/<class_k>/img_####.pgm`` plus mask sidecars
    (``.mask.pgm`` / ``.conf.pgm``) and a manifest.csv."""
    root = Path(root)
    rows = []
    for split_name in SPLIT_NAMES:
        by_class: dict[int, int] = {}
        for image in dataset.by_name(split_name):
            index = by_class.get(image.label, 0)
            by_class[image.label] = index + 1
            stem = f"{split_name}/{_class_dir(image.label)}/img_{index:04d}"
            write_pgm(root / f"{stem}.pgm", image.pixels)
            if image.relevance_mask is not None:
                write_pgm(root / f"{stem}.mask.pgm",
                          _mask_to_grid(image.relevance_mask))
            if image.confounder_mask is not None:
                write_pgm(root / f"{stem}.conf.pgm",
                          _mask_to_grid(image.confounder_mask))
            rows.append((f"{stem}.pgm", split_name, image.label))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "split", "class"])
    writer.writerows(rows)
    atomic_write_text(root / "manifest.csv", buf.getvalue())


def _read_mask(path: Path) -> np.ndarray | None:
    if not path.exists():
        return None
    return (read_pgm(path) >= 0.5).astype(np.uint8)


def load_image_dir(root: str | Path) -> DatasetSplit:
    """Reload a directory written by ``save_split``.

    Class indices come from the sorted class directory names; images are
    ordered lexicographically inside each class.  Missing mask sidecars
    simply leave the optional fields unset.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory {root} does not exist")
    out = DatasetSplit()
    shape_seen: tuple[int, ...] | None = None
    for split_name in SPLIT_NAMES:
        split_dir = root / split_name
        if not split_dir.is_dir():
            raise DatasetError(f"missing split directory {split_dir}")
        class_dirs = sorted(d for d in split_dir.iterdir() if d.is_dir())
        if not class_dirs:
            raise DatasetError(f"split {split_name} has no class directories")
        bucket = out.by_name(split_name)
        for label, class_dir in enumerate(class_dirs):
            mains = sorted(p for p in class_dir.glob("*.pgm")
                           if not p.name.endswith((".mask.pgm", ".conf.pgm")))
            if not mains:
                raise DatasetError(f"class directory {class_dir} holds no images")
            for main in mains:
                pixels = read_pgm(main)
                if shape_seen is None:
                    shape_seen = pixels.shape
                elif pixels.shape != shape_seen:
                    raise DatasetError(
                        f"{main}: image shape {pixels.shape} conflicts with {shape_seen}")
                stem = str(main)[:-len(".pgm")]
                bucket.append(LabeledImage(
                    pixels=pixels,
                    label=label,
                    relevance_mask=_read_mask(Path(f"{stem}.mask.pgm")),
                    confounder_mask=_read_mask(Path(f"{stem}.conf.pgm")),
                ))
    return out


# ---------------------------------------------------------------------------
# sanity rule used by the generator's own tests


def corner_rule_accuracy(images: list[LabeledImage], spec: DecoySpec) -> float:
    """Accuracy of the trivial shortcut rule "read the brightest corner".

    The rule finds the corner with the highest mean intensity and maps it to
    the class whose patch intensity best matches that mean.  On perfectly
    correlated data it is exact; on decorrelated data it hovers near 1/K.
    """
    if not images:
        raise DatasetError("corner_rule_accuracy needs at least one image")
    hits = 0
    for image in images:
        means = [float(image.pixels[_corner_region(spec, c)].mean()) for c in range(4)]
        corner = int(np.argmax(means))
        candidates = [k for k in range(spec.num_classes) if k % 4 == corner]
        guess = min(candidates,
                    key=lambda k: abs(means[corner] - (k + 1) / spec.num_classes))
        hits += int(guess == image.label)
    return hits / len(images)
