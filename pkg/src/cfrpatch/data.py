"""Datasets: CIFAR-10 binary batches, synthetic shapes, PNG images."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

CIFAR_RECORD = 3073
CIFAR_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                 "dog", "frog", "horse", "ship", "truck"]
SHAPE_NAMES = ["disk", "hbar", "vbar", "ring"]


class FormatError(ValueError):
    """Malformed file content."""


class DataError(ValueError):
    """Dataset content violates a precondition (e.g. label out of range)."""


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [3, H, W] float64 in [0, 1]
    label: int
    id: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3:
            raise DataError(f"{self.id}: expected [C,H,W] pixels, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise DataError(f"{self.id}: pixel values outside [0, 1]")


@dataclass
class LabeledDataset:
    images: list
    class_names: list
    provenance: str = ""

    def __post_init__(self):
        if not self.class_names:
            raise DataError("dataset needs at least one class name")
        shapes = {img.pixels.shape for img in self.images}
        if len(shapes) > 1:
            raise DataError(f"inconsistent image shapes: {sorted(shapes)}")
        for img in self.images:
            if not 0 <= img.label < len(self.class_names):
                raise DataError(f"{img.id}: label {img.label} outside [0, {len(self.class_names)})")

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)

    def __getitem__(self, i):
        return self.images[i]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def arrays(self) -> tuple:
        """Stack into ``(X[N,C,H,W], y[N])``."""
        if not self.images:
            return np.zeros((0,)), np.zeros((0,), dtype=int)
        return (np.stack([img.pixels for img in self.images]),
                np.array([img.label for img in self.images], dtype=int))

    def subset(self, indices: Iterable[int], provenance: Optional[str] = None) -> "LabeledDataset":
        return LabeledDataset([self.images[i] for i in indices], list(self.class_names),
                              provenance or self.provenance)


def data_dir() -> Path:
    return Path(os.environ.get("CFR_DATA_DIR", "data"))


# -- CIFAR-10 ------------------------------------------------------------

def parse_cifar10(buf: bytes, source: str = "<bytes>") -> tuple:
    """Decode a CIFAR-10 binary batch into ``(uint8 pixels [N,3,32,32], labels [N])``."""
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise FormatError(
            f"{source}: length {len(buf)} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record at byte offset {whole * CIFAR_RECORD}")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(int)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{source}: label byte {labels[bad[0]]} > 9 at byte offset "
                          f"{bad[0] * CIFAR_RECORD}")
    return raw[:, 1:].reshape(-1, 3, 32, 32), labels


def encode_cifar10(pixels: np.ndarray, labels: Sequence[int]) -> bytes:
    """Inverse of :func:`parse_cifar10` for uint8 pixels."""
    pixels = np.asarray(pixels, dtype=np.uint8).reshape(len(labels), -1)
    out = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    return out.tobytes()


def load_cifar10(paths, classes: Optional[Sequence[int]] = None,
                 limit: Optional[int] = None, relabel: bool = False) -> LabeledDataset:
    """Load one or more CIFAR-10 binary batch files.

    Args:
        paths: A path or list of paths to ``*.bin`` batch files.
        classes: Keep only these class indices.
        limit: Keep at most this many images (after class filtering).
        relabel: Map the kept classes onto ``0..len(classes)-1``.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images = []
    for path in paths:
        pix, labels = parse_cifar10(Path(path).read_bytes(), str(path))
        for i, (p, y) in enumerate(zip(pix, labels)):
            if classes is not None and y not in classes:
                continue
            label = list(classes).index(y) if (relabel and classes is not None) else int(y)
            images.append(LabeledImage(p / 255.0, label, f"{Path(path).name}:{i}"))
            if limit is not None and len(images) >= limit:
                break
        if limit is not None and len(images) >= limit:
            break
    names = ([CIFAR_CLASSES[c] for c in classes] if (relabel and classes is not None)
             else list(CIFAR_CLASSES))
    return LabeledDataset(images, names, f"cifar10:{','.join(str(p) for p in paths)}")


# -- synthetic shapes -----------------------------------------------------

def _draw_shape(kind: str, size: int, cy: float, cx: float, scale: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dy, dx = yy - cy, xx - cx
    r = np.hypot(dy, dx)
    if kind == "disk":
        return (r <= scale).astype(float)
    if kind == "ring":
        return ((r <= scale + 0.5) & (r >= scale - 1.0)).astype(float)
    if kind == "hbar":
        return ((np.abs(dy) <= scale * 0.4) & (np.abs(dx) <= scale * 1.6)).astype(float)
    if kind == "vbar":
        return ((np.abs(dx) <= scale * 0.4) & (np.abs(dy) <= scale * 1.6)).astype(float)
    raise ValueError(f"unknown shape {kind!r}")


def synth_shapes(n: int, seed: int = 0, classes: int = 2, size: int = 16,
                 contrast: tuple = (0.1, 0.25), noise: float = 0.1,
                 background: tuple = (0.2, 0.5)) -> LabeledDataset:
    """Deterministic 3x``size``x``size`` images of one faint shape on a grey, lightly noisy background.

    Class ``i`` draws ``SHAPE_NAMES[i]``; labels are assigned round-robin so
    every class count is within one of ``n / classes``. Position, radius,
    colour and intensity are jittered per image.
    """
    if n < 1:
        raise ValueError("synth_shapes needs n >= 1")
    if not 1 <= classes <= len(SHAPE_NAMES):
        raise ValueError(f"classes must be in [1, {len(SHAPE_NAMES)}]")
    rng = np.random.default_rng(seed)
    images = []
    for i in range(n):
        label = i % classes
        scale = rng.uniform(2.5, 3.5) * size / 16
        margin = 1.6 * scale + 1
        cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
        shape = _draw_shape(SHAPE_NAMES[label], size, cy, cx, scale)
        colour = rng.uniform(*contrast, size=3)
        level = rng.uniform(*background, size=3)[:, None, None]
        field = level + rng.uniform(0.0, noise, size=(3, size, size))
        pix = field + colour[:, None, None] * shape
        images.append(LabeledImage(np.clip(pix, 0.0, 1.0), label, f"synth:{seed}:{i}"))
    return LabeledDataset(images, SHAPE_NAMES[:classes], f"synth(n={n},seed={seed},classes={classes})")


# -- PNG --------------------------------------------------------------------

def to_uint8(image: np.ndarray) -> np.ndarray:
    """[C,H,W] or [H,W] floats in [0,1] -> HWC/HW uint8, round to nearest."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    arr = np.rint(arr * 255.0).astype(np.uint8)
    return arr.transpose(1, 2, 0) if arr.ndim == 3 else arr


def write_png(image: np.ndarray, path) -> None:
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    """Read a PNG as [3,H,W] floats in [0,1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: not a readable PNG ({exc})") from exc
    return arr.transpose(2, 0, 1) / 255.0


def scale_for_display(delta: np.ndarray) -> np.ndarray:
    """Min-max rescale a perturbation to [0,1] for viewing. Not invertible."""
    delta = np.asarray(delta, dtype=np.float64)
    lo, hi = delta.min(), delta.max()
    if hi - lo <= 0:
        return np.full_like(delta, 0.5)
    return (delta - lo) / (hi - lo)


def load_png_dir(path, class_names: Sequence[str]) -> LabeledDataset:
    """Images laid out as ``path/<class name>/*.png``."""
    images = []
    for label, name in enumerate(class_names):
        for f in sorted((Path(path) / name).glob("*.png")):
            images.append(LabeledImage(read_png(f), label, f"{name}/{f.name}"))
    return LabeledDataset(images, list(class_names), f"png:{path}")


def concat(datasets: Sequence[LabeledDataset]) -> LabeledDataset:
    images = [img for d in datasets for img in d.images]
    return LabeledDataset(images, list(datasets[0].class_names),
                          "+".join(d.provenance for d in datasets))


__all__ = [
    "CIFAR_CLASSES", "DataError", "FormatError", "LabeledDataset", "LabeledImage",
    "encode_cifar10", "load_cifar10", "load_png_dir", "parse_cifar10", "read_png",
    "scale_for_display", "synth_shapes", "write_png", "data_dir", "concat",
]
