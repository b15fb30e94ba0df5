"""Contributing feature region: Grad-CAM map, soft mask, hard mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import ForwardTrace, forward_trace
from .tensor import ContractError, DimensionError


@dataclass
class ActivationMap:
    values: np.ndarray  # [u, v], >= 0
    label: int
    source: str = ""


@dataclass
class SoftMask:
    weights: np.ndarray  # [H, W]
    tau: float
    suprathreshold_count: int

    @property
    def empty(self) -> bool:
        return self.suprathreshold_count == 0

    @property
    def support(self) -> np.ndarray:
        return self.weights > 0


@dataclass
class HardMask:
    bits: np.ndarray  # [H, W] bool


def gradcam_weights(trace: ForwardTrace, y: int) -> np.ndarray:
    """Kernel weights: spatial mean of d logit_y / d A^(k), one per feature map."""
    n_classes = trace.logits.shape[-1]
    if not 0 <= y < n_classes:
        raise ContractError(f"class {y} outside [0, {n_classes})")
    if not trace.activations.requires_grad:
        raise ContractError("trace has no gradient path from logits to activations")
    trace.logits[y].backward()
    grad = trace.activations.grad
    return grad.mean(axis=(1, 2))


def activation_map(weights: np.ndarray, activations, y: int, source: str = "") -> ActivationMap:
    """ReLU of the weighted sum of feature maps."""
    a = np.asarray(getattr(activations, "data", activations), dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (a.shape[0],):
        raise DimensionError(f"{weights.shape[0] if weights.ndim else 0} weights for {a.shape[0]} maps")
    cam = np.tensordot(weights, a, axes=1)
    return ActivationMap(np.maximum(cam, 0.0), y, source)


def _axis_coords(n_in: int, n_out: int) -> tuple:
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def upsample(cam, height: int, width: int, mode: str = "bilinear") -> np.ndarray:
    """Resize a [u,v] map to [H,W] with corner-aligned bilinear (or nearest) sampling."""
    grid = np.asarray(getattr(cam, "values", cam), dtype=np.float64)
    u, v = grid.shape
    if (u, v) == (height, width):
        return grid.copy()
    if mode == "nearest":
        rows = np.minimum((np.arange(height) * u) // height, u - 1)
        cols = np.minimum((np.arange(width) * v) // width, v - 1)
        return grid[np.ix_(rows, cols)]
    if mode != "bilinear":
        raise ValueError(f"unknown upsampling mode {mode!r}")
    r0, r1, fr = _axis_coords(u, height)
    c0, c1, fc = _axis_coords(v, width)
    top = grid[r0][:, c0] * (1 - fc) + grid[r0][:, c1] * fc
    bottom = grid[r1][:, c0] * (1 - fc) + grid[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bottom * fr[:, None]
    return np.maximum(out, 0.0)


def soft_mask(cam_up: np.ndarray, tau: float) -> SoftMask:
    """Normalise by the max, keep cells >= tau, rescale the kept cells to sum to 1.

    An all-zero map yields an empty mask (``suprathreshold_count == 0``)
    rather than an error.
    """
    cam_up = np.asarray(cam_up, dtype=np.float64)
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if np.any(cam_up < 0):
        raise ValueError("activation map must be non-negative")
    peak = cam_up.max() if cam_up.size else 0.0
    if peak <= 0:
        return SoftMask(np.zeros_like(cam_up), tau, 0)
    norm = cam_up / peak
    keep = norm >= tau
    weights = np.where(keep, norm, 0.0)
    weights /= weights.sum()
    return SoftMask(weights, tau, int(keep.sum()))


def uniform_mask(height: int, width: int, tau: float = 0.0) -> SoftMask:
    """Full-support fallback used when the CFR is empty."""
    return SoftMask(np.full((height, width), 1.0 / (height * width)), tau, height * width)


def hard_mask(mask: SoftMask) -> HardMask:
    return HardMask(mask.weights > 0)


def _check_spatial(image: np.ndarray, mask: HardMask) -> None:
    if image.shape[-2:] != mask.bits.shape:
        raise DimensionError(f"mask {mask.bits.shape} does not match image {image.shape}")


def zero_outside_cfr(image: np.ndarray, mask: HardMask) -> np.ndarray:
    """Adv-CFR image: keep pixels in the region, zero the rest."""
    image = np.asarray(image, dtype=np.float64)
    _check_spatial(image, mask)
    return np.where(mask.bits, image, 0.0)


def zero_inside_cfr(image: np.ndarray, mask: HardMask) -> np.ndarray:
    """Adv-non-CFR image: zero the region, keep the rest."""
    image = np.asarray(image, dtype=np.float64)
    _check_spatial(image, mask)
    return np.where(mask.bits, 0.0, image)


@dataclass
class Region:
    """Everything derived from one clean forward pass."""

    weights: np.ndarray
    cam: ActivationMap
    upsampled: np.ndarray
    mask: SoftMask
    fallback: bool


def locate(model, image: np.ndarray, y: int, tau: float, mode: str = "bilinear") -> Region:
    """Run the clean image once and build its soft mask for class ``y``.

    Falls back to a uniform full-support mask (``fallback=True``) when the
    activation map is identically zero.
    """
    trace = forward_trace(model, image)
    lam = gradcam_weights(trace, y)
    cam = activation_map(lam, trace.activations, y, model.name)
    h, w = np.asarray(image).shape[-2:]
    up = upsample(cam, h, w, mode)
    mask = soft_mask(up, tau)
    fallback = mask.empty
    if fallback:
        mask = uniform_mask(h, w, tau)
    return Region(lam, cam, up, mask, fallback)
