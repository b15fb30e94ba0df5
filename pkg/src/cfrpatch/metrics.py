"""Attack success rate, SSIM, l_p distortion, transfer and CFR-importance evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .cfr import HardMask, hard_mask, locate, zero_inside_cfr, zero_outside_cfr
from .models import Model, predict
from .tensor import ContractError, DimensionError

L0_THRESHOLD = 1e-8


@dataclass(frozen=True)
class SsimParams:
    """Exponents and stabilisers for the luminance/contrast/structure product.

    ``contrast_term="std"`` uses ``2 sigma_x sigma_y`` in the contrast
    numerator; ``"covariance"`` substitutes the covariance instead.
    ``window="gaussian"`` switches to the 11x11 sliding-window variant.
    """

    a: float = 1.0
    b: float = 1.0
    g: float = 1.0
    dynamic_range: float = 1.0
    k1: float = 0.01
    k2: float = 0.03
    contrast_term: str = "std"
    window: str = "global"

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self) -> float:
        return self.c2 / 2


DEFAULT_SSIM = SsimParams()


def _signed_pow(v, e: float):
    return np.sign(v) * np.abs(v) ** e if e != 1 else v


def ssim_components(x: np.ndarray, y: np.ndarray, p: SsimParams = DEFAULT_SSIM) -> tuple:
    """Luminance, contrast and structure terms from global statistics of two 2-D arrays."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    mx, my = x.mean(), y.mean()
    sx, sy = x.std(), y.std()
    cov = np.mean((x - mx) * (y - my))
    lum = (2 * mx * my + p.c1) / (mx ** 2 + my ** 2 + p.c1)
    num = 2 * sx * sy if p.contrast_term == "std" else 2 * cov
    con = (num + p.c2) / (sx ** 2 + sy ** 2 + p.c2)
    struct = (cov + p.c3) / (sx * sy + p.c3)
    return lum, con, struct


def _gaussian_ssim(x: np.ndarray, y: np.ndarray, p: SsimParams, size: int = 11, sigma: float = 1.5) -> float:
    size = min(size, x.shape[0], x.shape[1])
    ax = np.arange(size) - (size - 1) / 2
    k = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    w = np.outer(k, k)
    w /= w.sum()

    def filt(a):
        return np.einsum("ijkl,kl->ij", sliding_window_view(a, (size, size)), w)

    mx, my = filt(x), filt(y)
    vx = np.maximum(filt(x * x) - mx ** 2, 0)
    vy = np.maximum(filt(y * y) - my ** 2, 0)
    cov = filt(x * y) - mx * my
    sx, sy = np.sqrt(vx), np.sqrt(vy)
    lum = (2 * mx * my + p.c1) / (mx ** 2 + my ** 2 + p.c1)
    num = 2 * sx * sy if p.contrast_term == "std" else 2 * cov
    con = (num + p.c2) / (vx + vy + p.c2)
    struct = (cov + p.c3) / (sx * sy + p.c3)
    return float(np.mean(_signed_pow(lum, p.a) * _signed_pow(con, p.b) * _signed_pow(struct, p.g)))


def ssim(x: np.ndarray, y: np.ndarray, p: SsimParams = DEFAULT_SSIM) -> float:
    """SSIM of two images ([C,H,W] or [H,W]), computed per channel and averaged."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"ssim: shapes differ {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[None], y[None]
    values = []
    for cx, cy in zip(x, y):
        if p.window == "gaussian":
            values.append(_gaussian_ssim(cx, cy, p))
            continue
        lum, con, struct = ssim_components(cx, cy, p)
        values.append(_signed_pow(lum, p.a) * _signed_pow(con, p.b) * _signed_pow(struct, p.g))
    return float(np.mean(values))


def lp_norms(delta: np.ndarray) -> tuple:
    """``(l0, l1, l2, l_inf)``; l0 counts elements (across channels) above 1e-8."""
    d = np.abs(np.asarray(delta, dtype=np.float64)).ravel()
    if d.size == 0:
        return 0, 0.0, 0.0, 0.0
    return int(np.count_nonzero(d > L0_THRESHOLD)), float(d.sum()), float(np.sqrt(np.sum(d * d))), float(d.max())


def asr(results: Sequence) -> float:
    """Percentage of results whose adversarial image is not classified as the label."""
    if not len(results):
        raise ContractError("asr needs at least one result")
    return 100.0 * float(np.mean([r.predicted != r.label for r in results]))


@dataclass
class MetricsReport:
    asr: Optional[float]
    ssim: Optional[float]
    l0: Optional[float]
    l1: Optional[float]
    l2: Optional[float]
    linf: Optional[float]
    n: int

    def to_dict(self) -> dict:
        return asdict(self)


def report(results: Sequence, p: SsimParams = DEFAULT_SSIM) -> MetricsReport:
    if not len(results):
        return MetricsReport(None, None, None, None, None, None, 0)
    norms = np.array([lp_norms(r.delta) for r in results], dtype=np.float64)
    sims = [ssim(r.original, r.adversarial, p) for r in results]
    l0, l1, l2, linf = norms.mean(axis=0)
    return MetricsReport(asr(results), float(np.mean(sims)), float(l0), float(l1),
                         float(l2), float(linf), len(results))


def transfer_eval(results: Sequence, target: Model) -> float:
    """ASR on ``target`` of adversarial images crafted elsewhere.

    Only results whose clean image ``target`` classifies correctly count.
    """
    if not len(results):
        raise ContractError("transfer_eval needs at least one result")
    clean = predict(target, np.stack([r.original for r in results]))
    labels = np.array([r.label for r in results])
    keep = clean == labels
    if not keep.any():
        raise ContractError("target misclassifies every clean image; nothing to evaluate")
    adv = predict(target, np.stack([r.adversarial for r, k in zip(results, keep) if k]))
    return 100.0 * float(np.mean(adv != labels[keep]))


def error_rate(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of ``images`` that ``model`` misclassifies."""
    if not len(labels):
        raise ContractError("error_rate needs at least one image")
    return 100.0 * float(np.mean(predict(model, images) != np.asarray(labels)))


@dataclass
class ImportanceResult:
    clean: float
    adv_cfr: float
    adv_non_cfr: float
    n: int


def importance_images(model: Model, dataset, tau: float, masks: Optional[Sequence[HardMask]] = None) -> list:
    """``(image, adv-cfr, adv-non-cfr, label)`` per sample."""
    out = []
    for i, img in enumerate(dataset):
        m = masks[i] if masks is not None else hard_mask(locate(model, img.pixels, img.label, tau).mask)
        out.append((img.pixels, zero_outside_cfr(img.pixels, m), zero_inside_cfr(img.pixels, m), img.label))
    return out


def cfr_importance_eval(model: Model, dataset, tau: float = 0.2,
                        masks: Optional[Sequence[HardMask]] = None) -> ImportanceResult:
    """Accuracy on clean, region-only (Adv-CFR) and region-removed (Adv-non-CFR) images."""
    triples = importance_images(model, dataset, tau, masks)
    if not triples:
        return ImportanceResult(float("nan"), float("nan"), float("nan"), 0)
    labels = np.array([t[3] for t in triples])
    accs = [float(np.mean(predict(model, np.stack([t[k] for t in triples])) == labels)) for k in range(3)]
    return ImportanceResult(*accs, n=len(triples))
