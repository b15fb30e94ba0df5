"""CFR patch attack and the FGSM / PGD baselines."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .cfr import locate
from .data import LabeledDataset, LabeledImage
from .models import Model, forward, predict
from .tensor import Tensor

logger = logging.getLogger(__name__)

METHODS = ("cfr", "fgsm", "pgd")


class NumericError(ArithmeticError):
    """Loss or gradient became non-finite during an attack."""


def default_step_size(height: int) -> float:
    """Step size by input resolution: 10 up to 32x32, 20 above."""
    return 10.0 if height <= 32 else 20.0


@dataclass(frozen=True)
class AttackConfig:
    """Hyper-parameters of the CFR attack.

    ``eta=None`` picks :func:`default_step_size` from the image height.
    """

    iterations: int = 20
    eta: Optional[float] = None
    temperature: float = 0.1
    beta: float = 1.0
    tau: float = 0.2
    early_stop: bool = False
    seed: int = 0
    init_scale: float = 1e-3
    norm_floor: float = 1e-6
    upsample_mode: str = "bilinear"

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.temperature <= 0:
            raise ValueError("inverse temperature T must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0 <= self.tau <= 1:
            raise ValueError("tau must be in [0, 1]")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("step size must be positive")

    def step_size(self, height: int) -> float:
        return self.eta if self.eta is not None else default_step_size(height)


@dataclass(frozen=True)
class BaselineConfig:
    """l_inf-bounded sign-gradient attack settings (FGSM uses ``eps`` only)."""

    eps: float = 16 / 255
    alpha: float = 2 / 255
    steps: int = 20
    random_start: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.eps < 0 or self.alpha <= 0 or self.steps < 0:
            raise ValueError("need eps >= 0, alpha > 0, steps >= 0")


@dataclass
class AttackResult:
    image_id: str
    label: int
    original: np.ndarray
    delta: np.ndarray
    adversarial: np.ndarray
    success: bool
    predicted: int
    method: str
    loss_history: list = field(default_factory=list)
    iterations_used: int = 0
    mask_stats: dict = field(default_factory=dict)
    error: Optional[str] = None


def _finalize(model: Model, image: LabeledImage, x_adv: np.ndarray, method: str, **extra) -> AttackResult:
    x = image.pixels
    delta = np.clip(x_adv, 0.0, 1.0) - x
    x_adv = np.clip(x + delta, 0.0, 1.0)
    pred = int(predict(model, x_adv))
    return AttackResult(image.id, image.label, x, delta, x_adv, pred != image.label,
                        pred, method, **extra)


# -- CFR attack ---------------------------------------------------------------

def loss_j(model: Model, x: np.ndarray, y: int, delta: Tensor, mask: np.ndarray,
           temperature: float, beta: float, norm_floor: float = 1e-6) -> tuple:
    """Build ``J = -log S_y(x + delta) / T + beta / max(||delta * mask||_2, floor)``.

    Returns ``(J, logits, clamped)``; call ``J.backward()`` for ``delta.grad``.
    """
    _, logits, _ = forward(model, Tensor(x) + delta)
    ce = -T.log_softmax(logits)[y]
    j = ce * (1.0 / temperature)
    clamped = False
    if beta:
        norm = T.l2_norm(delta * mask)
        clamped = bool(norm.item() <= norm_floor)
        j = j + beta / T.maximum(norm, norm_floor)
    return j, logits, clamped


def cfr_attack(model: Model, image: LabeledImage, cfg: AttackConfig = AttackConfig()) -> AttackResult:
    """Gradient ascent on ``J`` restricted to the soft-mask region of ``image``.

    The mask comes from one Grad-CAM pass on the clean image. Each step is
    ``delta <- (delta + eta * grad J) * mask`` followed by clipping
    ``x + delta`` into [0, 1] and re-deriving ``delta`` from the clipped image.
    """
    cfg.validate()
    x, y = image.pixels, image.label
    region = locate(model, x, y, cfg.tau, cfg.upsample_mode)
    mask = region.mask.weights[None]  # broadcast over channels
    eta = cfg.step_size(x.shape[-2])
    rng = np.random.default_rng(cfg.seed)

    delta = rng.uniform(-cfg.init_scale, cfg.init_scale, size=x.shape) * (mask > 0)
    delta = np.clip(x + delta, 0.0, 1.0) - x
    history, used, clamped_any = [], 0, False
    for _ in range(cfg.iterations):
        d = Tensor(delta, requires_grad=True)
        j, logits, clamped = loss_j(model, x, y, d, mask, cfg.temperature, cfg.beta, cfg.norm_floor)
        clamped_any |= clamped
        value = j.item()
        if not np.isfinite(value):
            raise NumericError(f"{image.id}: non-finite loss at iteration {used + 1}")
        if cfg.early_stop and int(np.argmax(logits.data)) != y:
            break
        j.backward()
        if not np.all(np.isfinite(d.grad)):
            raise NumericError(f"{image.id}: non-finite gradient at iteration {used + 1}")
        history.append(value)
        used += 1
        delta = (delta + eta * d.grad) * mask
        delta = np.clip(x + delta, 0.0, 1.0) - x
    result = _finalize(model, image, x + delta, "cfr", loss_history=history, iterations_used=used)
    result.mask_stats = {
        "suprathreshold_count": region.mask.suprathreshold_count,
        "l0": int(np.count_nonzero(np.abs(result.delta) > 1e-8)),
        "empty_cfr": region.fallback,
        "regularizer_clamped": clamped_any,
    }
    return result


# -- baselines -----------------------------------------------------------------

def input_gradient(model: Model, x: np.ndarray, y) -> np.ndarray:
    """Gradient of summed cross-entropy with respect to the input (single or batch)."""
    xt = Tensor(x, requires_grad=True)
    _, logits, _ = forward(model, xt)
    if xt.ndim == 3:
        loss = T.cross_entropy(logits, int(y))
    else:
        loss = T.cross_entropy(logits, y) * float(len(y))
    loss.backward()
    return xt.grad


def pgd_arrays(model: Model, x: np.ndarray, y, cfg: BaselineConfig,
               rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sign-gradient ascent projected onto the l_inf ball of radius ``eps`` and [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if cfg.random_start:
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        x_adv = np.clip(x + rng.uniform(-cfg.eps, cfg.eps, size=x.shape), 0.0, 1.0)
    else:
        x_adv = x.copy()
    for _ in range(cfg.steps):
        g = input_gradient(model, x_adv, y)
        x_adv = x_adv + cfg.alpha * np.sign(g)
        x_adv = np.clip(np.clip(x_adv, x - cfg.eps, x + cfg.eps), 0.0, 1.0)
    return x_adv


def fgsm(model: Model, image: LabeledImage, eps: float) -> AttackResult:
    x = image.pixels
    g = input_gradient(model, x, image.label)
    return _finalize(model, image, x + eps * np.sign(g), "fgsm", iterations_used=1)


def pgd(model: Model, image: LabeledImage, cfg: BaselineConfig = BaselineConfig()) -> AttackResult:
    cfg.validate()
    x_adv = pgd_arrays(model, image.pixels, image.label, cfg, np.random.default_rng(cfg.seed))
    return _finalize(model, image, x_adv, "pgd", iterations_used=cfg.steps)


# -- batches ---------------------------------------------------------------------

def image_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def run_one(model: Model, image: LabeledImage, method: str,
            config: Union[AttackConfig, BaselineConfig, float]) -> AttackResult:
    if method == "cfr":
        return cfr_attack(model, image, config)
    if method == "pgd":
        return pgd(model, image, config)
    if method == "fgsm":
        eps = config.eps if isinstance(config, BaselineConfig) else float(config)
        return fgsm(model, image, eps)
    raise ValueError(f"unknown attack method {method!r}; choose from {METHODS}")


def _run_indexed(args) -> AttackResult:
    model, image, method, config, seed = args
    if isinstance(config, (AttackConfig, BaselineConfig)):
        config = replace(config, seed=seed)
    try:
        return run_one(model, image, method, config)
    except (NumericError, ArithmeticError, ValueError) as exc:
        logger.warning("attack on %s failed: %s", image.id, exc)
        x = image.pixels
        return AttackResult(image.id, image.label, x, np.zeros_like(x), x.copy(), False,
                            image.label, method, error=str(exc))


def attack_batch(model: Model, dataset: Union[LabeledDataset, list], method: str,
                 config, workers: int = 1, master_seed: int = 0) -> list:
    """Attack every image; results do not depend on ``workers``.

    Each image gets its own seed derived from ``(master_seed, index)``.
    Per-image failures are recorded in ``AttackResult.error``.
    """
    if method not in METHODS:
        raise ValueError(f"unknown attack method {method!r}; choose from {METHODS}")
    images = list(dataset)
    jobs = [(model, img, method, config, image_seed(master_seed, i)) for i, img in enumerate(images)]
    if workers <= 1 or len(jobs) <= 1:
        return [_run_indexed(job) for job in jobs]
    chunk = max(1, len(jobs) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_indexed, jobs, chunksize=chunk))
