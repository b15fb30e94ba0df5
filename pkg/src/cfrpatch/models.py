"""Desk-scale CNN classifiers: definition, training, checkpoints."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import DataError, FormatError, LabeledDataset
from .tensor import DimensionError, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CFRM"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid model or training configuration."""


class SpecMismatchError(ValueError):
    """Checkpoint was written for a different model spec."""


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pool: bool = False


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    Each conv block is conv (zero "same" padding) -> ReLU -> optional 2x2
    max-pool. The FC head has ReLU between layers; its last size is the
    class count.
    """

    input_shape: tuple
    conv_blocks: tuple
    fc_sizes: tuple
    class_count: int
    name: str = "cnn"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "conv_blocks", tuple(
            b if isinstance(b, ConvBlock) else ConvBlock(*b) for b in self.conv_blocks))
        object.__setattr__(self, "fc_sizes", tuple(int(s) for s in self.fc_sizes))

    def validate(self) -> None:
        if len(self.input_shape) != 3:
            raise ConfigError(f"input_shape must be [C,H,W], got {self.input_shape}")
        if not self.conv_blocks:
            raise ConfigError("model needs at least one conv block")
        if self.class_count < 1:
            raise ConfigError("class_count must be positive")
        if not self.fc_sizes or self.fc_sizes[-1] != self.class_count:
            raise ConfigError(f"final fc size must equal class_count={self.class_count}")
        self.feature_shapes()

    def feature_shapes(self) -> list:
        """``[C,H,W]`` after each conv (pre-pool) and the flattened FC input size."""
        c, h, w = self.input_shape
        shapes = []
        for b in self.conv_blocks:
            pad = b.kernel // 2
            h = (h + 2 * pad - b.kernel) // b.stride + 1
            w = (w + 2 * pad - b.kernel) // b.stride + 1
            c = b.out_channels
            if h < 1 or w < 1:
                raise ConfigError(f"spatial size collapses to {h}x{w}")
            shapes.append((c, h, w))
            if b.pool:
                if h < 2 or w < 2:
                    raise ConfigError("cannot pool below 2x2")
                h, w = h // 2, w // 2
        return shapes + [c * h * w]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_blocks"] = [asdict(b) for b in self.conv_blocks]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        blocks = tuple(ConvBlock(**b) for b in d["conv_blocks"])
        return cls(tuple(d["input_shape"]), blocks, tuple(d["fc_sizes"]),
                   int(d["class_count"]), d.get("name", "cnn"))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def zoo_spec(name: str, input_shape=(3, 16, 16), class_count: int = 2) -> ModelSpec:
    """Reference architectures: ``cnn-s`` (2 conv blocks), ``cnn-m`` (3, VGG-flavoured)."""
    if name == "cnn-s":
        blocks = (ConvBlock(8, 3, 1, True), ConvBlock(16, 3, 1, True))
        fc = (32, class_count)
    elif name == "cnn-m":
        blocks = (ConvBlock(16, 3, 1, False), ConvBlock(16, 3, 1, True), ConvBlock(32, 3, 1, True))
        fc = (64, class_count)
    else:
        raise ConfigError(f"unknown model {name!r}; choose cnn-s or cnn-m")
    return ModelSpec(tuple(input_shape), blocks, fc, class_count, name)


ZOO = ("cnn-s", "cnn-m")
# SGD learning rates that train each reference net reliably on the synthetic set
DEFAULT_LR = {"cnn-s": 0.05, "cnn-m": 0.02}


@dataclass
class Model:
    spec: ModelSpec
    params: dict  # name -> float64 ndarray, in forward order

    @property
    def last_conv_id(self) -> str:
        return f"conv{len(self.spec.conv_blocks) - 1}"

    @property
    def name(self) -> str:
        return self.spec.name

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, Model) or self.spec != other.spec:
            return False
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[k], other.params[k]) for k in self.params)


def param_shapes(spec: ModelSpec) -> dict:
    shapes = {}
    cin = spec.input_shape[0]
    for i, b in enumerate(spec.conv_blocks):
        shapes[f"conv{i}.weight"] = (b.out_channels, cin, b.kernel, b.kernel)
        shapes[f"conv{i}.bias"] = (b.out_channels,)
        cin = b.out_channels
    n_in = spec.feature_shapes()[-1]
    for i, n_out in enumerate(spec.fc_sizes):
        shapes[f"fc{i}.weight"] = (n_out, n_in)
        shapes[f"fc{i}.bias"] = (n_out,)
        n_in = n_out
    return shapes


def build(spec: ModelSpec, seed: int = 0) -> Model:
    """Initialise weights from U(-b, b) with b = sqrt(6 / fan_in); biases zero."""
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return Model(spec, params)


def forward(model: Model, x: Tensor, param_grad: bool = False) -> tuple:
    """Run the network; return ``(last-conv activations, logits, param tensors)``."""
    spec = model.spec
    p = {k: Tensor(v, requires_grad=param_grad) for k, v in model.params.items()}
    batched = x.ndim == 4
    expected = spec.input_shape
    got = x.shape[1:] if batched else x.shape
    if tuple(got) != expected:
        raise DimensionError(f"{spec.name}: expected input {expected}, got {tuple(got)}")
    h = x
    activations = None
    for i, b in enumerate(spec.conv_blocks):
        h = T.relu(T.conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], b.stride, b.kernel // 2))
        activations = h
        if b.pool:
            h = T.maxpool2d(h, 2)
    h = T.flatten(h, batched)
    last = len(spec.fc_sizes) - 1
    for i in range(len(spec.fc_sizes)):
        h = T.linear(h, p[f"fc{i}.weight"], p[f"fc{i}.bias"])
        if i < last:
            h = T.relu(h)
    return activations, h, p


@dataclass
class ForwardTrace:
    """One inference record kept on a live tape.

    ``image`` is the input leaf; ``activations`` (A, shape [K,u,v]) and
    ``logits`` (Z) stay connected so gradients of any logit with respect to
    either remain computable.
    """

    image: Tensor
    activations: Tensor
    logits: Tensor
    probs: Tensor
    predicted: int


def forward_trace(model: Model, image) -> ForwardTrace:
    x = image if isinstance(image, Tensor) else Tensor(image, requires_grad=True)
    if x.ndim != 3:
        raise DimensionError(f"forward_trace takes a single [C,H,W] image, got {x.shape}")
    a, z, _ = forward(model, x)
    s = T.softmax(z)
    return ForwardTrace(x, a, z, s, int(np.argmax(z.data)))


def predict(model: Model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Class predictions for a stack ``[N,C,H,W]`` (or one ``[C,H,W]`` image)."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return predict(model, images[None])[0]
    out = [np.argmax(forward(model, Tensor(images[i:i + batch_size]))[1].data, axis=1)
           for i in range(0, len(images), batch_size)]
    return np.concatenate(out) if out else np.zeros((0,), dtype=int)


def accuracy(model: Model, data: LabeledDataset) -> float:
    if not len(data):
        return float("nan")
    x, y = data.arrays()
    return float(np.mean(predict(model, x) == y))


# -- training ---------------------------------------------------------------

@dataclass(frozen=True)
class AdversarialMode:
    steps: int = 7
    alpha: float = 2 / 255
    eps: float = 8 / 255
    random_start: bool = True


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    seed: int = 0
    val_fraction: float = 0.2
    adversarial: Optional[AdversarialMode] = None

    def validate(self) -> None:
        if self.lr < 0 or not np.isfinite(self.lr):
            raise ConfigError("learning rate must be finite and non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must be in [0, 1)")
        adv = self.adversarial
        if adv is not None and (adv.eps < 0 or adv.steps < 1 or adv.alpha <= 0):
            raise ConfigError("adversarial mode needs eps >= 0, steps >= 1, alpha > 0")


@dataclass
class EpochLog:
    epoch: int
    loss: float
    train_acc: float
    val_acc: float


def split_train_val(data: LabeledDataset, fraction: float, seed: int) -> tuple:
    n = len(data)
    order = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_val = int(round(n * fraction))
    return data.subset(sorted(order[n_val:])), data.subset(sorted(order[:n_val]))


def train(model: Model, data: LabeledDataset, cfg: TrainConfig) -> tuple:
    """Minibatch SGD with momentum on cross-entropy.

    Returns a new :class:`Model` and the per-epoch :class:`EpochLog` list.
    When ``cfg.adversarial`` is set every batch is replaced by its PGD
    counterpart before the update.
    """
    cfg.validate()
    if not len(data):
        raise DataError("training set is empty")
    for img in data:
        if not 0 <= img.label < model.spec.class_count:
            raise DataError(f"{img.id}: label {img.label} outside [0, {model.spec.class_count})")

    train_set, val_set = split_train_val(data, cfg.val_fraction, cfg.seed)
    x_all, y_all = train_set.arrays()
    model = model.copy()
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    attack_rng = np.random.default_rng([cfg.seed, 2])
    history = []

    if cfg.adversarial is not None:
        from .attacks import BaselineConfig, pgd_arrays
        adv = cfg.adversarial
        pgd_cfg = BaselineConfig(eps=adv.eps, alpha=adv.alpha, steps=adv.steps,
                                 random_start=adv.random_start)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(x_all))
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.adversarial is not None:
                xb = pgd_arrays(model, xb, yb, pgd_cfg, attack_rng)
            _, logits, p = forward(model, Tensor(xb), param_grad=True)
            loss = T.cross_entropy(logits, yb)
            loss.backward()
            for k, v in model.params.items():
                step = p[k].grad + cfg.weight_decay * v if cfg.weight_decay else p[k].grad
                velocity[k] = cfg.momentum * velocity[k] + step
                v -= cfg.lr * velocity[k]
            total_loss += loss.item() * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        log = EpochLog(epoch + 1, total_loss / len(order), correct / len(order),
                       accuracy(model, val_set) if len(val_set) else float("nan"))
        logger.info("epoch %d loss %.4f train_acc %.3f val_acc %.3f",
                    log.epoch, log.loss, log.train_acc, log.val_acc)
        history.append(log)
    return model, history


def train_pgd_protected(model: Model, data: LabeledDataset, cfg: TrainConfig) -> tuple:
    """PGD adversarial training; ``cfg.adversarial`` must be set."""
    if cfg.adversarial is None:
        raise ConfigError("train_pgd_protected needs cfg.adversarial")
    return train(model, data, cfg)


# -- checkpoints ------------------------------------------------------------

def save(model: Model) -> bytes:
    """Serialise to the ``CFRM`` checkpoint layout (little-endian throughout)."""
    manifest, offset, blobs = [], 0, []
    for name, arr in model.params.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps({"spec": model.spec.to_dict(), "spec_hash": model.spec.hash(),
                         "params": manifest, "count": offset}, sort_keys=True).encode("utf-8")
    return (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<I", len(header)) + header + b"".join(blobs))


def load(buf: bytes, expected_spec: Optional[ModelSpec] = None) -> Model:
    if len(buf) < 12 or buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a CFRM checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<I", buf, 8)
    if 12 + hlen > len(buf):
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        manifest = header["params"]
        count = int(header["count"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    if spec.hash() != header.get("spec_hash"):
        raise SpecMismatchError("checkpoint spec does not match its recorded hash")
    if expected_spec is not None and expected_spec.hash() != spec.hash():
        raise SpecMismatchError(
            f"checkpoint is for spec {spec.name} ({spec.hash()[:12]}), "
            f"expected {expected_spec.name} ({expected_spec.hash()[:12]})")
    body = buf[12 + hlen:]
    if len(body) != 8 * count:
        raise FormatError(f"checkpoint body has {len(body)} bytes, expected {8 * count}")
    flat = np.frombuffer(body, dtype="<f8").astype(np.float64)
    params = {}
    for entry in manifest:
        size = int(np.prod(entry["shape"], dtype=int))
        params[entry["name"]] = flat[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).copy()
    expected_shapes = param_shapes(spec)
    if {k: tuple(v.shape) for k, v in params.items()} != expected_shapes:
        raise FormatError("checkpoint parameters inconsistent with spec")
    return Model(spec, params)
