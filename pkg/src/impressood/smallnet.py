"""Small BatchNorm convolutional classifier with activation taps.

Every block is conv3x3 -> BatchNorm -> ReLU -> 2x2 max-pool and its output
is one tapped layer. The head is global average pooling followed by a
linear layer, so the class logits are linear in the last tap.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _store
from .datagen import ConfigError, ImageBatch

logger = logging.getLogger(__name__)

# torch's BatchNorm ``momentum`` is the weight of the new batch, i.e. 1 - lambda
BN_LAMBDA = 0.9


class InputError(ValueError):
    """Input tensor or argument does not fit the model."""


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, msg: str):
        super().__init__(f"epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass(frozen=True)
class ArchConfig:
    block_channels: Tuple[int, ...] = (16, 32, 64)
    num_classes: int = 4
    in_channels: int = 3
    image_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))

    @property
    def num_layers(self) -> int:
        return len(self.block_channels)

    def tap_sizes(self) -> List[int]:
        return [self.image_size >> (i + 1) for i in range(self.num_layers)]

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("at least one block is required")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.image_size % (2 ** self.num_layers) != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by 2**{self.num_layers}; "
                "every block halves the spatial size")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["block_channels"] = list(self.block_channels)
        return d


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0


class SmallNet(nn.Module):
    def __init__(self, arch: ArchConfig):
        super().__init__()
        arch.validate()
        self.arch = arch
        self.convs = nn.ModuleList()
        self.bns = nn.ModuleList()
        ch = arch.in_channels
        for out_ch in arch.block_channels:
            self.convs.append(nn.Conv2d(ch, out_ch, 3, padding=1, bias=False))
            self.bns.append(nn.BatchNorm2d(out_ch, momentum=1.0 - BN_LAMBDA))
            ch = out_ch
        self.head = nn.Linear(ch, arch.num_classes)

    def block(self, l: int, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Run block ``l``; returns (BN input, block output / tap)."""
        z = self.convs[l](x)
        a = F.max_pool2d(F.relu(self.bns[l](z)), 2)
        return z, a

    def head_from_tap(self, tap: torch.Tensor) -> torch.Tensor:
        return self.head(tap.mean(dim=(2, 3)))

    def forward_from(self, l: int, tap: torch.Tensor) -> torch.Tensor:
        """Logits given the tap of layer ``l`` (replays the remaining blocks)."""
        a = tap
        for j in range(l + 1, self.arch.num_layers):
            _, a = self.block(j, a)
        return self.head_from_tap(a)

    def run(self, x: torch.Tensor):
        """Returns (logits, taps, bn_inputs)."""
        taps, bn_inputs = [], []
        a = x
        for l in range(self.arch.num_layers):
            z, a = self.block(l, a)
            bn_inputs.append(z)
            taps.append(a)
        return self.head_from_tap(a), taps, bn_inputs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.run(x)[0]


def build_model(arch: ArchConfig, seed: int) -> SmallNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SmallNet(arch)


def bn_running_update(old: np.ndarray, batch_stat: np.ndarray, lam: float = BN_LAMBDA) -> np.ndarray:
    """Running-average rule used by BatchNorm: ``lam * old + (1 - lam) * batch``."""
    return lam * np.asarray(old) + (1.0 - lam) * np.asarray(batch_stat)


# --- checkpoint --------------------------------------------------------------

@dataclass
class Checkpoint:
    """Fixed trained classifier: architecture, weights and training metadata."""

    arch: ArchConfig
    state: Dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    _models: Dict[torch.dtype, SmallNet] = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def from_model(cls, model: SmallNet, metadata: Optional[dict] = None) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(model.arch, state, dict(metadata or {}))

    def model(self, dtype: torch.dtype = torch.float32) -> SmallNet:
        """Frozen eval-mode module (cached per dtype)."""
        if dtype not in self._models:
            m = SmallNet(self.arch)
            m.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.state.items()})
            m = m.to(dtype)
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)
            self._models[dtype] = m
        return self._models[dtype]

    def bn_stats(self) -> List[Dict[str, np.ndarray]]:
        return [
            {"running_mean": self.state[f"bns.{l}.running_mean"].astype(np.float64),
             "running_var": self.state[f"bns.{l}.running_var"].astype(np.float64),
             "lambda": BN_LAMBDA}
            for l in range(self.arch.num_layers)
        ]

    def _payload_meta(self) -> dict:
        return {"arch": self.arch.to_dict(), "metadata": _store.to_jsonable(self.metadata)}

    @property
    def fingerprint(self) -> str:
        return _store.payload_digest(self.state, {"arch": self.arch.to_dict()})

    def save(self, path: str | Path) -> None:
        _store.write_container(path, "checkpoint", self.state, self._payload_meta())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, meta = _store.read_container(path, "checkpoint")
        arch = ArchConfig(**meta["arch"])
        ckpt = cls(arch, arrays, meta.get("metadata", {}))
        for name, arr in arrays.items():
            if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
                raise _store.FormatError(f"{path}: non-finite values in {name}")
        return ckpt


ModelLike = Union[Checkpoint, SmallNet]
BatchLike = Union[ImageBatch, np.ndarray, torch.Tensor]


def _as_model(model: ModelLike, dtype: torch.dtype) -> SmallNet:
    if isinstance(model, Checkpoint):
        return model.model(dtype)
    return model


def _as_tensor(batch: BatchLike, arch: ArchConfig, dtype: torch.dtype) -> torch.Tensor:
    if isinstance(batch, ImageBatch):
        batch = batch.pixels
    x = torch.as_tensor(np.asarray(batch) if not isinstance(batch, torch.Tensor) else batch)
    expected = (arch.in_channels, arch.image_size, arch.image_size)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise InputError(f"expected input of shape [n, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}], got {tuple(x.shape)}")
    return x.to(dtype)


# --- training ----------------------------------------------------------------

@torch.no_grad()
def accuracy(model: ModelLike, data: ImageBatch, batch_size: int = 512) -> float:
    logits, _ = forward_with_taps(model, data, batch_size=batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def train(model: SmallNet, train_set: ImageBatch, hyper: TrainConfig = TrainConfig(),
          test_set: Optional[ImageBatch] = None) -> Checkpoint:
    """SGD training; returns the frozen checkpoint (the module is not reused)."""
    if train_set.labels is None:
        raise InputError("training requires a labelled dataset")
    x_all = _as_tensor(train_set, model.arch, torch.float32)
    y_all = torch.as_tensor(train_set.labels, dtype=torch.long)
    opt = torch.optim.SGD(model.parameters(), lr=hyper.lr, momentum=hyper.momentum)
    rng = np.random.default_rng([hyper.seed, 0x7A])
    n = len(x_all)
    for epoch in range(hyper.epochs):
        model.train()
        perm = torch.as_tensor(rng.permutation(n))
        total, count = 0.0, 0
        for start in range(0, n, hyper.batch_size):
            idx = perm[start:start + hyper.batch_size]
            if len(idx) < 2:
                continue  # BatchNorm needs two samples
            loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise TrainingError(epoch, f"non-finite loss {loss.item()}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        logger.info("epoch %d loss %.4f", epoch, total / max(count, 1))
    model.eval()
    meta = {"seed": hyper.seed, "epochs": hyper.epochs, "lr": hyper.lr,
            "momentum": hyper.momentum, "batch_size": hyper.batch_size}
    ckpt = Checkpoint.from_model(model, meta)
    if test_set is not None:
        ckpt.metadata["test_accuracy"] = accuracy(ckpt, test_set)
    return ckpt


# --- inference and gradients ------------------------------------------------------

@torch.no_grad()
def forward_with_taps(model: ModelLike, batch: BatchLike, dtype: torch.dtype = torch.float32,
                      batch_size: int = 1024) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Eval-mode forward; returns logits [n, C] and one tap array [n, h, d, d] per layer."""
    net = _as_model(model, dtype)
    if net.training:
        raise InputError("forward_with_taps requires an eval-mode model")
    x = _as_tensor(batch, net.arch, dtype)
    logits, taps = [], [[] for _ in range(net.arch.num_layers)]
    for start in range(0, max(len(x), 1), batch_size):
        lg, tp, _ = net.run(x[start:start + batch_size])
        logits.append(lg.numpy())
        for l, t in enumerate(tp):
            taps[l].append(t.numpy())
    return np.concatenate(logits), [np.concatenate(t) for t in taps]


Objective = Callable[[torch.Tensor, List[torch.Tensor]], torch.Tensor]


def input_gradient(model: ModelLike, batch: BatchLike, objective: Objective,
                   dtype: torch.dtype = torch.float64) -> np.ndarray:
    """Gradient of ``objective(logits, taps)`` with respect to the input pixels."""
    net = _as_model(model, dtype)
    x = _as_tensor(batch, net.arch, dtype).clone().requires_grad_(True)
    logits, taps, _ = net.run(x)
    value = objective(logits, taps)
    if not isinstance(value, torch.Tensor) or value.numel() != 1:
        raise InputError("objective must return a scalar tensor")
    if not value.requires_grad:
        return np.zeros(tuple(x.shape), dtype=np.float64 if dtype == torch.float64 else np.float32)
    (grad,) = torch.autograd.grad(value.reshape(()), x)
    return grad.numpy()


def activation_gradients(model: ModelLike, batch: BatchLike, c: int,
                         dtype: torch.dtype = torch.float32) -> List[np.ndarray]:
    """Per-sample gradients of the class-``c`` logit with respect to every tap."""
    net = _as_model(model, dtype)
    if not 0 <= c < net.arch.num_classes:
        raise InputError(f"class {c} outside [0, {net.arch.num_classes})")
    x = _as_tensor(batch, net.arch, dtype).clone().requires_grad_(True)
    with torch.enable_grad():
        logits, taps, _ = net.run(x)
        grads = torch.autograd.grad(logits[:, c].sum(), taps)
    return [g.numpy() for g in grads]
