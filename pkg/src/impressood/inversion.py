"""Class-conditional impressions recovered from a fixed classifier.

Noise batches are optimised so that the classifier labels them as class
``c`` while the batch statistics at every BatchNorm input match the stored
running mean and variance. Along the way each step records the class
logit and the channel-mean gradients of that logit with respect to every
tap; calibration replays these records later.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import _store
from .datagen import ConfigError, ImageBatch
from .smallnet import Checkpoint, InputError, SmallNet, forward_with_taps

logger = logging.getLogger(__name__)

LOSS_COMPONENTS = ("ce", "mean_match", "var_match")


class InversionError(RuntimeError):
    def __init__(self, msg: str, iteration: Optional[int] = None, class_id: Optional[int] = None):
        where = []
        if class_id is not None:
            where.append(f"class {class_id}")
        if iteration is not None:
            where.append(f"iteration {iteration}")
        super().__init__(f"{', '.join(where)}: {msg}" if where else msg)
        self.iteration = iteration
        self.class_id = class_id


class FingerprintMismatch(ValueError):
    """Stored artifact was produced from a different checkpoint."""


@dataclass(frozen=True)
class InversionConfig:
    iterations: int = 500
    batch_size: int = 32
    samples_per_class: int = 64
    lr: float = 0.05
    bn_loss_weight: float = 1.0
    seed: int = 0
    # image priors; off by default
    tv_weight: float = 0.0
    l2_weight: float = 0.0
    min_consistency: float = 0.8

    def validate(self) -> None:
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch variance)")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class must be >= 2")
        if self.samples_per_class % self.batch_size == 1:
            raise ConfigError("final truncated batch would hold a single sample")

    def batch_sizes(self) -> List[int]:
        full, rest = divmod(self.samples_per_class, self.batch_size)
        return [self.batch_size] * full + ([rest] if rest else [])


@dataclass
class TrajectoryRecord:
    """Per-step record of one inverted batch.

    ``y[t-1]`` is the batch-mean class logit after step ``t`` (t = 1..T) and
    ``y0`` the value at the noise initialisation. ``g[l][t-1, k]`` is the
    batch mean of the spatially averaged gradient of the class logit with
    respect to channel ``k`` of tap ``l``. ``losses[t-1]`` holds the loss
    components minimised by step ``t``.
    """

    class_id: int
    y0: float
    y: np.ndarray  # [T]
    g: List[np.ndarray]  # per layer [T, h_l]
    losses: np.ndarray  # [T, 3]
    final_losses: np.ndarray  # [3], evaluated at the returned images

    @property
    def iterations(self) -> int:
        return len(self.y)

    def delta_y(self) -> np.ndarray:
        return np.diff(np.concatenate([[self.y0], self.y]))


def _bn_targets(net: SmallNet, dtype) -> List[Tuple[torch.Tensor, torch.Tensor]]:
    return [(bn.running_mean.to(dtype), bn.running_var.to(dtype)) for bn in net.bns]


def _loss_terms(net: SmallNet, x: torch.Tensor, c: int, bn_loss_weight: float,
                tv_weight: float = 0.0, l2_weight: float = 0.0):
    if x.shape[0] < 2:
        raise InputError("inversion loss needs a batch of at least two images")
    logits, taps, bn_inputs = net.run(x)
    target = torch.full((x.shape[0],), c, dtype=torch.long)
    ce = F.cross_entropy(logits, target)
    mean_match = x.new_zeros(())
    var_match = x.new_zeros(())
    for z, (mu_bn, var_bn) in zip(bn_inputs, _bn_targets(net, x.dtype)):
        # unbiased, as BatchNorm uses for its running variance
        mean_match = mean_match + torch.linalg.vector_norm(z.mean(dim=(0, 2, 3)) - mu_bn)
        var_match = var_match + torch.linalg.vector_norm(z.var(dim=(0, 2, 3)) - var_bn)
    total = ce + bn_loss_weight * (mean_match + var_match)
    if tv_weight:
        tv = (x[..., 1:, :] - x[..., :-1, :]).abs().mean() + (x[..., :, 1:] - x[..., :, :-1]).abs().mean()
        total = total + tv_weight * tv
    if l2_weight:
        total = total + l2_weight * x.pow(2).mean()
    return total, (ce, mean_match, var_match), logits, taps


def _check_class(net: SmallNet, c: int) -> None:
    if not 0 <= c < net.arch.num_classes:
        raise InputError(f"class {c} outside [0, {net.arch.num_classes})")


def inversion_loss(checkpoint: Checkpoint, x: ImageBatch | np.ndarray, c: int,
                   bn_loss_weight: float = 1.0, dtype: torch.dtype = torch.float64
                   ) -> Tuple[float, Dict[str, float]]:
    """Cross-entropy toward ``c`` plus BN mean/variance mismatch, summed over layers."""
    net = checkpoint.model(dtype)
    _check_class(net, c)
    pixels = x.pixels if isinstance(x, ImageBatch) else x
    xt = torch.as_tensor(np.asarray(pixels)).to(dtype)
    with torch.no_grad():
        total, comps, _, _ = _loss_terms(net, xt, c, bn_loss_weight)
    return float(total), {k: float(v) for k, v in zip(LOSS_COMPONENTS, comps)}


def inversion_loss_gradient(checkpoint: Checkpoint, x: np.ndarray, c: int,
                            bn_loss_weight: float = 1.0, dtype: torch.dtype = torch.float64
                            ) -> np.ndarray:
    """Gradient of the total inversion loss with respect to the input pixels."""
    net = checkpoint.model(dtype)
    _check_class(net, c)
    xt = torch.as_tensor(np.asarray(x)).to(dtype).clone().requires_grad_(True)
    total, _, _, _ = _loss_terms(net, xt, c, bn_loss_weight)
    (grad,) = torch.autograd.grad(total, xt)
    return grad.numpy()


def _init_noise(cfg: InversionConfig, c: int, b: int, n: int, shape) -> torch.Tensor:
    rng = np.random.default_rng([cfg.seed, c, b, 0x1A])
    z = rng.standard_normal((n, *shape))
    return torch.from_numpy(1.0 / (1.0 + np.exp(-z))).to(torch.float32)


def _invert_batch(net: SmallNet, c: int, x0: torch.Tensor, cfg: InversionConfig
                  ) -> Tuple[torch.Tensor, TrajectoryRecord]:
    x = x0.clone().requires_grad_(True)
    opt = torch.optim.Adam([x], lr=cfg.lr)
    T = cfg.iterations
    ys = np.empty(T)
    gs = [np.empty((T, h)) for h in net.arch.block_channels]
    losses = np.empty((T, 3))
    y0 = float("nan")
    final = np.full(3, np.nan)
    for t in range(T + 1):
        total, comps, logits, taps = _loss_terms(
            net, x, c, cfg.bn_loss_weight, cfg.tv_weight, cfg.l2_weight)
        if not torch.isfinite(total):
            raise InversionError(f"non-finite loss {total.item()}", iteration=t, class_id=c)
        y_sum = logits[:, c].sum()
        if t == 0:
            y0 = y_sum.item() / len(x)
        else:
            grads = torch.autograd.grad(y_sum, taps, retain_graph=True)
            ys[t - 1] = y_sum.item() / len(x)
            for l, g in enumerate(grads):
                gs[l][t - 1] = g.double().mean(dim=(0, 2, 3)).numpy()
        comp_vals = [v.item() for v in comps]
        if t == T:
            final[:] = comp_vals
            break
        losses[t] = comp_vals
        opt.zero_grad()
        total.backward()
        opt.step()
        with torch.no_grad():
            x.clamp_(0.0, 1.0)
    record = TrajectoryRecord(c, y0, ys, gs, losses, final)
    return x.detach(), record


def invert_class(checkpoint: Checkpoint, c: int, config: InversionConfig = InversionConfig()
                 ) -> Tuple[ImageBatch, List[TrajectoryRecord]]:
    """Impressions of class ``c``: one trajectory record per optimised batch."""
    config.validate()
    net = checkpoint.model(torch.float32)
    _check_class(net, c)
    arch = net.arch
    shape = (arch.in_channels, arch.image_size, arch.image_size)
    images, records = [], []
    for b, n in enumerate(config.batch_sizes()):
        x0 = _init_noise(config, c, b, n, shape)
        x, rec = _invert_batch(net, c, x0, config)
        images.append(x.numpy())
        records.append(rec)
    pixels = np.concatenate(images).astype(np.float32)
    batch = ImageBatch(pixels, np.full(len(pixels), c, dtype=np.int64))
    consistency = msp_consistency(checkpoint, batch, c)
    if consistency < config.min_consistency:
        logger.warning("class %d: only %.0f%% of impressions are classified as %d",
                       c, 100 * consistency, c)
    return batch, records


def msp_consistency(checkpoint: Checkpoint, batch: ImageBatch, c: int) -> float:
    logits, _ = forward_with_taps(checkpoint, batch)
    return float(np.mean(np.argmax(logits, axis=1) == c))


@dataclass
class SynthesisDataset:
    config: InversionConfig
    fingerprint: str
    images: Dict[int, ImageBatch]
    trajectories: Dict[int, List[TrajectoryRecord]]
    consistency: Dict[int, float] = field(default_factory=dict)

    @property
    def classes(self) -> List[int]:
        return sorted(self.images)

    def check_fingerprint(self, checkpoint: Checkpoint) -> None:
        if self.fingerprint != checkpoint.fingerprint:
            raise FingerprintMismatch(
                f"synthesis was produced from checkpoint {self.fingerprint[:12]}, "
                f"not {checkpoint.fingerprint[:12]}")

    def save(self, path: str | Path) -> None:
        arrays: Dict[str, np.ndarray] = {}
        batches = {}
        for c in self.classes:
            arrays[f"c{c}_images"] = self.images[c].pixels
            batches[str(c)] = len(self.trajectories[c])
            for b, rec in enumerate(self.trajectories[c]):
                p = f"c{c}_b{b}"
                arrays[f"{p}_y"] = np.concatenate([[rec.y0], rec.y])
                arrays[f"{p}_losses"] = rec.losses
                arrays[f"{p}_final_losses"] = rec.final_losses
                for l, g in enumerate(rec.g):
                    arrays[f"{p}_g{l}"] = g
        num_layers = len(self.trajectories[self.classes[0]][0].g) if self.classes else 0
        meta = {"config": asdict(self.config), "fingerprint": self.fingerprint,
                "batches": batches, "num_layers": num_layers,
                "consistency": {str(k): v for k, v in sorted(self.consistency.items())}}
        _store.write_blob_dir(path, "synthesis", arrays, meta)

    @classmethod
    def load(cls, path: str | Path) -> "SynthesisDataset":
        arrays, meta = _store.read_blob_dir(path, "synthesis")
        images, trajectories = {}, {}
        for key, nb in meta["batches"].items():
            c = int(key)
            px = arrays[f"c{c}_images"]
            images[c] = ImageBatch(px, np.full(len(px), c, dtype=np.int64))
            recs = []
            for b in range(nb):
                p = f"c{c}_b{b}"
                y = arrays[f"{p}_y"]
                recs.append(TrajectoryRecord(
                    c, float(y[0]), y[1:], [arrays[f"{p}_g{l}"] for l in range(meta["num_layers"])],
                    arrays[f"{p}_losses"], arrays[f"{p}_final_losses"]))
            trajectories[c] = recs
        consistency = {int(k): v for k, v in meta.get("consistency", {}).items()}
        return cls(InversionConfig(**meta["config"]), meta["fingerprint"], images,
                   trajectories, consistency)


def synthesize_all(checkpoint: Checkpoint, config: InversionConfig = InversionConfig()
                   ) -> SynthesisDataset:
    """Run :func:`invert_class` for every class of the checkpoint."""
    images, trajectories, consistency = {}, {}, {}
    for c in range(checkpoint.arch.num_classes):
        try:
            images[c], trajectories[c] = invert_class(checkpoint, c, config)
        except InversionError:
            raise
        except Exception as exc:
            raise InversionError(str(exc), class_id=c) from exc
        consistency[c] = msp_consistency(checkpoint, images[c], c)
        logger.info("class %d: %d impressions, MSP consistency %.3f",
                    c, len(images[c]), consistency[c])
    return SynthesisDataset(config, checkpoint.fingerprint, images, trajectories, consistency)
