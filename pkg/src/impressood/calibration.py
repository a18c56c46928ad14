"""Channel weights, layer weights and reference activation means.

For every class ``c`` the artifact stores

* ``beta[l][c]``  softmax of the channel-mean gradients of the class logit
  at the impressions (channel weights of layer ``l``),
* ``alpha[c]``    softmax over layers of the logit sensitivity of the
  weighted activation mean, averaged along the inversion trajectories,
* ``cavg[c]``     the mean weighted activation of the impressions, per layer.

``beta`` is needed to evaluate the sensitivities, so calibration runs in
two passes over the stored synthesis: channel weights from the final
images first, then a replay of the recorded trajectories.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import torch

from . import _store
from .datagen import ImageBatch
from .inversion import FingerprintMismatch, SynthesisDataset, TrajectoryRecord
from .smallnet import Checkpoint, InputError, activation_gradients, forward_with_taps

DELTA_Y_GUARD = 1e-6


class CalibrationError(ValueError):
    pass


def spatial_means(tap: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean of a tap ``[..., h, d, d]`` -> ``[..., h]``."""
    return np.asarray(tap, dtype=np.float64).mean(axis=(-2, -1))


def channel_avg(tap: np.ndarray, beta: np.ndarray) -> np.ndarray | float:
    """Channel-weighted spatial average of one map ``[h, d, d]`` or a batch ``[n, h, d, d]``."""
    tap = np.asarray(tap)
    beta = np.asarray(beta, dtype=np.float64)
    if tap.ndim < 3 or tap.shape[-3] != beta.shape[-1]:
        raise InputError(f"channel weights of length {beta.shape[-1]} do not match tap "
                         f"shape {tap.shape}")
    out = spatial_means(tap) @ beta
    return float(out) if np.ndim(out) == 0 else out


def normalize_weights(v: Sequence[float]) -> np.ndarray:
    """Numerically stable softmax."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("cannot normalise an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite weights: {v}")
    e = np.exp(v - v.max())
    return e / e.sum()


def _nonempty(data: ImageBatch) -> None:
    if len(data) == 0:
        raise CalibrationError("empty impression set")


def empirical_cavg(checkpoint: Checkpoint, data: ImageBatch, beta: Sequence[np.ndarray]
                   ) -> np.ndarray:
    """Mean over ``data`` of the weighted activation of every layer -> ``[L]``."""
    _nonempty(data)
    _, taps = forward_with_taps(checkpoint, data, dtype=torch.float64)
    return np.array([np.mean(channel_avg(t, b)) for t, b in zip(taps, beta)])


@dataclass
class ChannelGradientStats:
    class_id: int
    w_bar: List[np.ndarray]  # per layer [h_l]


def channel_gradient_avg(checkpoint: Checkpoint, data: ImageBatch, c: int
                         ) -> ChannelGradientStats:
    """Gradient of the class logit w.r.t. each tap, averaged over space and samples."""
    _nonempty(data)
    grads = activation_gradients(checkpoint, data, c, dtype=torch.float64)
    return ChannelGradientStats(c, [g.mean(axis=(0, 2, 3)) for g in grads])


def layer_sensitivity(trajectory: TrajectoryRecord, beta: Sequence[np.ndarray],
                      guard: float = DELTA_Y_GUARD) -> np.ndarray:
    """Trajectory-averaged sensitivity of every layer -> ``[L]``.

    Steps whose logit change is below ``guard`` in magnitude are skipped.
    """
    dy = trajectory.delta_y()
    keep = np.abs(dy) >= guard
    if not keep.any():
        raise CalibrationError(
            f"class {trajectory.class_id}: every step changed the logit by less than {guard}")
    out = np.empty(len(beta))
    for l, (g, b) in enumerate(zip(trajectory.g, beta)):
        per_step = (np.asarray(g, dtype=np.float64) @ np.asarray(b, dtype=np.float64))[keep]
        out[l] = np.mean(per_step / dy[keep])
    return out


def mgi_weights(w_bar: Sequence[np.ndarray], trajectories: Sequence[TrajectoryRecord],
                guard: float = DELTA_Y_GUARD):
    """Channel weights, mean sensitivities and layer weights for one class."""
    beta = [normalize_weights(w) for w in w_bar]
    if not trajectories:
        raise CalibrationError("no trajectories")
    delta_bar = np.mean([layer_sensitivity(r, beta, guard) for r in trajectories], axis=0)
    return beta, delta_bar, normalize_weights(delta_bar)


@dataclass
class CalibrationArtifact:
    """Per-class weights and reference means; arrays are indexed ``[class, ...]``."""

    fingerprint: str
    alpha: np.ndarray  # [C, L]
    beta: List[np.ndarray]  # per layer [C, h_l]
    cavg: np.ndarray  # [C, L]
    delta_bar: np.ndarray  # [C, L]
    w_bar: List[np.ndarray]  # per layer [C, h_l]
    channel_means: List[np.ndarray]  # per layer [C, h_l], impression channel means
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.alpha.shape[0]

    @property
    def num_layers(self) -> int:
        return self.alpha.shape[1]

    @property
    def layer_channels(self) -> List[int]:
        return [b.shape[1] for b in self.beta]

    def class_beta(self, c: int) -> List[np.ndarray]:
        return [b[c] for b in self.beta]

    def check_fingerprint(self, checkpoint: Checkpoint) -> None:
        if self.fingerprint != checkpoint.fingerprint:
            raise FingerprintMismatch(
                f"artifact was calibrated on checkpoint {self.fingerprint[:12]}, "
                f"not {checkpoint.fingerprint[:12]}")

    def _arrays(self) -> Dict[str, np.ndarray]:
        arrays = {"alpha": self.alpha, "cavg": self.cavg, "delta_bar": self.delta_bar}
        for l in range(self.num_layers):
            arrays[f"beta_l{l}"] = self.beta[l]
            arrays[f"w_bar_l{l}"] = self.w_bar[l]
            arrays[f"channel_means_l{l}"] = self.channel_means[l]
        return arrays

    def save(self, path: str | Path) -> None:
        meta = {"fingerprint": self.fingerprint, "num_classes": self.num_classes,
                "num_layers": self.num_layers, "layer_channels": self.layer_channels,
                **_store.to_jsonable(self.meta)}
        _store.write_container(path, "calibration", self._arrays(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "CalibrationArtifact":
        arrays, meta = _store.read_container(path, "calibration")
        L = meta["num_layers"]
        extra = {k: v for k, v in meta.items()
                 if k not in ("fingerprint", "num_classes", "num_layers", "layer_channels")}
        return cls(meta["fingerprint"], arrays["alpha"],
                   [arrays[f"beta_l{l}"] for l in range(L)], arrays["cavg"],
                   arrays["delta_bar"], [arrays[f"w_bar_l{l}"] for l in range(L)],
                   [arrays[f"channel_means_l{l}"] for l in range(L)], extra)


def build_artifact(checkpoint: Checkpoint, synthesis: SynthesisDataset,
                   guard: float = DELTA_Y_GUARD) -> CalibrationArtifact:
    synthesis.check_fingerprint(checkpoint)
    C, L = checkpoint.arch.num_classes, checkpoint.arch.num_layers
    missing = [c for c in range(C) if c not in synthesis.images]
    if missing:
        raise CalibrationError(f"synthesis has no impressions for classes {missing}")
    alpha = np.empty((C, L))
    delta_bar = np.empty((C, L))
    cavg = np.empty((C, L))
    beta = [np.empty((C, h)) for h in checkpoint.arch.block_channels]
    w_bar = [np.empty((C, h)) for h in checkpoint.arch.block_channels]
    ch_means = [np.empty((C, h)) for h in checkpoint.arch.block_channels]
    for c in range(C):
        data = synthesis.images[c]
        w = channel_gradient_avg(checkpoint, data, c).w_bar
        b, delta_bar[c], alpha[c] = mgi_weights(w, synthesis.trajectories[c], guard)
        _, taps = forward_with_taps(checkpoint, data, dtype=torch.float64)
        for l in range(L):
            beta[l][c] = b[l]
            w_bar[l][c] = w[l]
            ch_means[l][c] = spatial_means(taps[l]).mean(axis=0)
            cavg[c, l] = np.mean(channel_avg(taps[l], b[l]))
    return CalibrationArtifact(checkpoint.fingerprint, alpha, beta, cavg, delta_bar, w_bar,
                               ch_means, {"delta_y_guard": guard})
