"""OOD scoring against a calibration artifact, plus MSP/energy/ODIN baselines.

All scorers follow one convention: higher score = more likely OOD.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import logsumexp, softmax

from .calibration import CalibrationArtifact, channel_avg, spatial_means
from .smallnet import BatchLike, Checkpoint, InputError, _as_model, _as_tensor, forward_with_taps


@dataclass(frozen=True)
class DetectorConfig:
    threshold: Union[float, str] = "auto"
    energy_temperature: float = 1.0
    odin_temperature: float = 1000.0
    odin_epsilon: float = 0.0014

    def validate(self) -> None:
        if self.energy_temperature <= 0 or self.odin_temperature <= 0:
            raise ValueError("temperatures must be > 0")
        if self.odin_epsilon < 0:
            raise ValueError("odin_epsilon must be >= 0")
        if isinstance(self.threshold, str) and self.threshold != "auto":
            raise ValueError(f"threshold must be a number or 'auto', got {self.threshold!r}")


@dataclass
class ScoreResult:
    msp_class: np.ndarray  # [n]
    deviations: np.ndarray  # [n, L]
    score: np.ndarray  # [n]
    decision: Optional[np.ndarray] = None  # [n] of "in"/"out"

    def __len__(self) -> int:
        return len(self.score)


def msp_class(logits: np.ndarray) -> np.ndarray | int:
    """Argmax of the logits; ties go to the lowest index."""
    logits = np.asarray(logits)
    if logits.shape[-1] < 2:
        raise InputError("need at least two class logits")
    c = np.argmax(logits, axis=-1)
    return int(c) if np.ndim(c) == 0 else c


def layer_deviation(taps: Sequence[np.ndarray], artifact: CalibrationArtifact, c: int,
                    l: int) -> float:
    """|weighted activation mean of layer ``l`` - impression reference| for one input."""
    tap = np.asarray(taps[l])
    if tap.shape[0] != artifact.layer_channels[l]:
        raise InputError(f"layer {l}: tap has {tap.shape[0]} channels, artifact has "
                         f"{artifact.layer_channels[l]}")
    return abs(channel_avg(tap, artifact.beta[l][c]) - artifact.cavg[c, l])


def deviations_from_taps(taps: Sequence[np.ndarray], classes: np.ndarray,
                         artifact: CalibrationArtifact) -> np.ndarray:
    """Vectorised :func:`layer_deviation` for a batch of taps -> ``[n, L]``."""
    if len(taps) != artifact.num_layers:
        raise InputError(f"{len(taps)} taps for a {artifact.num_layers}-layer artifact")
    out = np.empty((len(classes), artifact.num_layers))
    for l, tap in enumerate(taps):
        if tap.shape[1] != artifact.layer_channels[l]:
            raise InputError(f"layer {l}: tap has {tap.shape[1]} channels, artifact has "
                             f"{artifact.layer_channels[l]}")
        weighted = np.einsum("nk,nk->n", spatial_means(tap), artifact.beta[l][classes])
        out[:, l] = np.abs(weighted - artifact.cavg[classes, l])
    return out


def c2ir_score(checkpoint: Checkpoint, artifact: CalibrationArtifact, batch: BatchLike,
               threshold: Optional[float] = None) -> ScoreResult:
    """Layer-weighted deviation score of every input, using its MSP class's row."""
    artifact.check_fingerprint(checkpoint)
    logits, taps = forward_with_taps(checkpoint, batch, dtype=torch.float64)
    classes = msp_class(logits)
    dev = deviations_from_taps(taps, classes, artifact)
    score = np.einsum("nl,nl->n", artifact.alpha[classes], dev)
    decision = None if threshold is None else decide(score, threshold)
    return ScoreResult(np.atleast_1d(classes), dev, score, decision)


def decide(score, threshold: float):
    """``"out"`` iff score > threshold, else ``"in"``; works on scalars and arrays."""
    if np.ndim(score) == 0:
        return "out" if score > threshold else "in"
    return np.where(np.asarray(score) > threshold, "out", "in")


def auto_threshold(impression_scores: Sequence[float], percentile: float = 95.0) -> float:
    """Threshold admitting ``percentile``% of the impressions as in-distribution."""
    scores = np.asarray(impression_scores, dtype=np.float64)
    if scores.size < 20:
        raise ValueError(f"need at least 20 impression scores, got {scores.size}")
    return float(np.percentile(scores, percentile))


# --- baselines -----------------------------------------------------------------

def baseline_msp(logits: np.ndarray) -> np.ndarray:
    return 1.0 - softmax(np.asarray(logits, dtype=np.float64), axis=-1).max(axis=-1)


def baseline_energy(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Free energy ``-T * logsumexp(logits / T)``."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    return -temperature * logsumexp(np.asarray(logits, dtype=np.float64) / temperature, axis=-1)


def baseline_odin(checkpoint: Checkpoint, batch: BatchLike, temperature: float = 1000.0,
                  epsilon: float = 0.0014, batch_size: int = 1024) -> np.ndarray:
    """Temperature-scaled MSP after a small input step that raises the max softmax."""
    if temperature <= 0 or epsilon < 0:
        raise ValueError("need temperature > 0 and epsilon >= 0")
    net = _as_model(checkpoint, torch.float64)
    x_all = _as_tensor(batch, net.arch, torch.float64)
    out: List[np.ndarray] = []
    for start in range(0, len(x_all), batch_size):
        x = x_all[start:start + batch_size].clone()
        if epsilon > 0:
            x.requires_grad_(True)
            with torch.enable_grad():
                log_p = F.log_softmax(net(x) / temperature, dim=1)
                top = log_p.max(dim=1).values.sum()
                (grad,) = torch.autograd.grad(top, x)
            x = x.detach() + epsilon * grad.sign()
        with torch.no_grad():
            p = F.softmax(net(x) / temperature, dim=1)
        out.append(1.0 - p.max(dim=1).values.numpy())
    return np.concatenate(out) if out else np.empty(0)
