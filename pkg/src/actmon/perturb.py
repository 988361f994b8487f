"""Input perturbation generators: Gaussian noise, impulse noise, and FGSM.

All three operate on tensors with values in [0, 1] (normalized image
pixels), preserve the tensor shape, clip the result back to [0, 1], and are
deterministic for a fixed seed. Levels sweep the usual severity ladders:
Gaussian variance, impulse corruption probability, gradient-sign step size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .refnet import Network, forward, input_gradient


@dataclass(frozen=True)
class PerturbationSpec:
    """One perturbation family at one severity level.

    ``level`` is the Gaussian variance, the impulse corruption probability,
    or the gradient-sign step size, depending on ``kind``.
    """

    kind: str
    level: float
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "impulse", "fgsm"):
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "impulse" and not 0.0 <= self.level <= 1.0:
            raise ValueError(f"impulse probability must be in [0,1], got {self.level}")
        if self.level < 0.0:
            raise ValueError(f"level must be >= 0, got {self.level}")


def _check_unit_range(x: np.ndarray, name: str = "input") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError(f"{name} must be finite")
    if x.size and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(f"{name} values must lie in [0, 1]")
    return x


def gaussian_noise(x, variance: float, seed: int) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise, then clip to [0, 1].

    The noise is ``default_rng(seed).normal(0, sqrt(variance), x.shape)``;
    tests rely on that draw order being stable.
    """
    if variance < 0.0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    x = _check_unit_range(x)
    noise = np.random.default_rng(seed).normal(0.0, math.sqrt(variance), size=x.shape)
    return np.clip(x + noise, 0.0, 1.0)


def impulse_noise(x, p: float, seed: int) -> np.ndarray:
    """Salt-and-pepper corruption: each element becomes 1.0 with probability
    p/2, 0.0 with probability p/2, and is left unchanged otherwise."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    x = _check_unit_range(x)
    u = np.random.default_rng(seed).random(size=x.shape)
    out = x.copy()
    out[u < p / 2.0] = 1.0
    out[(u >= p / 2.0) & (u < p)] = 0.0
    return out


def fgsm(net: Network, x, epsilon: float, seed: int) -> np.ndarray:
    """Single-step gradient-sign attack against the reference network.

    The attacked loss is the squared distance between the network output and
    a pinned target: the clean input nudged by a small seeded unit direction
    and passed through the network. That keeps the gradient non-degenerate
    (the loss at the clean input itself would sit at an exact minimum) while
    staying untargeted: ascending the loss drives the output away from its
    clean value. Each element moves by exactly +/-epsilon (or 0 where the
    gradient vanishes, since sign(0) = 0) before clipping to [0, 1].
    """
    if epsilon < 0.0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x = _check_unit_range(x)
    if x.shape != net.input_shape:
        raise ValueError(f"input shape {x.shape} does not match {net.input_shape}")
    delta = np.random.default_rng(seed).standard_normal(size=x.shape)
    delta /= np.linalg.norm(delta)
    target = forward(net, x + delta)
    grad = input_gradient(net, x, target)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def apply_perturbation(spec: PerturbationSpec, x, net: Network | None = None) -> np.ndarray:
    """Apply one perturbation to a single tensor or a batch.

    For "gaussian" and "impulse" a leading batch axis is just more i.i.d.
    elements. For "fgsm" a batch is attacked image by image with per-image
    seeds spawned from ``spec.seed``.
    """
    if spec.kind == "gaussian":
        return gaussian_noise(x, spec.level, spec.seed)
    if spec.kind == "impulse":
        return impulse_noise(x, spec.level, spec.seed)
    if net is None:
        raise ValueError("fgsm needs the network the gradient is taken through")
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return fgsm(net, x, spec.level, spec.seed)
    if x.shape[1:] != net.input_shape:
        raise ValueError(f"batch shape {x.shape} does not match {net.input_shape}")
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(spec.seed).spawn(x.shape[0])]
    return np.stack(
        [fgsm(net, img, spec.level, s) for img, s in zip(x, seeds)]
    )
