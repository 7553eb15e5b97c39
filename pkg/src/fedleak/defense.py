"""Differential-privacy mechanisms for outgoing updates and local SGD."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

MECHANISMS = ("none", "percentile_gaussian", "dp_sgd")


class DPConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DPConfig:
    """Which mechanism to run and its knobs.

    ``sigma0`` and ``q`` drive the percentile-calibrated Gaussian mechanism;
    ``clip_norm`` and ``noise_mult`` drive DP-SGD. ``noise_buffers`` also
    perturbs the BN running statistics sent with an update.
    """

    mechanism: str = "none"
    sigma0: float = 0.0
    q: float = 95.0
    clip_norm: float = 1.0
    noise_mult: float = 0.0
    percentile_method: str = "nearest_rank"
    noise_buffers: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise DPConfigError(f"mechanism must be one of {MECHANISMS}, got {self.mechanism!r}")
        if self.sigma0 < 0:
            raise DPConfigError(f"sigma0 must be >= 0, got {self.sigma0}")
        if not 0 < self.q <= 100:
            raise DPConfigError(f"q must lie in (0, 100], got {self.q}")
        if self.clip_norm <= 0:
            raise DPConfigError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.noise_mult < 0:
            raise DPConfigError(f"noise_mult must be >= 0, got {self.noise_mult}")
        if self.percentile_method not in ("nearest_rank", "linear"):
            raise DPConfigError(f"unknown percentile_method {self.percentile_method!r}")

    @property
    def label(self) -> str:
        if self.mechanism == "percentile_gaussian":
            return f"sigma0={self.sigma0:g}"
        if self.mechanism == "dp_sgd":
            return f"dpsgd(C={self.clip_norm:g},s={self.noise_mult:g})"
        return "none"


def update_percentile(update: Mapping[str, np.ndarray], q: float, method: str = "nearest_rank") -> float:
    """q-th percentile of |update| over all entries of all layers."""
    flat = np.concatenate([np.abs(np.ravel(v)) for v in update.values()])
    if flat.size == 0:
        raise DPConfigError("update is empty")
    # numpy's inverted_cdf is the nearest-rank definition
    return float(np.percentile(flat, q, method="inverted_cdf" if method == "nearest_rank" else "linear"))


def percentile_gaussian(
    update: Mapping[str, np.ndarray],
    sigma0: float,
    q: float = 95.0,
    rng: np.random.Generator | None = None,
    method: str = "nearest_rank",
) -> tuple[dict[str, np.ndarray], float]:
    """Add N(0, sigma) to every entry, sigma = percentile(|update|, q) * sigma0.

    Returns the noised update and the sigma used. Layers are visited in
    mapping order, which fixes the random stream for a given seed.
    """
    if not update:
        raise DPConfigError("update is empty")
    if sigma0 == 0:
        return {k: np.array(v, copy=True) for k, v in update.items()}, 0.0
    sigma = update_percentile(update, q, method) * sigma0
    if sigma == 0:
        warnings.warn("update percentile is zero; no noise added", RuntimeWarning, stacklevel=2)
        return {k: np.array(v, copy=True) for k, v in update.items()}, 0.0
    rng = rng if rng is not None else np.random.default_rng()
    return {k: v + rng.normal(0.0, sigma, size=np.shape(v)) for k, v in update.items()}, sigma


def clip_by_norm(grads: Mapping[str, np.ndarray], clip_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale a whole gradient by min(1, clip_norm / ||g||_2); returns (clipped, original norm)."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    scale = min(1.0, clip_norm / norm) if norm > 0 else 1.0
    return {k: g * scale for k, g in grads.items()}, norm


def dp_sgd_step(
    per_example_grads: Sequence[Mapping[str, np.ndarray]],
    clip_norm: float,
    noise_mult: float,
    rng: np.random.Generator | None = None,
) -> dict[str, np.ndarray]:
    """Clip each example gradient, sum, add N(0, noise_mult * clip_norm), divide by batch size."""
    if clip_norm <= 0:
        raise DPConfigError(f"clip_norm must be > 0, got {clip_norm}")
    if not per_example_grads:
        raise DPConfigError("need at least one example gradient")
    rng = rng if rng is not None else np.random.default_rng()
    names = list(per_example_grads[0])
    total = {k: np.zeros_like(per_example_grads[0][k]) for k in names}
    for g in per_example_grads:
        clipped, _ = clip_by_norm(g, clip_norm)
        for k in names:
            total[k] = total[k] + clipped[k]
    b = len(per_example_grads)
    if noise_mult > 0:
        std = noise_mult * clip_norm
        total = {k: v + rng.normal(0.0, std, size=v.shape) for k, v in total.items()}
    return {k: v / b for k, v in total.items()}
