"""The linear privatization filter d + diag(gamma) eps + V y and its gradients.

Only the diagonal of the noise-mixing block is learned, per the block
structure that keeps the parameter count at H + 2H. The distortion
regularizer is the closed form sum(gamma^2) + ||V pi||^2 evaluated against
the label prior rather than a per-batch empirical distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "FilterWeights",
    "init_filter",
    "perturb",
    "distortion_penalty",
    "grad_wrt_weights",
    "penalty_grad",
]


@dataclass(frozen=True)
class FilterWeights:
    gamma: np.ndarray  # (H,) diagonal noise gains
    V: np.ndarray      # (H, 2) label-conditional shifts

    def __post_init__(self):
        if self.gamma.ndim != 1 or self.V.shape != (self.gamma.shape[0], 2):
            raise ValueError("gamma must be (H,) and V must be (H, 2)")

    @property
    def horizon(self) -> int:
        return self.gamma.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.V.ravel()])

    @classmethod
    def from_flat(cls, horizon: int, vec: np.ndarray) -> "FilterWeights":
        return cls(vec[:horizon].copy(), vec[horizon:].reshape(horizon, 2).copy())


def init_filter(horizon: int, seed: int) -> FilterWeights:
    """Uniform (-1/(H+2), 1/(H+2)) entries, the fan-in of the stacked filter."""
    if horizon < 1:
        raise ValueError("horizon must be positive")
    bound = 1.0 / (horizon + 2)
    rng = np.random.default_rng(seed)
    gamma = rng.uniform(-bound, bound, horizon)
    V = rng.uniform(-bound, bound, (horizon, 2))
    return FilterWeights(gamma, V)


def perturb(
    w: FilterWeights, d: np.ndarray, eps: np.ndarray, y_onehot: np.ndarray
) -> np.ndarray:
    return np.asarray(d, float) + w.gamma * eps + w.V @ y_onehot


def distortion_penalty(w: FilterWeights, prior: np.ndarray) -> float:
    vp = w.V @ prior
    return float(w.gamma @ w.gamma + vp @ vp)


def penalty_grad(w: FilterWeights, prior: np.ndarray) -> FilterWeights:
    """Gradient of distortion_penalty: (2 gamma, 2 (V pi) pi^T)."""
    return FilterWeights(2.0 * w.gamma, 2.0 * np.outer(w.V @ prior, prior))


def grad_wrt_weights(
    w: FilterWeights, eps: np.ndarray, y_onehot: np.ndarray, upstream: np.ndarray
) -> FilterWeights:
    """Pull an upstream d(loss)/d(d_tilde) back onto the filter weights.

    The regularizer gradient is deliberately excluded; callers add
    penalty_grad scaled by their own weight.
    """
    upstream = np.asarray(upstream, float)
    return FilterWeights(upstream * eps, np.outer(upstream, y_onehot))
