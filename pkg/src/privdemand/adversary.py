"""The label classifier: H -> H -> H/2 -> 2 fully connected net with ELU units.

Forward, loss, and backward are written out explicitly because the training
loop needs the gradient of the loss with respect to the *input* series, not
just the parameters. Softmax and cross-entropy are fused in the backward
pass; class positions follow the one-hot convention of the data module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Dataset

__all__ = [
    "MlpParams",
    "ForwardTrace",
    "init_params",
    "forward",
    "ce_loss",
    "backward",
    "sgd_step",
    "accuracy",
]

_LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class MlpParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def arrays(self):
        return (self.W1, self.b1, self.W2, self.b2, self.W3, self.b3)

    @classmethod
    def from_flat(cls, horizon: int, vec: np.ndarray) -> "MlpParams":
        shapes = _shapes(horizon)
        out = []
        k = 0
        for shape in shapes:
            size = int(np.prod(shape))
            out.append(vec[k : k + size].reshape(shape))
            k += size
        return cls(*out)


@dataclass(frozen=True)
class ForwardTrace:
    """Pre-activations and activations cached for the backward pass."""

    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    logits: np.ndarray
    probs: np.ndarray


def _shapes(horizon: int):
    hidden = math.ceil(horizon / 2)
    return (
        (horizon, horizon), (horizon,),
        (hidden, horizon), (hidden,),
        (2, hidden), (2,),
    )


def init_params(horizon: int, seed: int) -> MlpParams:
    """Uniform (-1/fan_in, 1/fan_in) weights, zero biases."""
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    rng = np.random.default_rng(seed)
    arrays = []
    for shape in _shapes(horizon):
        if len(shape) == 2:
            bound = 1.0 / shape[1]
            arrays.append(rng.uniform(-bound, bound, shape))
        else:
            arrays.append(np.zeros(shape))
    return MlpParams(*arrays)


def _elu(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z, np.expm1(z))


def _elu_grad(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, 1.0, np.exp(z))


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - np.max(logits))
    return e / np.sum(e)


def forward(params: MlpParams, d_tilde: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(d_tilde, dtype=float)
    z1 = params.W1 @ x + params.b1
    a1 = _elu(z1)
    z2 = params.W2 @ a1 + params.b2
    a2 = _elu(z2)
    logits = params.W3 @ a2 + params.b3
    probs = _softmax(logits)
    return probs, ForwardTrace(x, z1, a1, z2, a2, logits, probs)


def ce_loss(probs: np.ndarray, y_onehot: np.ndarray) -> float:
    return float(-np.sum(y_onehot * np.log(np.maximum(probs, _LOG_CLAMP))))


def backward(
    params: MlpParams, trace: ForwardTrace, y_onehot: np.ndarray
) -> tuple[MlpParams, np.ndarray]:
    """Exact gradients of ce_loss(forward(...)) for parameters and input."""
    dlogits = trace.probs - y_onehot  # fused softmax + cross-entropy
    gW3 = np.outer(dlogits, trace.a2)
    gb3 = dlogits
    da2 = params.W3.T @ dlogits
    dz2 = da2 * _elu_grad(trace.z2)
    gW2 = np.outer(dz2, trace.a1)
    gb2 = dz2
    da1 = params.W2.T @ dz2
    dz1 = da1 * _elu_grad(trace.z1)
    gW1 = np.outer(dz1, trace.x)
    gb1 = dz1
    grad_input = params.W1.T @ dz1
    return MlpParams(gW1, gb1, gW2, gb2, gW3, gb3), grad_input


def sgd_step(params: MlpParams, grads: MlpParams, lr: float) -> MlpParams:
    return MlpParams(*(p - lr * g for p, g in zip(params.arrays(), grads.arrays())))


def accuracy(params: MlpParams, ds: Dataset, demands: np.ndarray | None = None) -> float:
    """Argmax accuracy; ties fall to the class in position 0.

    ``demands`` lets the caller score privatized series against the true
    labels; defaults to the raw dataset series.
    """
    if len(ds) == 0:
        raise ValueError("empty dataset")
    if demands is None:
        demands = ds.demand_matrix()
    hits = 0
    for rec, d in zip(ds.records, demands):
        probs, _ = forward(params, d)
        hits += int(np.argmax(probs) == np.argmax(rec.one_hot))
    return hits / len(ds)
