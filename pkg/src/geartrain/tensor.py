"""Dense tensor arithmetic, layer gradients and Adam.

Tensors are plain ``numpy.ndarray`` values. Training paths use float32;
test oracles pass float64 arrays through the same functions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import rng

DTYPE = np.float32
INIT_STD = 0.1
ACTIVATIONS = ("relu", "identity")


class DimensionError(ValueError):
    pass


def as_tensor(x, dtype=DTYPE, check: bool = True) -> np.ndarray:
    """Copy ``x`` into a contiguous array, rejecting NaN/Inf when ``check``."""
    arr = np.array(x, dtype=dtype, copy=True, order="C")
    if check and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} != {b.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_bwd(x: np.ndarray, up: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    _same_shape(x, up, "relu_bwd")
    return np.where(x > 0, up, 0).astype(up.dtype, copy=False)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    if logits.ndim != 2:
        raise DimensionError(f"softmax_xent: logits must be 2-D, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError(f"softmax_xent: {labels.shape[0]} labels for batch of {batch}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"label out of range [0, {classes})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(batch)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1
    grad /= batch
    return loss, grad.astype(logits.dtype, copy=False)


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"layer dims must be >= 1, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def init_params(layers: Sequence[LayerSpec], seed: int, std: float = INIT_STD) -> dict[str, np.ndarray]:
    """Draw every weight and bias i.i.d. from N(0, std**2).

    Parameters are named ``W{i}`` (in_dim x out_dim) and ``b{i}`` (out_dim,)
    and filled in that order from one splitmix64 stream.
    """
    if not layers:
        raise ValueError("init_params: empty layer list")
    total = sum(l.in_dim * l.out_dim + l.out_dim for l in layers)
    draws = rng.normal(seed, total, std).astype(DTYPE)
    params, pos = {}, 0
    for i, l in enumerate(layers):
        n = l.in_dim * l.out_dim
        params[f"W{i}"] = draws[pos:pos + n].reshape(l.in_dim, l.out_dim).copy()
        pos += n
        params[f"b{i}"] = draws[pos:pos + l.out_dim].copy()
        pos += l.out_dim
    return params


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, like: np.ndarray, **hyper) -> "AdamState":
        return cls(m=np.zeros_like(like), v=np.zeros_like(like), **hyper)

    def hyperparams(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon)


def adam_apply(param: np.ndarray, grad: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam step. Inputs are left untouched.

    The update is evaluated in float64 and rounded back to the parameter
    dtype, so the result does not depend on evaluation order.
    """
    _same_shape(param, grad, "adam_apply grad")
    _same_shape(param, state.m, "adam_apply m")
    _same_shape(param, state.v, "adam_apply v")
    t = state.t + 1
    g = grad.astype(np.float64)
    m = state.beta1 * state.m.astype(np.float64) + (1 - state.beta1) * g
    v = state.beta2 * state.v.astype(np.float64) + (1 - state.beta2) * g * g
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    new = param.astype(np.float64) - state.lr * mhat / (np.sqrt(vhat) + state.epsilon)
    dt = param.dtype
    return new.astype(dt), replace(state, m=m.astype(dt), v=v.astype(dt), t=t)
