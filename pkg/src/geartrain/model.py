"""The split model: a Dense Part producing the dense feature vector (DFV)
and a Sparse Part consuming (sparse features, DFV) and producing logits.

The chain rule is cut at the DFV. ``sparse_forward_backward`` returns
dLoss/dDFV, and ``dense_backward`` turns that upstream gradient into
gradients for the dense weights. Composed, they reproduce the end-to-end
gradient of the monolithic model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import (
    AdamState,
    DimensionError,
    LayerSpec,
    adam_apply,
    init_params,
    matmul,
    relu_bwd,
    relu_fwd,
    softmax_xent,
)

DENSE = "dense"
SPARSE = "sparse"


def mlp_forward(layers: Sequence[LayerSpec], params: dict, x: np.ndarray):
    """Forward pass returning the output and the per-layer cache for backward."""
    if x.ndim != 2 or x.shape[1] != layers[0].in_dim:
        raise DimensionError(f"input shape {x.shape} does not match first layer width {layers[0].in_dim}")
    cache = []
    h = x
    for i, layer in enumerate(layers):
        pre = matmul(h, params[f"W{i}"]) + params[f"b{i}"]
        cache.append((h, pre))
        h = relu_fwd(pre) if layer.activation == "relu" else pre
    return h, cache


def mlp_backward(layers: Sequence[LayerSpec], params: dict, cache, grad_out: np.ndarray):
    """Returns (parameter gradients, gradient w.r.t. the network input)."""
    grads = {}
    up = grad_out
    for i in reversed(range(len(layers))):
        h, pre = cache[i]
        if layers[i].activation == "relu":
            up = relu_bwd(pre, up)
        grads[f"W{i}"] = matmul(h.T, up)
        grads[f"b{i}"] = up.sum(axis=0)
        up = matmul(up, params[f"W{i}"].T)
    return grads, up


def _check_chain(layers: Sequence[LayerSpec]) -> None:
    if not layers:
        raise ValueError("empty layer list")
    for a, b in zip(layers, layers[1:]):
        if a.out_dim != b.in_dim:
            raise DimensionError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")


@dataclass
class DensePart:
    layers: list
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_chain(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def dfv_dim(self) -> int:
        return self.layers[-1].out_dim


@dataclass
class SparsePart:
    layers: list
    sparse_dim: int
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_chain(self.layers)
        if self.layers[0].in_dim <= self.sparse_dim:
            raise DimensionError("sparse part input must be wider than sparse_dim (DFV is concatenated)")

    @property
    def dfv_dim(self) -> int:
        return self.layers[0].in_dim - self.sparse_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim


@dataclass(frozen=True)
class ModelSpec:
    """Architecture section of a run config."""

    sparse_dim: int
    dense_dim: int
    dfv_dim: int
    num_classes: int
    dense_hidden: tuple = (64,)
    sparse_hidden: tuple = (64,)
    dfv_activation: str = "relu"

    def dense_layers(self) -> list:
        widths = [self.dense_dim, *self.dense_hidden, self.dfv_dim]
        acts = ["relu"] * len(self.dense_hidden) + [self.dfv_activation]
        return [LayerSpec(a, b, act) for a, b, act in zip(widths, widths[1:], acts)]

    def sparse_layers(self) -> list:
        widths = [self.sparse_dim + self.dfv_dim, *self.sparse_hidden, self.num_classes]
        acts = ["relu"] * len(self.sparse_hidden) + ["identity"]
        return [LayerSpec(a, b, act) for a, b, act in zip(widths, widths[1:], acts)]

    def build(self, seed: int) -> tuple[DensePart, SparsePart]:
        """Both parts with N(0, 0.1^2) init; the sparse part uses ``seed + 1``."""
        dl, sl = self.dense_layers(), self.sparse_layers()
        return (DensePart(dl, init_params(dl, seed)),
                SparsePart(sl, self.sparse_dim, init_params(sl, seed + 1)))


def dense_forward(dense: DensePart, dense_input: np.ndarray) -> np.ndarray:
    """DFV for one raw input (1-D) or a batch of them (2-D)."""
    x = np.atleast_2d(dense_input)
    out, _ = mlp_forward(dense.layers, dense.params, x)
    return out[0] if dense_input.ndim == 1 else out


class SparseResult(NamedTuple):
    loss: float
    grads: dict
    dfv_grad: np.ndarray
    logits: np.ndarray


def sparse_forward_backward(sparse: SparsePart, sparse_input: np.ndarray, dfv: np.ndarray, labels) -> SparseResult:
    """Loss, Sparse Part gradients and dLoss/dDFV (one row per sample)."""
    xs, d = np.atleast_2d(sparse_input), np.atleast_2d(dfv)
    if xs.shape[1] != sparse.sparse_dim or d.shape[1] != sparse.dfv_dim or xs.shape[0] != d.shape[0]:
        raise DimensionError(
            f"sparse input {xs.shape} / dfv {d.shape} do not match widths {sparse.sparse_dim}+{sparse.dfv_dim}")
    x = np.concatenate([xs, d], axis=1)
    logits, cache = mlp_forward(sparse.layers, sparse.params, x)
    loss, g_logits = softmax_xent(logits, labels)
    grads, g_in = mlp_backward(sparse.layers, sparse.params, cache, g_logits)
    return SparseResult(loss, grads, g_in[:, sparse.sparse_dim:], logits)


def dense_backward(dense: DensePart, dense_input: np.ndarray, dfv_grad: np.ndarray, cache=None) -> dict:
    """Dense Part gradients from an upstream DFV gradient.

    ``dense_input`` must be the input whose forward pass is differentiated.
    The forward pass is recomputed with ``dense.params`` unless an explicit
    activation ``cache`` from an earlier forward is supplied.
    """
    x, g = np.atleast_2d(dense_input), np.atleast_2d(dfv_grad)
    if g.shape != (x.shape[0], dense.dfv_dim):
        raise DimensionError(f"dfv_grad shape {g.shape} does not match ({x.shape[0]}, {dense.dfv_dim})")
    if cache is None:
        _, cache = mlp_forward(dense.layers, dense.params, x)
    grads, _ = mlp_backward(dense.layers, dense.params, cache, g.astype(x.dtype, copy=False))
    return grads


def monolithic_grads(dense: DensePart, sparse: SparsePart, sparse_input, dense_input, labels):
    """End-to-end loss and gradients of the unsplit model.

    Returns (loss, dense_grads, sparse_grads, logits).
    """
    dfv, dcache = mlp_forward(dense.layers, dense.params, np.atleast_2d(dense_input))
    res = sparse_forward_backward(sparse, sparse_input, dfv, labels)
    dgrads = dense_backward(dense, dense_input, res.dfv_grad, cache=dcache)
    return res.loss, dgrads, res.grads, res.logits


def fresh_states(params: dict, **hyper) -> dict:
    return {k: AdamState.fresh(v, **hyper) for k, v in params.items()}


def monolithic_step(dense: DensePart, sparse: SparsePart, batch, dense_states: dict, sparse_states: dict):
    """One conventional training step on both parts.

    ``batch`` is (sparse_input, dense_input, labels). Returns
    (loss, new_dense, new_sparse, new_dense_states, new_sparse_states);
    the inputs are not modified.
    """
    sparse_input, dense_input, labels = batch
    loss, dgrads, sgrads, _ = monolithic_grads(dense, sparse, sparse_input, dense_input, labels)
    new_dp, new_ds = {}, {}
    for k in dense.params:
        new_dp[k], new_ds[k] = adam_apply(dense.params[k], dgrads[k], dense_states[k])
    new_sp, new_ss = {}, {}
    for k in sparse.params:
        new_sp[k], new_ss[k] = adam_apply(sparse.params[k], sgrads[k], sparse_states[k])
    return (loss, DensePart(dense.layers, new_dp), SparsePart(sparse.layers, sparse.sparse_dim, new_sp),
            new_ds, new_ss)


def qualify(part: str, params: dict) -> dict:
    """Prefix parameter names with their part, e.g. ``W0`` -> ``dense.W0``."""
    return {f"{part}.{k}": v for k, v in params.items()}


def unqualify(part: str, params: dict) -> dict:
    pre = part + "."
    return {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}


def param_names(part: str, layers: Sequence[LayerSpec]) -> list:
    return [f"{part}.{p}{i}" for i in range(len(layers)) for p in ("W", "b")]
