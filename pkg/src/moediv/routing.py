"""Router and sparse mixture-of-experts layer.

The router is a linear map to expert logits followed by a softmax; top-K
gating selects the K most probable experts and renormalizes their
probabilities into mixture weights. The full pre-selection distribution is
always kept, because the divergence losses and all routing analyses operate
on it, not on the sparse gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class ExpertDistribution:
    """Full routing distribution of one token over the N experts."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-9:
            raise ValueError("ExpertDistribution: not a valid probability vector")


@dataclass
class GateAssignment:
    """Selected expert indices and their renormalized gate weights."""

    selected: np.ndarray
    gates: np.ndarray


@dataclass
class ExpertFFN:
    """Gated two-layer MLP (SiLU gate), one per expert."""

    w_gate: Tensor  # [d, m]
    w_up: Tensor    # [d, m]
    w_down: Tensor  # [m, d]

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(T.mul(T.silu(T.matmul(x, self.w_gate)), T.matmul(x, self.w_up)), self.w_down)


@dataclass
class MoELayer:
    """Router weights plus the expert networks of one layer."""

    router: Tensor  # [N, d], one row per expert
    experts: list
    top_k: int

    @property
    def num_experts(self) -> int:
        return self.router.shape[0]


def route(w_r, x) -> Tensor:
    """Softmax of router logits W_r x; accepts a [d] vector or [T, d] batch."""
    w_r = T.as_tensor(w_r)
    x = T.as_tensor(x)
    if x.shape[-1] != w_r.shape[1]:
        raise ValueError(
            f"route: hidden size {x.shape[-1]} does not match router {w_r.shape}"
        )
    logits = T.matmul(x, T.transpose(w_r, (1, 0)))
    return T.softmax_rows(logits)


def topk_select(probs: np.ndarray, k: int):
    """Vectorized top-K for a [T, N] probability array.

    Returns (selected [T, K] indices in descending-probability order, gates
    [T, K] renormalized to sum 1). Ties break toward the lowest expert index
    (stable sort on negated probabilities).
    """
    probs = np.asarray(probs, dtype=np.float64)
    n = probs.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"topk: K={k} out of range for {n} experts")
    selected = np.argsort(-probs, axis=-1, kind="stable")[..., :k]
    chosen = np.take_along_axis(probs, selected, axis=-1)
    gates = chosen / chosen.sum(axis=-1, keepdims=True)
    return selected, gates


def topk_gate(p, k: int) -> GateAssignment:
    """Top-K gate assignment for a single distribution."""
    if isinstance(p, ExpertDistribution):
        p = p.probs
    selected, gates = topk_select(np.asarray(p, dtype=np.float64)[None, :], k)
    return GateAssignment(selected=selected[0], gates=gates[0])


def moe_forward_batch(layer: MoELayer, x: Tensor):
    """Sparse MoE forward for a [T, d] token batch.

    Returns (y [T, d], probs Tensor [T, N], selected [T, K], gates Tensor
    [T, K]). Only selected experts run; selection indices are constants for
    the backward pass, so gradients reach the router solely through the
    renormalized gate values and the auxiliary losses.
    """
    probs = route(layer.router, x)
    selected, _ = topk_select(probs.data, layer.top_k)
    chosen = T.take_along_last(probs, selected)
    gates = T.div(chosen, T.tsum(chosen, axis=-1, keepdims=True))
    t_tokens = x.shape[0]
    y = None
    for i, expert in enumerate(layer.experts):
        rows, cols = np.nonzero(selected == i)
        if rows.size == 0:
            continue
        xi = T.take_rows(x, rows)
        hi = expert(xi)
        wi = T.reshape(T.take_elems2d(gates, rows, cols), (rows.size, 1))
        contrib = T.scatter_rows(T.mul(hi, wi), rows, t_tokens)
        y = contrib if y is None else T.add(y, contrib)
    if y is None:  # cannot happen with 1 <= K <= N, defensive
        y = Tensor(np.zeros_like(x.data))
    return y, probs, selected, gates


def moe_forward(layer: MoELayer, x):
    """Single-vector MoE forward; returns (y, ExpertDistribution, GateAssignment)."""
    x = T.as_tensor(x)
    y, probs, selected, gates = moe_forward_batch(layer, T.reshape(x, (1, -1)))
    return (
        T.reshape(y, (-1,)),
        ExpertDistribution(probs.data[0]),
        GateAssignment(selected=selected[0], gates=gates.data[0].copy()),
    )
