"""Top-k routed mixture-of-experts feed-forward layer.

Each token is scored by a linear gate, sent to its top-k experts (ties go to
the lower expert index), and the expert outputs are mixed with a softmax
over the selected logits only, so the mixing weights always sum to 1. There
is no capacity limit and no token dropping: every token reaches every expert
it selects, which keeps the layer a deterministic bijection candidate for
the reversible wrapper around it.

The backward pass treats the discrete selection as locally constant:
gradients flow through the restricted softmax and the experts, not through
the top-k choice itself. A frozen router still lets gradients flow to the
token stream through its logits; only the gate-weight gradient is zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import GradTape, LinearParams, MlpParams, TapeEntry, TapeError
from .tensors import ShapeError, freeze, matmul, silu, silu_grad, softmax


@dataclass(frozen=True)
class RouterParams:
    gate_weight: np.ndarray  # [n_experts, d]
    top_k: int
    frozen: bool = True


@dataclass(frozen=True)
class ExpertBank:
    mlps: list  # list[MlpParams], all with matching outer width


def route(x: np.ndarray, r: RouterParams):
    """Score tokens and pick experts.

    Returns (indices [T,k], weights [T,k]); weights are the softmax over the
    selected logits, descending by logit with ties broken toward the lower
    expert index.
    """
    n_experts = r.gate_weight.shape[0]
    if r.top_k < 1 or r.top_k > n_experts:
        raise ShapeError(f"top_k={r.top_k} invalid for {n_experts} experts")
    if x.shape[-1] != r.gate_weight.shape[1]:
        raise ShapeError(f"router width {r.gate_weight.shape[1]} != input {x.shape[-1]}")
    logits = matmul(x, r.gate_weight.T)  # [T, E]
    order = np.argsort(-logits, axis=-1, kind="stable")  # stable: ties keep low index first
    indices = np.ascontiguousarray(order[:, :r.top_k])
    selected = np.take_along_axis(logits, indices, axis=-1)
    weights = softmax(selected, axis=-1)
    return freeze(indices), weights


def moe_fwd(x: np.ndarray, r: RouterParams, bank: ExpertBank,
            tape: Optional[GradTape] = None) -> np.ndarray:
    """Route each token, run its selected experts, mix by routing weight.

    Token t's output depends only on x[t]; contributions are accumulated in
    expert-index order, so results are independent of batch composition.
    """
    d = x.shape[-1]
    flat = x.reshape(-1, d)
    indices, weights = route(flat, r)
    out = np.zeros_like(flat)
    saved_experts = []
    for e, mlp in enumerate(bank.mlps):
        rows, slots = np.nonzero(indices == e)
        if rows.size == 0:
            saved_experts.append(None)
            continue
        xe = flat[rows]
        h = matmul(xe, mlp.w1.weight.T)
        if mlp.w1.bias is not None:
            h = h + mlp.w1.bias
        a = silu(h)
        fe = matmul(a, mlp.w2.weight.T)
        if mlp.w2.bias is not None:
            fe = fe + mlp.w2.bias
        out[rows] += weights[rows, slots, None] * fe
        saved_experts.append((rows, slots, xe, h, a, fe))
    y = freeze(out.reshape(x.shape))
    if tape is not None:
        tape.push("moe", (flat, indices, weights, saved_experts, r, bank), y)
    return y


def moe_vjp(entry: TapeEntry, grad_out: np.ndarray):
    """Returns (grad_x, grad_router: RouterParams, grad_experts: ExpertBank).

    The gate-weight gradient is computed and then zeroed when the router is
    frozen; the gradient into the token stream keeps its routing-logit path
    either way.
    """
    if entry.op != "moe":
        raise TapeError(f"moe_vjp got {entry.op!r} entry")
    flat, indices, weights, saved_experts, r, bank = entry.saved
    g = grad_out.reshape(flat.shape)
    grad_x = np.zeros_like(flat)
    # dL/d(mixing weight) per selected slot
    u = np.zeros(weights.shape, dtype=flat.dtype)
    grad_mlps = []
    for e, mlp in enumerate(bank.mlps):
        saved = saved_experts[e]
        if saved is None:
            grad_mlps.append(MlpParams(
                w1=LinearParams(np.zeros_like(mlp.w1.weight),
                                None if mlp.w1.bias is None else np.zeros_like(mlp.w1.bias)),
                w2=LinearParams(np.zeros_like(mlp.w2.weight),
                                None if mlp.w2.bias is None else np.zeros_like(mlp.w2.bias))))
            continue
        rows, slots, xe, h, a, fe = saved
        ge = g[rows] * weights[rows, slots, None]
        grad_a = matmul(ge, mlp.w2.weight)
        gw2 = matmul(ge.T, a)
        gb2 = np.sum(ge, axis=0) if mlp.w2.bias is not None else None
        grad_h = grad_a * silu_grad(h)
        gw1 = matmul(grad_h.T, xe)
        gb1 = np.sum(grad_h, axis=0) if mlp.w1.bias is not None else None
        grad_x[rows] += matmul(grad_h, mlp.w1.weight)
        u[rows, slots] = np.sum(g[rows] * fe, axis=-1)
        grad_mlps.append(MlpParams(w1=LinearParams(gw1, gb1), w2=LinearParams(gw2, gb2)))

    # restricted-softmax backward into the selected logits
    dot = np.sum(u * weights, axis=-1, keepdims=True)
    grad_sel = weights * (u - dot)  # [T, k]
    n_experts = r.gate_weight.shape[0]
    grad_logits = np.zeros((flat.shape[0], n_experts), dtype=flat.dtype)
    np.put_along_axis(grad_logits, indices, grad_sel, axis=-1)
    grad_x += matmul(grad_logits, r.gate_weight)
    grad_gate = matmul(grad_logits.T, flat)
    if r.frozen:
        grad_gate = np.zeros_like(grad_gate)

    grad_router = RouterParams(gate_weight=grad_gate, top_k=r.top_k, frozen=r.frozen)
    return grad_x.reshape(grad_out.shape), grad_router, ExpertBank(mlps=grad_mlps)


def moe_replay(entry: TapeEntry) -> np.ndarray:
    flat, _, _, _, r, bank = entry.saved
    return moe_fwd(flat, r, bank).reshape(entry.out.shape)
