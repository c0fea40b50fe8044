"""Reversible transformer block over two half-width streams.

The hidden state is split along features into a left and a right stream and
updated in coupled fashion:

    asymmetric:  out_left  = left  + attn_branch(left, right)
                 out_right = right + ffn_branch(out_left)
    strict:      out_left  = left  + attn_branch(right, right)
                 out_right = right + ffn_branch(out_left)

`attn_branch` normalizes each source stream, lifts both to full width with
projection adapters, runs pre-trained-style cross-branch attention (queries
from the first argument, keys and values from the second), and projects the
result back down. `ffn_branch` does the same around the mixture-of-experts
layer. Because each update is a residual of the *other* stream's value, the
block input can be recovered from its output:

    right = out_right - ffn_branch(out_left)                  (exact)
    left  = out_left  - attn_branch(left, right)

Under the strict coupling the second line does not reference the unknown
`left`, so inversion is two subtractions and exact up to rounding. Under the
asymmetric coupling it does, and is solved by fixed-point iteration seeded
with `out_left`; the returned residual measures how well the final iterate
satisfies the equation. Inverting exactly is what lets the backward pass run
without any cached activations: reconstruct the input, replay the forward
onto a short-lived tape, then apply the composed VJPs and drop the tape.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import kernels as K
from .kernels import (AttentionParams, GradTape, LinearParams, NormParams)
from .moe import ExpertBank, RouterParams, moe_fwd, moe_vjp
from .tensors import Rng, ShapeError, add, require_finite, sub


class Coupling(str, enum.Enum):
    ASYMMETRIC = "asymmetric"  # attention queries come from the stream being updated
    STRICT = "strict"          # queries come from the other stream; inverse is exact


class ReconstructionError(Exception):
    """Fixed-point inversion failed to reach the configured tolerance."""

    def __init__(self, residual: float, tolerance: float, layer: Optional[int] = None):
        self.residual = residual
        self.tolerance = tolerance
        self.layer = layer
        where = f" in layer {layer}" if layer is not None else ""
        super().__init__(
            f"input reconstruction{where} left residual {residual:.3e} "
            f"(tolerance {tolerance:.3e})")


@dataclass(frozen=True)
class StreamPair:
    left: np.ndarray   # [B, S, d/2]
    right: np.ndarray  # [B, S, d/2]

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ShapeError(
                f"stream halves disagree: {self.left.shape} vs {self.right.shape}")


@dataclass(frozen=True)
class AdapterPair:
    up: LinearParams    # [d, d/2]
    down: LinearParams  # [d/2, d]


@dataclass(frozen=True)
class BlockParams:
    norm_q: NormParams            # [d/2], applied to the attention query source
    norm_kv: NormParams           # [d/2], applied to the key/value source
    norm_ffn: NormParams          # [d/2], applied to the expert-branch input
    attn_up_q: LinearParams       # [d, d/2]
    attn_up_kv: LinearParams      # [d, d/2]
    attn: AttentionParams         # full-width pre-trained-style attention
    attn_down: LinearParams       # [d/2, d], shared output projection
    mlp_adapters: AdapterPair
    router: RouterParams
    experts: ExpertBank


def split(h: np.ndarray) -> StreamPair:
    """Halve the feature axis; features [0, d/2) left, [d/2, d) right."""
    d = h.shape[-1]
    if d % 2 != 0:
        raise ShapeError(f"cannot split odd feature width {d}")
    left = np.ascontiguousarray(h[..., :d // 2])
    right = np.ascontiguousarray(h[..., d // 2:])
    return StreamPair(left=left, right=right)


def concat(p: StreamPair) -> np.ndarray:
    return np.concatenate([p.left, p.right], axis=-1)


def branch_attn(q_like: np.ndarray, kv_like: np.ndarray, p: BlockParams,
                tape: Optional[GradTape] = None) -> np.ndarray:
    qn = K.rmsnorm_fwd(q_like, p.norm_q, tape)
    kn = K.rmsnorm_fwd(kv_like, p.norm_kv, tape)
    qf = K.linear_fwd(qn, p.attn_up_q, tape)
    kf = K.linear_fwd(kn, p.attn_up_kv, tape)
    att = K.cross_attention_fwd(qf, kf, p.attn, tape)
    return K.linear_fwd(att, p.attn_down, tape)


def branch_attn_vjp(tape: GradTape, grad_out: np.ndarray):
    """Pops this branch's five entries; returns (grad_q_like, grad_kv_like, pieces)."""
    grad_att, g_down = K.linear_vjp(tape.pop("linear"), grad_out)
    grad_qf, grad_kf, g_attn = K.cross_attention_vjp(tape.pop("cross_attention"), grad_att)
    grad_kn, g_up_kv = K.linear_vjp(tape.pop("linear"), grad_kf)
    grad_qn, g_up_q = K.linear_vjp(tape.pop("linear"), grad_qf)
    grad_kv, g_norm_kv = K.rmsnorm_vjp(tape.pop("rmsnorm"), grad_kn)
    grad_q, g_norm_q = K.rmsnorm_vjp(tape.pop("rmsnorm"), grad_qn)
    pieces = {"attn_down": g_down, "attn": g_attn, "attn_up_kv": g_up_kv,
              "attn_up_q": g_up_q, "norm_kv": g_norm_kv, "norm_q": g_norm_q}
    return grad_q, grad_kv, pieces


def branch_mlp(y_like: np.ndarray, p: BlockParams,
               tape: Optional[GradTape] = None) -> np.ndarray:
    n = K.rmsnorm_fwd(y_like, p.norm_ffn, tape)
    up = K.linear_fwd(n, p.mlp_adapters.up, tape)
    mixed = moe_fwd(up, p.router, p.experts, tape)
    return K.linear_fwd(mixed, p.mlp_adapters.down, tape)


def branch_mlp_vjp(tape: GradTape, grad_out: np.ndarray):
    grad_mixed, g_down = K.linear_vjp(tape.pop("linear"), grad_out)
    grad_up, g_router, g_experts = moe_vjp(tape.pop("moe"), grad_mixed)
    grad_n, g_up = K.linear_vjp(tape.pop("linear"), grad_up)
    grad_y, g_norm = K.rmsnorm_vjp(tape.pop("rmsnorm"), grad_n)
    pieces = {"mlp_adapters": AdapterPair(up=g_up, down=g_down),
              "router": g_router, "experts": g_experts, "norm_ffn": g_norm}
    return grad_y, pieces


def block_fwd(x: StreamPair, p: BlockParams, variant: Coupling,
              tape: Optional[GradTape] = None) -> StreamPair:
    if variant == Coupling.ASYMMETRIC:
        a = branch_attn(x.left, x.right, p, tape)
    else:
        a = branch_attn(x.right, x.right, p, tape)
    y1 = add(x.left, a)
    m = branch_mlp(y1, p, tape)
    y2 = add(x.right, m)
    return StreamPair(left=y1, right=y2)


def _scale_of(y: StreamPair) -> float:
    return max(float(np.max(np.abs(y.left))), float(np.max(np.abs(y.right))), 1.0)


def block_inv(y: StreamPair, p: BlockParams, variant: Coupling, n_iters: int,
              tolerance: Optional[float] = None, layer: Optional[int] = None):
    """Recover the block input from its output.

    Returns (x, recon_error) where recon_error is the max-abs residual of
    the left-stream equation at the final iterate. If `tolerance` is given,
    a residual above tolerance * max(1, |y|_inf) raises ReconstructionError.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    m = branch_mlp(y.left, p)
    x2 = sub(y.right, m)
    if variant == Coupling.STRICT:
        a = branch_attn(x2, x2, p)
        x1 = sub(y.left, a)
    else:
        x1 = y.left
        for _ in range(n_iters):
            a = branch_attn(x1, x2, p)
            x1 = sub(y.left, a)
        a = branch_attn(x1, x2, p)
    recon_error = float(np.max(np.abs(y.left - x1 - a)))
    require_finite(x1, "block_inv")
    require_finite(x2, "block_inv")
    if tolerance is not None and recon_error > tolerance * _scale_of(y):
        raise ReconstructionError(recon_error, tolerance * _scale_of(y), layer)
    return StreamPair(left=x1, right=x2), recon_error


def _grads_from_input(x: StreamPair, grad_y: StreamPair, p: BlockParams,
                      variant: Coupling):
    """Forward from a known input onto a fresh tape, then run composed VJPs.

    Shared by the reversible path (x reconstructed) and the caching oracle
    (x stored). The tape never escapes this call.
    """
    tape = GradTape()
    block_fwd(x, p, variant, tape)
    g1, g2 = grad_y.left, grad_y.right

    grad_y1_mlp, mlp_pieces = branch_mlp_vjp(tape, g2)
    g1_total = g1 + grad_y1_mlp
    grad_q_like, grad_kv_like, attn_pieces = branch_attn_vjp(tape, g1_total)
    assert len(tape) == 0

    if variant == Coupling.ASYMMETRIC:
        gx1 = g1_total + grad_q_like
        gx2 = g2 + grad_kv_like
    else:
        gx1 = g1_total
        gx2 = g2 + grad_q_like + grad_kv_like

    grads = BlockParams(
        norm_q=NormParams(gain=attn_pieces["norm_q"], eps=p.norm_q.eps),
        norm_kv=NormParams(gain=attn_pieces["norm_kv"], eps=p.norm_kv.eps),
        norm_ffn=NormParams(gain=mlp_pieces["norm_ffn"], eps=p.norm_ffn.eps),
        attn_up_q=attn_pieces["attn_up_q"],
        attn_up_kv=attn_pieces["attn_up_kv"],
        attn=attn_pieces["attn"],
        attn_down=attn_pieces["attn_down"],
        mlp_adapters=mlp_pieces["mlp_adapters"],
        router=mlp_pieces["router"],
        experts=mlp_pieces["experts"],
    )
    return StreamPair(left=gx1, right=gx2), grads


def block_vjp(y: StreamPair, grad_y: StreamPair, p: BlockParams, variant: Coupling,
              n_iters: int, tolerance: Optional[float] = None,
              layer: Optional[int] = None):
    """Activation-free backward: reconstruct the input, recompute, backprop.

    Returns (grad_x, grad_params, x, recon_error); `x` is the reconstructed
    input so a stack walk can keep peeling layers without caching anything.
    """
    x, recon_error = block_inv(y, p, variant, n_iters, tolerance, layer)
    grad_x, grads = _grads_from_input(x, grad_y, p, variant)
    return grad_x, grads, x, recon_error


def block_vjp_cached(x: StreamPair, grad_y: StreamPair, p: BlockParams,
                     variant: Coupling):
    """Conventional backward from a stored input; the correctness oracle."""
    return _grads_from_input(x, grad_y, p, variant)


def attention_contraction_estimate(x1: np.ndarray, x2: np.ndarray, p: BlockParams,
                                   rng: Rng, n_probes: int = 4,
                                   step: float = 1e-4) -> float:
    """Directional-derivative proxy for the attention branch's Lipschitz
    constant in its query-source argument; the fixed-point inverse contracts
    when this is below 1.
    """
    base = branch_attn(x1, x2, p)
    scale = max(float(np.max(np.abs(x1))), 1.0)
    h = step * scale
    worst = 0.0
    for i in range(n_probes):
        direction = rng.child(f"probe-{i}").normal(x1.shape).astype(x1.dtype)
        direction = direction / max(float(np.max(np.abs(direction))), 1e-30)
        moved = branch_attn(x1 + h * direction, x2, p)
        worst = max(worst, float(np.max(np.abs(moved - base))) / h)
    return worst
