"""Differentiable layer primitives: forward passes paired with explicit VJPs.

Each primitive `*_fwd(x, params, tape)` optionally pushes one entry onto a
GradTape; the matching `*_vjp(entry, grad_out)` consumes that entry and
returns the exact Jacobian-transpose products for inputs and parameters.
Tapes are LIFO: a composite forward pushes entries in evaluation order and
its backward pops them in reverse. Entries carry enough operands to replay
the forward bitwise (see `replay`).

All primitives are pure functions of (inputs, params); nothing here holds
state between calls, which is what lets the reversible stack discard every
tape before its enclosing call returns.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensors import ShapeError, freeze, matmul, require_finite, silu, silu_grad, softmax

_NEG_INF = float("-inf")


class TapeError(Exception):
    """Raised when a VJP is fed a missing or mismatched tape entry."""


@dataclass
class TapeEntry:
    op: str
    saved: tuple
    out: np.ndarray

    def scalar_count(self) -> int:
        n = self.out.size
        for item in self.saved:
            if isinstance(item, np.ndarray):
                n += item.size
        return n


class GradTape:
    """Ordered record of primitive applications, consumed LIFO by VJPs."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def push(self, op: str, saved: tuple, out: np.ndarray) -> None:
        self.entries.append(TapeEntry(op, saved, out))

    def pop(self, op: str) -> TapeEntry:
        if not self.entries:
            raise TapeError(f"tape exhausted while looking for {op!r}")
        entry = self.entries.pop()
        if entry.op != op:
            raise TapeError(f"stale tape: expected {op!r}, found {entry.op!r}")
        return entry

    def __len__(self) -> int:
        return len(self.entries)

    def scalar_count(self) -> int:
        return sum(e.scalar_count() for e in self.entries)


# ---------------------------------------------------------------------------
# parameter containers


@dataclass(frozen=True)
class NormParams:
    gain: np.ndarray  # [d]
    eps: float = 1e-6


@dataclass(frozen=True)
class LinearParams:
    weight: np.ndarray  # [out, in]
    bias: Optional[np.ndarray] = None  # [out]


@dataclass(frozen=True)
class MlpParams:
    """Two linear maps with a SiLU between them."""
    w1: LinearParams
    w2: LinearParams


@dataclass(frozen=True)
class AttentionParams:
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    n_heads: int
    causal: bool = True


# ---------------------------------------------------------------------------
# rmsnorm


def rmsnorm_fwd(x: np.ndarray, p: NormParams, tape: Optional[GradTape] = None) -> np.ndarray:
    """y = gain * x / sqrt(mean(x^2, last axis) + eps)."""
    d = x.shape[-1]
    if p.gain.shape != (d,):
        raise ShapeError(f"rmsnorm gain {p.gain.shape} does not match width {d}")
    inv_rms = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + p.eps)
    y = p.gain * x * inv_rms
    require_finite(y, "rmsnorm")
    y = freeze(y)
    if tape is not None:
        tape.push("rmsnorm", (x, inv_rms, p), y)
    return y


def rmsnorm_vjp(entry: TapeEntry, grad_y: np.ndarray):
    """Returns (grad_x, grad_gain)."""
    if entry.op != "rmsnorm":
        raise TapeError(f"rmsnorm_vjp got {entry.op!r} entry")
    x, inv_rms, p = entry.saved
    d = x.shape[-1]
    gy_gain = grad_y * p.gain
    # y_i = g_i x_i r with r = (mean(x^2)+eps)^-1/2, dr/dx_k = -r^3 x_k / d
    dot = np.sum(gy_gain * x, axis=-1, keepdims=True)
    grad_x = gy_gain * inv_rms - x * (inv_rms ** 3) * dot / d
    grad_gain = np.sum((grad_y * x * inv_rms).reshape(-1, d), axis=0)
    return grad_x, grad_gain


# ---------------------------------------------------------------------------
# linear


def _rows(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1])


def linear_fwd(x: np.ndarray, p: LinearParams, tape: Optional[GradTape] = None) -> np.ndarray:
    """y = x @ weight.T (+ bias), applied over the last axis."""
    out_w, in_w = p.weight.shape
    if x.shape[-1] != in_w:
        raise ShapeError(f"linear input width {x.shape[-1]} != weight in-width {in_w}")
    y2 = matmul(_rows(x), p.weight.T)
    if p.bias is not None:
        y2 = y2 + p.bias
    y = freeze(y2.reshape(x.shape[:-1] + (out_w,)))
    if tape is not None:
        tape.push("linear", (x, p), y)
    return y


def linear_vjp(entry: TapeEntry, grad_y: np.ndarray):
    """Returns (grad_x, LinearParams of gradients)."""
    if entry.op != "linear":
        raise TapeError(f"linear_vjp got {entry.op!r} entry")
    x, p = entry.saved
    g2 = _rows(grad_y)
    x2 = _rows(x)
    grad_x = matmul(g2, p.weight).reshape(x.shape)
    grad_w = matmul(g2.T, x2)
    grad_b = np.sum(g2, axis=0) if p.bias is not None else None
    return grad_x, LinearParams(weight=grad_w, bias=grad_b)


# ---------------------------------------------------------------------------
# mlp: linear -> silu -> linear


def mlp_fwd(x: np.ndarray, p: MlpParams, tape: Optional[GradTape] = None) -> np.ndarray:
    h = linear_fwd(x, p.w1)
    a = silu(h)
    y = linear_fwd(a, p.w2)
    if tape is not None:
        tape.push("mlp", (x, h, a, p), y)
    return y


def mlp_vjp(entry: TapeEntry, grad_y: np.ndarray):
    """Returns (grad_x, MlpParams of gradients)."""
    if entry.op != "mlp":
        raise TapeError(f"mlp_vjp got {entry.op!r} entry")
    x, h, a, p = entry.saved
    g2 = _rows(grad_y)
    grad_a = matmul(g2, p.w2.weight).reshape(a.shape)
    grad_w2 = LinearParams(weight=matmul(g2.T, _rows(a)),
                           bias=np.sum(g2, axis=0) if p.w2.bias is not None else None)
    grad_h = grad_a * silu_grad(h)
    gh2 = _rows(grad_h)
    grad_w1 = LinearParams(weight=matmul(gh2.T, _rows(x)),
                           bias=np.sum(gh2, axis=0) if p.w1.bias is not None else None)
    grad_x = matmul(gh2, p.w1.weight).reshape(x.shape)
    return grad_x, MlpParams(w1=grad_w1, w2=grad_w2)


# ---------------------------------------------------------------------------
# multi-head cross-branch attention


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, s, d = x.shape
    return x.reshape(b, s, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, s, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b, s, h * dh)


def cross_attention_fwd(q_src: np.ndarray, kv_src: np.ndarray, p: AttentionParams,
                        tape: Optional[GradTape] = None) -> np.ndarray:
    """Scaled dot-product attention with queries from one stream and both
    keys and values from the other. Scale is 1/sqrt(head width); with
    `causal` set, position i attends only to j <= i.
    """
    if q_src.ndim != 3 or kv_src.ndim != 3:
        raise ShapeError("attention expects [batch, seq, width] inputs")
    if q_src.shape != kv_src.shape:
        raise ShapeError(f"attention stream shapes disagree: {q_src.shape} vs {kv_src.shape}")
    d = q_src.shape[-1]
    if d % p.n_heads != 0:
        raise ShapeError(f"width {d} not divisible by {p.n_heads} heads")
    scale = 1.0 / np.sqrt(d // p.n_heads)

    q = _split_heads(linear_fwd(q_src, p.wq), p.n_heads)  # [B,H,S,dh]
    k = _split_heads(linear_fwd(kv_src, p.wk), p.n_heads)
    v = _split_heads(linear_fwd(kv_src, p.wv), p.n_heads)

    scores = matmul(q, np.swapaxes(k, -1, -2)) * scale  # [B,H,S,S]
    if p.causal:
        s = scores.shape[-1]
        mask = np.triu(np.ones((s, s), dtype=bool), k=1)
        scores = np.where(mask, _NEG_INF, scores)
    probs = softmax(scores, axis=-1)
    ctx = _merge_heads(matmul(probs, v))  # [B,S,d]
    out = linear_fwd(ctx, p.wo)
    if tape is not None:
        tape.push("cross_attention", (q_src, kv_src, q, k, v, probs, ctx, p), out)
    return out


def cross_attention_vjp(entry: TapeEntry, grad_out: np.ndarray):
    """Returns (grad_q_src, grad_kv_src, AttentionParams of gradients).

    grad_kv_src carries the sum of the key-path and value-path gradients,
    since keys and values share one source stream.
    """
    if entry.op != "cross_attention":
        raise TapeError(f"cross_attention_vjp got {entry.op!r} entry")
    q_src, kv_src, q, k, v, probs, ctx, p = entry.saved
    d = q_src.shape[-1]
    scale = 1.0 / np.sqrt(d // p.n_heads)

    g2 = _rows(grad_out)
    grad_ctx = matmul(g2, p.wo.weight).reshape(ctx.shape)
    grad_wo = LinearParams(weight=matmul(g2.T, _rows(ctx)),
                           bias=np.sum(g2, axis=0) if p.wo.bias is not None else None)

    g_ctx_h = _split_heads(grad_ctx, p.n_heads)  # [B,H,S,dh]
    grad_probs = matmul(g_ctx_h, np.swapaxes(v, -1, -2))  # [B,H,S,S]
    grad_v = matmul(np.swapaxes(probs, -1, -2), g_ctx_h)  # [B,H,S,dh]

    # softmax backward; rows with prob 0 (masked) contribute exactly 0
    dot = np.sum(grad_probs * probs, axis=-1, keepdims=True)
    grad_scores = probs * (grad_probs - dot)

    grad_q = matmul(grad_scores, k) * scale
    grad_k = matmul(np.swapaxes(grad_scores, -1, -2), q) * scale

    def _input_grads(grad_heads, lin, src):
        g = _rows(_merge_heads(grad_heads))
        grad_src = matmul(g, lin.weight).reshape(src.shape)
        grads = LinearParams(weight=matmul(g.T, _rows(src)),
                             bias=np.sum(g, axis=0) if lin.bias is not None else None)
        return grad_src, grads

    grad_q_src, grad_wq = _input_grads(grad_q, p.wq, q_src)
    grad_k_src, grad_wk = _input_grads(grad_k, p.wk, kv_src)
    grad_v_src, grad_wv = _input_grads(grad_v, p.wv, kv_src)
    grad_kv_src = grad_k_src + grad_v_src

    grads = AttentionParams(wq=grad_wq, wk=grad_wk, wv=grad_wv, wo=grad_wo,
                            n_heads=p.n_heads, causal=p.causal)
    return grad_q_src, grad_kv_src, grads


# ---------------------------------------------------------------------------
# replay: rerun a recorded primitive from its saved operands


def replay(entry: TapeEntry) -> np.ndarray:
    if entry.op == "rmsnorm":
        x, _, p = entry.saved
        return rmsnorm_fwd(x, p)
    if entry.op == "linear":
        x, p = entry.saved
        return linear_fwd(x, p)
    if entry.op == "mlp":
        x, _, _, p = entry.saved
        return mlp_fwd(x, p)
    if entry.op == "cross_attention":
        q_src, kv_src, *_, p = entry.saved
        return cross_attention_fwd(q_src, kv_src, p)
    raise TapeError(f"no replay rule for {entry.op!r}")
