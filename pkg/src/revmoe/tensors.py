"""Dense tensor kernels and a deterministic, seedable RNG.

Tensors are plain numpy arrays: row-major buffers with an explicit shape and
a runtime precision of float32 ("single") or float64 ("double"). Outputs of
every public kernel are frozen (read-only) and checked for NaN/Inf, so a
non-finite value is always an exception, never a silent state.

Reduction order: `matmul` materializes the operand product with the
contracted axis innermost and reduces it with numpy's pairwise-tree
summation. That tree is fixed and single-threaded, so results are bitwise
reproducible run to run (no dependence on a BLAS build or thread count).

Broadcasting is restricted to leading axes: two operands must have equal
shapes, or the smaller shape must be a suffix of the larger (e.g. a [d] bias
against a [B,S,d] activation). Anything else needs an explicit reshape.
"""

from __future__ import annotations

import hashlib

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}
_EPS = {np.dtype(np.float32): np.finfo(np.float32).eps,
        np.dtype(np.float64): np.finfo(np.float64).eps}


class TensorError(Exception):
    """Base class for tensor kernel failures."""


class ShapeError(TensorError):
    pass


class PrecisionError(TensorError):
    pass


class NonFiniteError(TensorError):
    pass


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise PrecisionError(f"unknown precision {precision!r}; expected 'single' or 'double'")


def precision_of(x: np.ndarray) -> str:
    for name, dt in PRECISIONS.items():
        if x.dtype == dt:
            return name
    raise PrecisionError(f"array dtype {x.dtype} is not a supported precision")


def machine_eps(x: np.ndarray) -> float:
    return float(_EPS[x.dtype])


def freeze(x: np.ndarray) -> np.ndarray:
    x.setflags(write=False)
    return x


def tensor(data, precision: str = "double") -> np.ndarray:
    """Build a frozen row-major array at the given precision."""
    x = np.ascontiguousarray(data, dtype=dtype_of(precision))
    _require_finite(x, "tensor")
    return freeze(x)


def zeros(shape, precision: str = "double") -> np.ndarray:
    return freeze(np.zeros(shape, dtype=dtype_of(precision)))


def require_finite(x: np.ndarray, op: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"{op} produced non-finite values")


_require_finite = require_finite


def _require_same_dtype(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.dtype != b.dtype:
        raise PrecisionError(f"{op}: mixed precisions {a.dtype} and {b.dtype}")


def _suffix_broadcastable(a: np.ndarray, b: np.ndarray) -> bool:
    small, big = (a, b) if a.ndim <= b.ndim else (b, a)
    return big.shape[big.ndim - small.ndim:] == small.shape


def _finish(x: np.ndarray, op: str) -> np.ndarray:
    _require_finite(x, op)
    return freeze(x)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes.

    Accepts [m,k]x[k,n], batched [...,m,k]x[k,n], and [...,m,k]x[...,k,n]
    with identical leading axes. The k-axis contraction uses numpy pairwise
    summation (fixed tree, deterministic).
    """
    _require_same_dtype(a, b, "matmul")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} x {b.shape}")
    bt = np.swapaxes(b, -1, -2)  # [..., n, k]
    prod = a[..., :, None, :] * bt[..., None, :, :]  # [..., m, n, k], C-contiguous
    return _finish(np.sum(prod, axis=-1), "matmul")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along `axis`; -inf entries get exact weight 0."""
    if x.shape == () or x.shape[axis] == 0:
        raise ShapeError(f"softmax over empty axis {axis} of shape {x.shape}")
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / np.sum(e, axis=axis, keepdims=True)
    return _finish(out, "softmax")


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_same_dtype(a, b, "add")
    if not _suffix_broadcastable(a, b):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not align")
    return _finish(a + b, "add")


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_same_dtype(a, b, "sub")
    if not _suffix_broadcastable(a, b):
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not align")
    return _finish(a - b, "sub")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _require_same_dtype(a, b, "mul")
    if not _suffix_broadcastable(a, b):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not align")
    return _finish(a * b, "mul")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return _finish(x * _sigmoid(x), "silu")


def silu_grad(x: np.ndarray) -> np.ndarray:
    """d/dx of x*sigmoid(x)."""
    s = _sigmoid(x)
    return _finish(s * (1.0 + x * (1.0 - s)), "silu_grad")


class Rng:
    """Counter-based random stream: one seed, one sequence, any platform.

    Wraps numpy's Philox generator. `child` derives an independent stream
    from a label, so draw order in one place never perturbs another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def child(self, label: str) -> "Rng":
        h = hashlib.blake2b(f"{self.seed}/{label}".encode(), digest_size=8).digest()
        return Rng(int.from_bytes(h, "little"))

    def normal(self, shape, std: float = 1.0, precision: str = "double") -> np.ndarray:
        x = self._gen.normal(0.0, 1.0, size=shape) * std
        return freeze(np.ascontiguousarray(x, dtype=dtype_of(precision)))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0,
                precision: str = "double") -> np.ndarray:
        x = self._gen.uniform(low, high, size=shape)
        return freeze(np.ascontiguousarray(x, dtype=dtype_of(precision)))

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        return freeze(np.ascontiguousarray(self._gen.integers(low, high, size=shape),
                                           dtype=np.int64))

    def permutation(self, n: int) -> np.ndarray:
        return freeze(np.ascontiguousarray(self._gen.permutation(n), dtype=np.int64))
