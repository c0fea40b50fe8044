"""Walkers over nested parameter containers.

Parameter objects are frozen dataclasses whose leaves are numpy arrays,
possibly nested through lists. These helpers give every leaf a stable dotted
name ("blocks.0.attn.wq.weight"), which is what the optimizer masks, the
checkpoint format, and gradient comparisons key on. Non-array fields
(eps, head counts, flags) pass through structure-preserving maps unchanged.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterator

import numpy as np


def _join(prefix: str, name: str) -> str:
    return f"{prefix}.{name}" if prefix else name


def named_leaves(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield (dotted name, array) for every array leaf, in field order."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_leaves(getattr(obj, f.name), _join(prefix, f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_leaves(item, _join(prefix, str(i)))
    elif obj is None or isinstance(obj, (int, float, str, bool)):
        return
    else:
        raise TypeError(f"unsupported node {type(obj)} at {prefix!r}")


def map_leaves(fn: Callable[[str, np.ndarray], np.ndarray], obj, prefix: str = ""):
    """Rebuild the structure with fn applied to every array leaf."""
    if isinstance(obj, np.ndarray):
        return fn(prefix, obj)
    if dataclasses.is_dataclass(obj):
        kwargs = {f.name: map_leaves(fn, getattr(obj, f.name), _join(prefix, f.name))
                  for f in dataclasses.fields(obj)}
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [map_leaves(fn, item, _join(prefix, str(i))) for i, item in enumerate(obj)]
    if isinstance(obj, tuple):
        return tuple(map_leaves(fn, item, _join(prefix, str(i))) for i, item in enumerate(obj))
    if obj is None or isinstance(obj, (int, float, str, bool)):
        return obj
    raise TypeError(f"unsupported node {type(obj)} at {prefix!r}")


def leaf_dict(obj) -> dict[str, np.ndarray]:
    return dict(named_leaves(obj))


def zeros_like_tree(obj):
    return map_leaves(lambda _, a: np.zeros_like(a), obj)


def from_leaf_dict(template, leaves: dict[str, np.ndarray]):
    """Rebuild a params object from named arrays, using `template` for the
    structure and non-array fields. Raises KeyError/ValueError on missing
    names or shape mismatches.
    """
    def pick(name: str, there: np.ndarray) -> np.ndarray:
        if name not in leaves:
            raise KeyError(f"missing tensor {name!r}")
        arr = leaves[name]
        if arr.shape != there.shape:
            raise ValueError(f"{name}: shape {arr.shape} != expected {there.shape}")
        if arr.dtype != there.dtype:
            raise ValueError(f"{name}: dtype {arr.dtype} != expected {there.dtype}")
        return arr
    return map_leaves(pick, template)
