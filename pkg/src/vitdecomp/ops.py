"""Recorded primitive ops. Each call appends exactly one node to the active tape."""
from __future__ import annotations

import numpy as np

from .graph import DTYPE, OpDescriptor, Tensor, record


def _f32(a):
    return None if a is None else np.asarray(a, dtype=DTYPE)


def add(x: Tensor, y: Tensor, alpha: float = 1.0, beta: float = 1.0) -> Tensor:
    return record(OpDescriptor("add", {"alpha": DTYPE(alpha), "beta": DTYPE(beta)}), [x, y])


def scale(x: Tensor, factor: float) -> Tensor:
    return record(OpDescriptor("scale", {"factor": DTYPE(factor)}), [x])


def linear(x: Tensor, weight, bias=None) -> Tensor:
    return record(OpDescriptor("linear", {"weight": _f32(weight), "bias": _f32(bias)}), [x])


def layernorm(x: Tensor, gamma, beta, eps: float = 1e-5) -> Tensor:
    return record(OpDescriptor("layernorm", {"gamma": _f32(gamma), "beta": _f32(beta), "eps": eps}), [x])


def gelu(x: Tensor) -> Tensor:
    return record(OpDescriptor("gelu"), [x])


def softmax(x: Tensor, mask=None) -> Tensor:
    return record(OpDescriptor("softmax", {"mask": _f32(mask)}), [x])


def matmul(a: Tensor, b: Tensor, token_map=None) -> Tensor:
    """``a @ b``. Linear reduction over the contraction axis when ``a`` is detached.

    ``token_map`` (broadcastable to ``b.shape[:-1]``) names the source token of
    every contracted row of ``b``; it defaults to the row index.
    """
    meta = {"axis": "token"}
    if token_map is not None:
        meta["token_map"] = np.asarray(token_map, dtype=np.int64)
    return record(OpDescriptor("matmul", meta), [a, b])


def transpose(x: Tensor) -> Tensor:
    return record(OpDescriptor("transpose"), [x])


def split_heads(x: Tensor, heads: int) -> Tensor:
    return record(OpDescriptor("split_heads", {"heads": heads}), [x])


def concat_heads(x: Tensor) -> Tensor:
    return record(OpDescriptor("concat_heads", {"axis": "head"}), [x])


def select(x: Tensor, index: int, axis: int = -2) -> Tensor:
    return record(OpDescriptor("select", {"index": index, "axis": axis}), [x])


def mean(x: Tensor, axis: int = -2) -> Tensor:
    return record(OpDescriptor("mean", {"axis": axis}), [x])


def gather(x: Tensor, index, axis: int = -2) -> Tensor:
    return record(OpDescriptor("gather", {"index": np.asarray(index, dtype=np.int64), "axis": axis}), [x])


def reshape(x: Tensor, tail: tuple[int, ...], ntail: int) -> Tensor:
    """View the trailing ``ntail`` axes of ``x`` as ``tail``."""
    return record(OpDescriptor("reshape", {"tail": tuple(tail), "ntail": ntail}), [x])


def patch_merge(x: Tensor, grid: int) -> Tensor:
    return record(OpDescriptor("patch_merge", {"grid": grid, "axis": "neighbor"}), [x])


def concat_tokens(a: Tensor, b: Tensor) -> Tensor:
    return record(OpDescriptor("concat_tokens"), [a, b])


def opaque(x: Tensor, fn, name: str = "opaque") -> Tensor:
    """A block recorded as one nonlinear node (never decomposed)."""
    return record(OpDescriptor("opaque", {"fn": fn, "name": name}), [x])


def custom(fn, *xs: Tensor) -> Tensor:
    """An op with no linearity class; decomposition refuses to cross it."""
    return record(OpDescriptor("custom", {"fn": fn}), list(xs))
