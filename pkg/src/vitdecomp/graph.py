"""Recording tape for dense float32 tensor programs.

Every primitive op appends one :class:`GraphNode` to the active :class:`Tape`.
Nodes carry a linearity class that the decomposition pass uses to decide
whether it can distribute the op over its inputs or has to stop.

Kernels act on the trailing axes of their operands so that the same kernel
can be applied to a stack of contributions with extra leading axes.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

LINEAR_UNARY = "linear-unary"
LINEAR_REDUCTION = "linear-reduction"
LINEAR_BINARY = "linear-binary"
NONLINEAR = "nonlinear"
LEAF = "leaf"
DETACH = "detach"
UNKNOWN = "unknown"

KINDS = (LINEAR_UNARY, LINEAR_REDUCTION, LINEAR_BINARY, NONLINEAR, LEAF, DETACH)
TERMINAL_KINDS = (NONLINEAR, LEAF, DETACH)

DTYPE = np.float32


class GraphError(Exception):
    pass


class ShapeError(GraphError, ValueError):
    pass


class RecordingError(GraphError, RuntimeError):
    pass


@dataclass
class Tensor:
    """Dense float32 array plus the id of the node that produced it."""

    data: np.ndarray
    node: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=DTYPE, order="C")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    def numpy(self) -> np.ndarray:
        return self.data


@dataclass(frozen=True)
class OpDescriptor:
    op: str
    meta: dict = field(default_factory=dict)


@dataclass
class GraphNode:
    id: int
    kind: str
    op: str
    parents: tuple[int, ...]
    meta: dict
    out_shape: tuple[int, ...]
    value: np.ndarray
    scope: dict = field(default_factory=dict)

    def __repr__(self) -> str:
        return f"GraphNode({self.id}, {self.op}, {self.kind}, parents={self.parents}, shape={self.out_shape})"


@dataclass
class Kernel:
    forward: Callable[..., np.ndarray]
    kind: str | Callable[["Tape", Sequence[Tensor], dict], str]
    check: Callable[..., None] | None = None
    observe: Callable[..., dict] | None = None


KERNELS: dict[str, Kernel] = {}


def register(name: str, kind, check=None, observe=None):
    """Register a forward kernel under ``name``.

    ``observe`` may return extra meta captured from the live forward pass
    (LayerNorm statistics); it is stored on the node and reused on replay.
    """

    def deco(fn):
        KERNELS[name] = Kernel(fn, kind, check, observe)
        return fn

    return deco


class Tape:
    """Ordered list of recorded nodes. Use as a context manager to record."""

    def __init__(self):
        self.nodes: list[GraphNode] = []
        self.outputs: list[int] = []
        self._scope: list[dict] = [{}]

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise RecordingError("another tape is already recording on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def __getitem__(self, node_id: int) -> GraphNode:
        if not isinstance(node_id, (int, np.integer)) or not 0 <= node_id < len(self.nodes):
            raise KeyError(f"unknown node id {node_id!r}")
        return self.nodes[node_id]

    @property
    def current_scope(self) -> dict:
        return self._scope[-1]

    @contextlib.contextmanager
    def scope(self, **kw) -> Iterator[None]:
        merged = dict(self._scope[-1])
        merged.update(kw)
        self._scope.append(merged)
        try:
            yield
        finally:
            self._scope.pop()

    def mark_output(self, t: Tensor) -> None:
        self.outputs.append(t.node)

    def value(self, t: Tensor | int) -> np.ndarray:
        nid = t.node if isinstance(t, Tensor) else t
        return self[nid].value

    def dump(self) -> str:
        lines = []
        for n in self.nodes:
            parents = ",".join(str(p) for p in n.parents)
            dims = "x".join(str(s) for s in n.out_shape)
            lines.append(f"node {n.id} {n.kind} parents={parents} shape={dims}")
        return "\n".join(lines)

    def replay(self, overrides: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Re-run every kernel in tape order from recorded leaves.

        Values of nodes listed in ``overrides`` are substituted instead of
        recomputed.
        """
        overrides = overrides or {}
        vals: list[np.ndarray] = []
        for n in self.nodes:
            if n.id in overrides:
                vals.append(np.asarray(overrides[n.id], dtype=DTYPE))
                continue
            if n.kind == LEAF:
                vals.append(n.value)
                continue
            k = KERNELS[n.op]
            ins = [vals[p] for p in n.parents]
            vals.append(np.asarray(k.forward(n.meta, *ins), dtype=DTYPE))
        return vals

    def with_value(self, node_id: int, value: np.ndarray) -> "Tape":
        """Shallow copy of the tape with one stored value replaced."""
        t = Tape()
        t.outputs = list(self.outputs)
        t.nodes = list(self.nodes)
        old = self[node_id]
        t.nodes[node_id] = GraphNode(old.id, old.kind, old.op, old.parents, old.meta,
                                     old.out_shape, np.asarray(value, dtype=DTYPE), old.scope)
        return t


_state = threading.local()


def active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        raise RecordingError("recording inactive: no tape is active on this thread")
    return tape


def scope(**kw):
    return active_tape().scope(**kw)


def mark(t: Tensor, **meta) -> None:
    """Attach extra metadata to the node that produced ``t``."""
    node = active_tape()[t.node]
    node.meta.update(meta)


def record(desc: OpDescriptor, inputs: Sequence[Tensor]) -> Tensor:
    tape = active_tape()
    if desc.op not in KERNELS:
        raise GraphError(f"no kernel registered for op {desc.op!r}")
    k = KERNELS[desc.op]
    for x in inputs:
        # tensors created outside this tape become leaves on first use
        if x.node is None or x.node >= len(tape.nodes) or tape.nodes[x.node].value is not x.data:
            leaf(x)
    arrays = [x.data for x in inputs]
    if k.check is not None:
        k.check(desc.meta, *arrays)
    meta = dict(desc.meta)
    if k.observe is not None:
        meta.update(k.observe(meta, *arrays))
    out = np.asarray(k.forward(meta, *arrays), dtype=DTYPE, order="C")
    kind = k.kind(tape, inputs, meta) if callable(k.kind) else k.kind
    node = GraphNode(len(tape.nodes), kind, desc.op, tuple(x.node for x in inputs), meta,
                     tuple(out.shape), out, dict(tape.current_scope))
    tape.nodes.append(node)
    return Tensor(out, node.id)


def leaf(t: Tensor | np.ndarray, name: str | None = None) -> Tensor:
    """Register ``t`` on the active tape as a leaf node (in place for Tensors)."""
    tape = active_tape()
    if not isinstance(t, Tensor):
        t = Tensor(np.asarray(t, dtype=DTYPE))
    meta = {"name": name} if name else {}
    node = GraphNode(len(tape.nodes), LEAF, "leaf", (), meta, t.shape, t.data, dict(tape.current_scope))
    tape.nodes.append(node)
    t.node = node.id
    return t


def classify(tape: Tape, node_id: int) -> str:
    return tape[node_id].kind


def detach(t: Tensor) -> Tensor:
    return record(OpDescriptor("detach"), [t])


@dataclass(frozen=True)
class FrozenLayerNorm:
    """LayerNorm with statistics frozen from a forward pass.

    Maps each of ``n`` contributions ``c`` to
    ``gamma * (c - mu / n) / sigma + beta / n``; summing the images of all
    ``n`` contributions reproduces the recorded LayerNorm output. ``weights``
    replaces the uniform ``1 / n`` share with one share per contribution
    (the shares must sum to one).
    """

    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray

    def __call__(self, contribs: np.ndarray, n: int | None = None, weights: np.ndarray | None = None) -> np.ndarray:
        if weights is None:
            n = len(contribs) if n is None else n
            return (contribs - self.mu / n) / self.sigma * self.gamma + self.beta / n
        w = np.asarray(weights, dtype=contribs.dtype).reshape((-1,) + (1,) * (contribs.ndim - 1))
        return (contribs - self.mu * w) / self.sigma * self.gamma + self.beta * w


def freeze_layernorm(node: GraphNode) -> FrozenLayerNorm:
    if node.op != "layernorm":
        raise GraphError(f"node {node.id} is {node.op!r}, not a LayerNorm")
    if "mu" not in node.meta or "sigma" not in node.meta:
        raise GraphError(f"LayerNorm node {node.id} has no recorded forward statistics")
    m = node.meta
    return FrozenLayerNorm(m["mu"], m["sigma"], m["gamma"], m["beta"])


def _same_or_broadcast(a: tuple, b: tuple) -> bool:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------- kernels


def _check_add(meta, x, y):
    if not _same_or_broadcast(x.shape, y.shape):
        raise ShapeError(f"add: incompatible shapes {x.shape} and {y.shape}")


@register("add", LINEAR_BINARY, check=_check_add)
def _add(meta, x, y):
    return meta.get("alpha", 1.0) * x + meta.get("beta", 1.0) * y


@register("scale", LINEAR_UNARY)
def _scale(meta, x):
    return x * DTYPE(meta["factor"])


def _check_linear(meta, x):
    W = meta["weight"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {W.shape}")


@register("linear", LINEAR_UNARY, check=_check_linear)
def _linear(meta, x):
    y = x @ meta["weight"]
    if meta.get("bias") is not None:
        y = y + meta["bias"]
    return y


def _ln_stats(meta, x):
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return {"mu": mu, "sigma": np.sqrt(var + meta.get("eps", 1e-5))}


@register("layernorm", LINEAR_UNARY, observe=_ln_stats)
def _layernorm(meta, x):
    if "mu" not in meta:
        meta = {**meta, **_ln_stats(meta, x)}
    return (x - meta["mu"]) / meta["sigma"] * meta["gamma"] + meta["beta"]


@register("gelu", NONLINEAR)
def _gelu(meta, x):
    return gelu(x)


def gelu(x):
    c = DTYPE(np.sqrt(2.0 / np.pi))
    return DTYPE(0.5) * x * (DTYPE(1.0) + np.tanh(c * (x + DTYPE(0.044715) * x ** 3)))


@register("softmax", NONLINEAR)
def _softmax(meta, x):
    if meta.get("mask") is not None:
        x = x + meta["mask"]
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


def _matmul_kind(tape, inputs, meta):
    a = tape[inputs[0].node]
    return LINEAR_REDUCTION if a.kind in (DETACH, LEAF) else NONLINEAR


def _check_matmul(meta, a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if not _same_or_broadcast(a.shape[:-2], b.shape[:-2]):
        raise ShapeError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast")


@register("matmul", _matmul_kind, check=_check_matmul)
def _matmul(meta, a, b):
    return np.matmul(a, b)


@register("transpose", LINEAR_UNARY)
def _transpose(meta, x):
    return np.swapaxes(x, -1, -2)


def _check_split(meta, x):
    if x.shape[-1] % meta["heads"]:
        raise ShapeError(f"split_heads: width {x.shape[-1]} not divisible by {meta['heads']}")


@register("split_heads", LINEAR_UNARY, check=_check_split)
def _split_heads(meta, x):
    h = meta["heads"]
    y = x.reshape(x.shape[:-1] + (h, x.shape[-1] // h))
    return np.moveaxis(y, -2, -3)


@register("concat_heads", LINEAR_REDUCTION)
def _concat_heads(meta, x):
    y = np.moveaxis(x, -3, -2)
    return y.reshape(y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


@register("select", LINEAR_UNARY)
def _select(meta, x):
    return np.take(x, meta["index"], axis=meta.get("axis", -2))


@register("mean", LINEAR_REDUCTION)
def _mean(meta, x):
    return x.mean(axis=meta.get("axis", -2))


def _check_gather(meta, x):
    idx = np.asarray(meta["index"])
    ax = meta.get("axis", -2)
    if idx.size and (idx.max() >= x.shape[ax] or idx.min() < 0):
        raise ShapeError(f"gather: index out of range for axis of size {x.shape[ax]}")


@register("gather", LINEAR_UNARY, check=_check_gather)
def _gather(meta, x):
    return np.take(x, meta["index"], axis=meta.get("axis", -2))


def _check_reshape(meta, x):
    nt = meta["ntail"]
    if int(np.prod(x.shape[len(x.shape) - nt:])) != int(np.prod(meta["tail"])):
        raise ShapeError(f"reshape: cannot view trailing dims of {x.shape} as {meta['tail']}")


@register("reshape", LINEAR_UNARY, check=_check_reshape)
def _reshape(meta, x):
    nt = meta["ntail"]
    return x.reshape(x.shape[: x.ndim - nt] + tuple(meta["tail"]))


def _check_merge(meta, x):
    g = meta["grid"]
    if x.shape[-2] != g * g or g % 2:
        raise ShapeError(f"patch_merge: {x.shape} is not an even {g}x{g} token grid")


@register("patch_merge", LINEAR_REDUCTION, check=_check_merge)
def _patch_merge(meta, x):
    g = meta["grid"]
    lead, d = x.shape[:-2], x.shape[-1]
    y = x.reshape(lead + (g // 2, 2, g // 2, 2, d))
    nl = len(lead)
    # neighbour order (0,0), (1,0), (0,1), (1,1)
    y = y.transpose(tuple(range(nl)) + (nl, nl + 2, nl + 3, nl + 1, nl + 4))
    return y.reshape(lead + ((g // 2) ** 2, 4 * d))


def _check_concat_tokens(meta, a, b):
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"concat_tokens: widths differ {a.shape} vs {b.shape}")


@register("concat_tokens", LINEAR_BINARY, check=_check_concat_tokens)
def _concat_tokens(meta, a, b):
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a = np.broadcast_to(a, lead + a.shape[-2:])
    b = np.broadcast_to(b, lead + b.shape[-2:])
    return np.concatenate([a, b], axis=-2)


@register("detach", DETACH)
def _detach(meta, x):
    return x.copy()


@register("opaque", NONLINEAR)
def _opaque(meta, x):
    return meta["fn"](x)


@register("custom", UNKNOWN)
def _custom(meta, *xs):
    return meta["fn"](*xs)
