"""Recursive decomposition of a recorded representation into direct contributions.

The traversal starts at the node producing ``z`` and walks parents while the
nodes are linear. Contributions travel back up as a *stack*: an array whose
leading axis enumerates contributions, each with the shape of the node being
decomposed, plus one tag per row saying which component (and token) it came
from. Linear unary nodes map every row; binary nodes concatenate the two
stacks; reduction nodes may unbind rows along the reduced axis (heads, source
tokens). Terminal nodes (nonlinear, leaf, detach, or the residual stream at the
decomposition boundary) start a new stack holding their own value.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import graph as G
from .graph import DTYPE, GraphNode, Tape, freeze_layernorm

COMPONENT = "component"
COMPONENT_TOKEN = "component-token"
GRANULARITIES = (COMPONENT, COMPONENT_TOKEN)

DEFAULT_TOL = 1e-5

_KIND_ORDER = {"init": 0, "head": 1, "attn": 2, "mlp": 3, "opaque": 4, "layer": 5, "total": 6}


class DecompositionError(Exception):
    pass


class UnclassifiableNodeError(DecompositionError):
    pass


class ReconstructionError(DecompositionError):
    def __init__(self, msg: str, residuals: list[tuple[int, str, float]] | None = None):
        super().__init__(msg)
        self.residuals = residuals or []


@dataclass(frozen=True)
class ComponentId:
    """Init | MLP(layer) | Head(layer, head) | Opaque(layer, label).

    Layers count from the last layer (index 0).
    """

    kind: str
    layer: int = -1
    head: int = -1
    label: str = ""

    @classmethod
    def init(cls) -> "ComponentId":
        return cls("init")

    @classmethod
    def mlp(cls, layer: int) -> "ComponentId":
        return cls("mlp", layer)

    @classmethod
    def head_of(cls, layer: int, head: int) -> "ComponentId":
        return cls("head", layer, head)

    @classmethod
    def opaque(cls, layer: int, label: str = "conv") -> "ComponentId":
        return cls("opaque", layer, -1, label)

    def sort_key(self):
        if self.kind == "init":
            return (-1, 0, 0, "")
        return (self.layer, _KIND_ORDER[self.kind], self.head, self.label)

    def __str__(self) -> str:
        if self.kind == "init":
            return "init"
        if self.kind == "total":
            return "total"
        if self.kind == "head":
            return f"L{self.layer:02d}.h{self.head:02d}"
        if self.kind == "opaque":
            return f"L{self.layer:02d}.{self.label}"
        return f"L{self.layer:02d}.{self.kind}"

    @classmethod
    def parse(cls, s: str) -> "ComponentId":
        if s == "init":
            return cls.init()
        if s == "total":
            return cls("total")
        layer, rest = s.split(".", 1)
        layer = int(layer[1:])
        if rest.startswith("h") and rest[1:].isdigit():
            return cls.head_of(layer, int(rest[1:]))
        if rest in ("mlp", "attn", "layer"):
            return cls(rest, layer)
        return cls.opaque(layer, rest)


@dataclass(frozen=True)
class Contribution:
    component: ComponentId
    token: int | None
    vector: np.ndarray


@dataclass(frozen=True)
class Key:
    component: ComponentId
    token: int | None = None
    grid: int | None = None
    cls: bool = False

    def __str__(self) -> str:
        return str(self.component) if self.token is None else f"{self.component}@t{self.token}"


@dataclass
class Decomposition:
    """Contributions for a batch of images sharing one component table.

    ``vectors`` has shape (n_images, n_keys, d) and sums over keys to ``z``.
    """

    keys: list[Key]
    vectors: np.ndarray
    z: np.ndarray
    model_id: str = ""
    granularity: str = COMPONENT
    n_layers_decomposed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n_images(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[-1]

    @property
    def components(self) -> list[ComponentId]:
        seen, out = set(), []
        for k in self.keys:
            if k.component not in seen:
                seen.add(k.component)
                out.append(k.component)
        return out

    def contributions(self, image: int = 0) -> list[Contribution]:
        return [Contribution(k.component, k.token, self.vectors[image, j]) for j, k in enumerate(self.keys)]

    def residual(self) -> np.ndarray:
        """Per-image relative L2 reconstruction error, computed in float64."""
        s = self.vectors.astype(np.float64).sum(axis=1)
        z = self.z.astype(np.float64)
        num = np.linalg.norm(s - z, axis=-1)
        den = np.linalg.norm(z, axis=-1)
        return np.where(den > 0, num / np.where(den > 0, den, 1.0), num)

    def verify(self, tol: float = DEFAULT_TOL) -> float:
        r = float(self.residual().max()) if self.n_images else 0.0
        if not r <= tol:
            raise ReconstructionError(f"reconstruction error {r:.3e} exceeds tolerance {tol:.1e}")
        return r

    def component_matrix(self) -> np.ndarray:
        """(n_images, n_components, d), summing tokens of each component."""
        comps = self.components
        idx = {c: i for i, c in enumerate(comps)}
        out = np.zeros((self.n_images, len(comps), self.d), dtype=np.float64)
        for j, k in enumerate(self.keys):
            out[:, idx[k.component]] += self.vectors[:, j]
        return out.astype(DTYPE)

    def select_images(self, idx) -> "Decomposition":
        idx = np.asarray(idx)
        return replace(self, vectors=self.vectors[idx], z=self.z[idx])

    @staticmethod
    def concat(parts: Sequence["Decomposition"]) -> "Decomposition":
        first = parts[0]
        for p in parts[1:]:
            if p.keys != first.keys:
                raise DecompositionError("cannot concatenate decompositions with different component tables")
        return replace(first, vectors=np.concatenate([p.vectors for p in parts]),
                       z=np.concatenate([p.z for p in parts]))


# ------------------------------------------------------------------ stacks


@dataclass
class Tag:
    component: str
    layer: int = -1
    head: int | None = None
    token: int | None = None
    grid: int | None = None
    cls: bool = False
    label: str = ""

    def with_(self, **kw) -> "Tag":
        return replace(self, **kw)


@dataclass
class Stack:
    values: np.ndarray  # (n, *node_shape)
    tags: list[Tag]

    def __len__(self) -> int:
        return len(self.tags)


def _repeat_tags(tags: list[Tag], k: int, **per_piece) -> list[Tag]:
    # row-major: row r, piece p -> index r * k + p
    out = []
    for t in tags:
        for p in range(k):
            kw = {name: vals[p] for name, vals in per_piece.items()}
            out.append(t.with_(**kw))
    return out


def shares(tags: list[Tag]) -> np.ndarray:
    """Share of a constant term given to each row.

    Every component present gets an equal share, split evenly over its token
    rows, so the component totals do not depend on the granularity.
    """
    groups: dict[tuple, int] = {}
    keys = [(t.component, t.layer, t.head, t.label) for t in tags]
    for k in keys:
        groups[k] = groups.get(k, 0) + 1
    return np.array([1.0 / (len(groups) * groups[k]) for k in keys], dtype=DTYPE)


def push_linear(node: GraphNode, stack: Stack) -> Stack:
    """Apply a linear-unary node to every contribution, sharing any bias between them."""
    n = len(stack)
    v = stack.values
    op, m = node.op, node.meta
    if op == "linear":
        out = v @ m["weight"]
        if m.get("bias") is not None and n:
            out = out + shares(stack.tags).reshape((-1,) + (1,) * (out.ndim - 1)) * m["bias"]
    elif op == "layernorm":
        out = freeze_layernorm(node)(v, weights=shares(stack.tags)) if n else v
    elif op in ("scale", "select", "gather", "reshape", "split_heads", "transpose"):
        out = G.KERNELS[op].forward(m, v)
    else:
        raise UnclassifiableNodeError(f"node {node.id} ({op}) is marked linear-unary but has no linear rule")
    return Stack(np.asarray(out, dtype=DTYPE), stack.tags)


def decomp_binary(node: GraphNode, left: Stack, right: Stack) -> Stack:
    """Map both parents' contributions so that together they sum to the node output."""
    shape = node.out_shape
    if node.kind != G.LINEAR_BINARY:
        raise DecompositionError(f"node {node.id} is {node.kind}, not linear-binary")
    if node.op == "add":
        a, b = node.meta.get("alpha", 1.0), node.meta.get("beta", 1.0)
        lv = np.broadcast_to(left.values * DTYPE(a), (len(left),) + shape)
        rv = np.broadcast_to(right.values * DTYPE(b), (len(right),) + shape)
    elif node.op == "concat_tokens":
        lead = shape[:-2]
        na = left.values.shape[-2]
        lv = np.zeros((len(left),) + shape, dtype=DTYPE)
        rv = np.zeros((len(right),) + shape, dtype=DTYPE)
        lv[..., :na, :] = np.broadcast_to(left.values, (len(left),) + lead + left.values.shape[-2:])
        rv[..., na:, :] = np.broadcast_to(right.values, (len(right),) + lead + right.values.shape[-2:])
    else:
        raise UnclassifiableNodeError(f"no binary rule for op {node.op!r}")
    return Stack(np.concatenate([lv, rv], axis=0).astype(DTYPE), left.tags + right.tags)


def decomp_reduction(node: GraphNode, stack: Stack, unbind: bool = True, operand: np.ndarray | None = None) -> Stack:
    """Decompose a linear reduction.

    With ``unbind`` every contribution is split along the reduced axis into
    pieces that each map to the output shape; without it the reduction is
    applied to each contribution as a whole.
    """
    op, m = node.op, node.meta
    if "axis" not in m:
        raise DecompositionError(f"reduction node {node.id} carries no reduction axis")
    v, n = stack.values, len(stack)
    if op == "matmul":
        if operand is None:
            raise DecompositionError("matmul reduction needs the constant left operand")
        if not unbind:
            return Stack(np.matmul(operand, v).astype(DTYPE), stack.tags)
        tm = m.get("token_map")
        if tm is None:
            tm = np.arange(v.shape[-2])
        tm_full = np.broadcast_to(tm, v.shape[1:-1])
        tokens = np.unique(tm_full)
        pieces = []
        for t in tokens:
            mask = (tm_full == t).astype(DTYPE)[..., None]
            pieces.append(np.matmul(operand, v * mask))
        out = np.stack(pieces, axis=1)  # (n, T, ...)
        out = out.reshape((n * len(tokens),) + out.shape[2:])
        return Stack(out.astype(DTYPE), _repeat_tags(stack.tags, len(tokens), token=[int(t) for t in tokens]))
    if op == "concat_heads":
        if not unbind:
            return Stack(G.KERNELS[op].forward(m, v), stack.tags)
        h = v.shape[-3]
        pieces = []
        for i in range(h):
            sel = np.zeros_like(v)
            sel[..., i, :, :] = v[..., i, :, :]
            pieces.append(G.KERNELS[op].forward(m, sel))
        out = np.stack(pieces, axis=1)
        out = out.reshape((n * h,) + out.shape[2:])
        return Stack(out.astype(DTYPE), _repeat_tags(stack.tags, h, head=list(range(h))))
    if op == "mean":
        ax = m.get("axis", -2)
        if not unbind:
            return Stack(v.mean(axis=ax).astype(DTYPE), stack.tags)
        size = v.shape[ax]
        vv = np.moveaxis(v, ax, 1)  # (n, N, ...)
        out = (vv / DTYPE(size)).reshape((n * size,) + vv.shape[2:])
        return Stack(out.astype(DTYPE), _repeat_tags(stack.tags, size))
    if op == "patch_merge":
        if not unbind:
            return Stack(G.KERNELS[op].forward(m, v), stack.tags)
        merged = G.KERNELS[op].forward(m, v)
        d = v.shape[-1]
        pieces = []
        for j in range(4):
            sel = np.zeros_like(merged)
            sel[..., j * d:(j + 1) * d] = merged[..., j * d:(j + 1) * d]
            pieces.append(sel)
        out = np.stack(pieces, axis=1).reshape((n * 4,) + merged.shape[1:])
        return Stack(out.astype(DTYPE), _repeat_tags(stack.tags, 4))
    raise UnclassifiableNodeError(f"no reduction rule for op {op!r}")


# --------------------------------------------------------------- traversal


class _Traversal:
    def __init__(self, tape: Tape, granularity: str, stop_block: int | None, diagnose: bool):
        self.tape = tape
        self.tokens = granularity == COMPONENT_TOKEN
        self.stop_block = stop_block
        self.diagnose = diagnose
        self.residuals: list[tuple[int, str, float]] = []

    def visit(self, nid: int) -> Stack:
        node = self.tape[nid]
        if self.stop_block is not None and node.meta.get("block_input") == self.stop_block:
            st = self.terminal(node, init=True)
        elif node.kind == G.UNKNOWN or node.kind not in G.KINDS:
            raise UnclassifiableNodeError(f"node {nid} ({node.op}) has no linearity class")
        elif node.kind in G.TERMINAL_KINDS:
            st = self.terminal(node)
        elif node.kind == G.LINEAR_UNARY:
            st = push_linear(node, self.visit(node.parents[0]))
        elif node.kind == G.LINEAR_BINARY:
            st = decomp_binary(node, self.visit(node.parents[0]), self.visit(node.parents[1]))
        else:
            st = self.reduction(node)
        if self.diagnose:
            got = st.values.astype(np.float64).sum(axis=0)
            ref = node.value.astype(np.float64)
            den = max(np.linalg.norm(ref), 1e-30)
            self.residuals.append((nid, node.op, float(np.linalg.norm(got - ref) / den)))
        return st

    def reduction(self, node: GraphNode) -> Stack:
        if node.op == "matmul":
            a = self.tape[node.parents[0]].value
            child = self.visit(node.parents[1])
            untagged = all(t.token is None for t in child.tags)
            st = decomp_reduction(node, child, unbind=self.tokens and untagged, operand=a)
            if self.tokens and untagged:
                grid, cls = node.scope.get("grid"), node.scope.get("cls", False)
                st.tags = [t.with_(grid=grid, cls=cls) for t in st.tags]
            return st
        child = self.visit(node.parents[0])
        if node.op == "concat_heads":
            return decomp_reduction(node, child, unbind=True)
        return decomp_reduction(node, child, unbind=False)

    def terminal(self, node: GraphNode, init: bool = False) -> Stack:
        sc = node.scope
        comp = "init" if init else sc.get("component", "init")
        if comp not in ("attn", "mlp", "conv"):
            comp = "init"
        if node.kind == G.LEAF and not init and not np.any(node.value):
            return Stack(np.zeros((0,) + node.out_shape, dtype=DTYPE), [])
        layer = -1 if comp == "init" else int(sc.get("layer", -1))
        tag = Tag(comp, layer, label="conv" if comp == "conv" else "")
        v = node.value[None]
        if self.tokens and comp != "attn" and "grid" in sc and node.value.ndim >= 2:
            n_tok = node.value.shape[-2]
            eye = np.eye(n_tok, dtype=DTYPE)[:, :, None]  # (N, N, 1)
            v = node.value[None] * eye.reshape((n_tok,) + (1,) * (node.value.ndim - 2) + (n_tok, 1))
            tags = [tag.with_(token=t, grid=sc.get("grid"), cls=sc.get("cls", False)) for t in range(n_tok)]
            return Stack(v.astype(DTYPE), tags)
        return Stack(v.astype(DTYPE), [tag])


def _key(tag: Tag, tokens: bool) -> Key:
    if tag.component == "init":
        cid = ComponentId.init()
    elif tag.component == "attn":
        if tag.head is None:
            raise DecompositionError(f"attention contribution in layer {tag.layer} was never split by head")
        cid = ComponentId.head_of(tag.layer, tag.head)
    elif tag.component == "mlp":
        cid = ComponentId.mlp(tag.layer)
    else:
        cid = ComponentId.opaque(tag.layer, tag.label or "conv")
    if tokens:
        return Key(cid, tag.token, tag.grid, tag.cls)
    return Key(cid)


def _infer_layers(tape: Tape) -> int:
    marks = [n.meta["block_input"] for n in tape.nodes if "block_input" in n.meta]
    return max(marks) if marks else 0


def rep_decompose(tape: Tape, final_node: int | None = None, granularity: str = COMPONENT,
                  layers_to_decompose: int | str | None = "all", tol: float = DEFAULT_TOL,
                  check: bool = True, model_id: str = "") -> Decomposition:
    """Decompose the output of ``final_node`` into direct component contributions.

    ``layers_to_decompose`` counts layers from the end of the network; the
    residual stream entering the earliest decomposed layer becomes the single
    ``init`` contribution. Raises :class:`ReconstructionError` (with a
    per-node residual report) if the contributions do not sum to ``z``.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    if final_node is None:
        if not tape.outputs:
            raise DecompositionError("tape has no marked output; pass final_node")
        final_node = tape.outputs[-1]
    n_layers = _infer_layers(tape)
    if layers_to_decompose in (None, "all"):
        k = n_layers
    else:
        k = int(layers_to_decompose)
        if not 0 <= k <= n_layers:
            raise DecompositionError(f"cannot decompose {k} layers of a {n_layers}-layer model")
    has_marks = any("block_input" in n.meta for n in tape.nodes)
    stop = (n_layers - k) if has_marks else None

    tr = _Traversal(tape, granularity, stop, diagnose=False)
    st = tr.visit(final_node)
    tokens = granularity == COMPONENT_TOKEN
    z = tape[final_node].value
    vals = st.values
    if z.ndim <= 1:
        z2, vals = z[None], vals[:, None]
    else:
        z2 = z.reshape(-1, z.shape[-1])
        vals = vals.reshape((len(st),) + z2.shape)

    order: dict[Key, int] = {}
    for t in st.tags:
        order.setdefault(_key(t, tokens), len(order))
    if not any(k_.component.kind == "init" for k_ in order):
        order[Key(ComponentId.init(), 0 if tokens else None)] = len(order)
    keys = sorted(order, key=lambda k_: (k_.component.sort_key(), -1 if k_.token is None else k_.token))
    pos = {k_: i for i, k_ in enumerate(keys)}
    out = np.zeros((z2.shape[0], len(keys), z2.shape[1]), dtype=np.float64)
    for row, t in enumerate(st.tags):
        out[:, pos[_key(t, tokens)]] += vals[row]
    dec = Decomposition(keys, out.astype(DTYPE), z2.astype(DTYPE), model_id, granularity, k)
    if check:
        r = dec.residual()
        worst = float(r.max()) if r.size else 0.0
        dec.meta["residual"] = worst
        if not worst <= tol:
            diag = _Traversal(tape, granularity, stop, diagnose=True)
            diag.visit(final_node)
            bad = sorted(diag.residuals, key=lambda x: -x[2])[:10]
            report = "; ".join(f"node {i} {op}: {res:.2e}" for i, op, res in bad)
            raise ReconstructionError(f"reconstruction error {worst:.3e} > {tol:.1e}; worst nodes: {report}", bad)
    return dec


def decompose_images(model, images: np.ndarray, granularity: str = COMPONENT,
                     layers_to_decompose: int | str | None = "all", chunk: int = 32,
                     tol: float = DEFAULT_TOL) -> Decomposition:
    """Forward ``images`` through ``model`` in chunks and decompose each chunk."""
    parts = []
    for i in range(0, len(images), chunk):
        _, tape = model.forward(images[i:i + chunk])
        parts.append(rep_decompose(tape, granularity=granularity, layers_to_decompose=layers_to_decompose,
                                   tol=tol, model_id=model.model_id))
    dec = Decomposition.concat(parts)
    dec.meta["residual"] = max(p.meta.get("residual", 0.0) for p in parts)
    return dec


# ----------------------------------------------------------------- reduce

COLLAPSE = ("tokens", "heads", "layers", "all")


def reduce_decomposition(dec: Decomposition, collapse: str) -> Decomposition:
    """Sum contributions sharing a coarser key.

    ``tokens`` drops token indices, ``heads`` merges the heads of each layer,
    ``layers`` merges every component of a layer, ``all`` leaves one vector (z).
    """
    if collapse not in COLLAPSE:
        raise ValueError(f"collapse must be one of {COLLAPSE}")
    if collapse == "tokens" and dec.granularity != COMPONENT_TOKEN:
        raise DecompositionError("collapse='tokens' needs a component-token decomposition")

    def coarse(k: Key) -> Key:
        c = k.component
        if collapse == "all":
            return Key(ComponentId("total"))
        if collapse == "tokens":
            return Key(c)
        if collapse == "heads" and c.kind == "head":
            c = ComponentId("attn", c.layer)
        if collapse == "layers" and c.kind != "init":
            c = ComponentId("layer", c.layer)
        return replace(k, component=c)

    order: dict[Key, int] = {}
    mapping = []
    for k in dec.keys:
        ck = coarse(k)
        order.setdefault(ck, len(order))
        mapping.append(ck)
    keys = sorted(order, key=lambda k_: (k_.component.sort_key(), -1 if k_.token is None else k_.token))
    pos = {k_: i for i, k_ in enumerate(keys)}
    out = np.zeros((dec.n_images, len(keys), dec.d), dtype=np.float64)
    for j, ck in enumerate(mapping):
        out[:, pos[ck]] += dec.vectors[:, j]
    gran = COMPONENT if collapse in ("tokens", "all") else dec.granularity
    return replace(dec, keys=keys, vectors=out.astype(DTYPE), granularity=gran, meta=dict(dec.meta))


def component_keys(dec: Decomposition) -> list[str]:
    return [str(k) for k in dec.keys]


def layer_of(c: ComponentId) -> int:
    return c.layer


def group_by_layer(components: Iterable[ComponentId]) -> dict[int, list[ComponentId]]:
    out: dict[int, list[ComponentId]] = {}
    for c in components:
        out.setdefault(c.layer, []).append(c)
    return out
