"""Toy vision transformers recorded op by op on a :class:`~vitdecomp.graph.Tape`.

Four variants share one block vocabulary:

* ``vanilla-cls``      CLS token readout
* ``vanilla-meanpool`` mean over tokens
* ``windowed``         (shifted) window attention with patch merging between stages
* ``gridblock``        opaque conv block + block attention + grid attention per unit

Every attention or MLP branch reads a detached copy of the residual stream,
so the decomposition pass only ever collects direct contributions.
"""
from __future__ import annotations

import functools

import numpy as np

from .. import ops
from ..graph import DTYPE, Tape, Tensor, detach, gelu, mark, scope
from .config import ModelConfig

MASK_VALUE = -1e9


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, H, W, C) -> (B, tokens, patch*patch*C), tokens in row-major order."""
    images = np.asarray(images, dtype=DTYPE)
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, patch * patch * c))


PIXEL_MEAN = 0.5
PIXEL_SCALE = 4.0


def prepare(images: np.ndarray, patch: int) -> np.ndarray:
    """Centre pixel values and cut into patch tokens."""
    return patchify((np.asarray(images, dtype=DTYPE) - DTYPE(PIXEL_MEAN)) * DTYPE(PIXEL_SCALE), patch)


def window_partition_index(grid: int, window: int, shift: int = 0) -> np.ndarray:
    """Global token ids per window after a cyclic shift, shape (n_windows, window**2)."""
    idx = np.arange(grid * grid).reshape(grid, grid)
    if shift:
        idx = np.roll(idx, (-shift, -shift), axis=(0, 1))
    n = grid // window
    return idx.reshape(n, window, n, window).transpose(0, 2, 1, 3).reshape(n * n, window * window)


def grid_partition_index(grid: int, window: int) -> np.ndarray:
    """Dilated (grid) attention groups: each group holds tokens spaced ``grid // window`` apart."""
    s = grid // window
    idx = np.arange(grid * grid).reshape(grid, grid)
    return idx.reshape(window, s, window, s).transpose(1, 3, 0, 2).reshape(s * s, window * window)


def shifted_window_mask(grid: int, window: int, shift: int) -> np.ndarray:
    """Additive mask (n_windows, 1, w*w, w*w) blocking attention across wrap-around seams."""
    label = np.zeros((grid, grid), dtype=np.int64)
    cuts = (slice(0, grid - window), slice(grid - window, grid - shift), slice(grid - shift, grid))
    cnt = 0
    for hs in cuts:
        for ws in cuts:
            label[hs, ws] = cnt
            cnt += 1
    n = grid // window
    lw = label.reshape(n, window, n, window).transpose(0, 2, 1, 3).reshape(n * n, window * window)
    same = lw[:, :, None] == lw[:, None, :]
    return np.where(same, 0.0, MASK_VALUE).astype(DTYPE)[:, None]


def _mbconv(x, grid, ln_g, ln_b, dw, dw_b, pw, pw_b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    n = (x - mu) / np.sqrt(var + DTYPE(1e-5)) * ln_g + ln_b
    lead, d = n.shape[:-2], n.shape[-1]
    y = n.reshape(lead + (grid, grid, d))
    pad = [(0, 0)] * len(lead) + [(1, 1), (1, 1), (0, 0)]
    yp = np.pad(y, pad)
    acc = np.zeros_like(y)
    for i in range(3):
        for j in range(3):
            acc = acc + yp[..., i:i + grid, j:j + grid, :] * dw[i, j]
    h = gelu(acc + dw_b).reshape(lead + (grid * grid, d))
    return (h @ pw + pw_b).astype(DTYPE)


class ViT:
    """A toy transformer with deterministic weights drawn from ``cfg.seed``."""

    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.cfg = cfg.validate()
        self.params = {k: np.asarray(v, dtype=DTYPE) for k, v in (params or init_params(cfg)).items()}
        self.layers = self._layer_plan()

    # --------------------------------------------------------------- structure
    def _layer_plan(self) -> list[dict]:
        """One entry per decomposable layer, in input order."""
        c = self.cfg
        plan = []
        if c.variant in ("vanilla-cls", "vanilla-meanpool"):
            for b in range(c.depth):
                plan.append({"kind": "attn", "block": b, "grid": c.patch_grid, "dim": c.dim})
        elif c.variant == "windowed":
            g, d = c.patch_grid, c.dim
            b = 0
            for s, n in enumerate(self.stage_depths()):
                w = min(c.window, g)
                for i in range(n):
                    shift = w // 2 if (c.shift and i % 2 == 1 and w < g) else 0
                    plan.append({"kind": "attn", "block": b, "grid": g, "dim": d, "window": w,
                                 "shift": shift, "stage": s})
                    b += 1
                g, d = g // 2, d * 2
        else:
            b = 0
            for u in range(c.depth):
                for kind in ("conv", "block", "grid"):
                    plan.append({"kind": "conv" if kind == "conv" else "attn", "attn": kind, "block": b,
                                 "grid": c.patch_grid, "dim": c.dim, "window": c.window})
                    b += 1
        return plan

    def stage_depths(self) -> list[int]:
        c = self.cfg
        base = [c.depth // c.stages] * c.stages
        base[-1] += c.depth - sum(base)
        return base

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def has_cls(self) -> bool:
        return self.cfg.variant == "vanilla-cls"

    @property
    def width(self) -> int:
        return self.layers[-1]["dim"]

    @property
    def model_id(self) -> str:
        return self.cfg.model_id

    # ----------------------------------------------------------------- forward
    def forward(self, images: np.ndarray, tape: Tape | None = None) -> tuple[Tensor, Tape]:
        """Record a forward pass over a batch of images and return (z, tape)."""
        tape = tape or Tape()
        with tape:
            z = self._forward(prepare(images, self.cfg.patch_size))
            tape.mark_output(z)
        return z, tape

    def encode(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [self.forward(images[i:i + batch_size])[0].data for i in range(0, len(images), batch_size)]
        return np.concatenate(out, axis=0)

    def _forward(self, patches: np.ndarray) -> Tensor:
        c, p = self.cfg, self.params
        with scope(component="init", grid=c.patch_grid, cls=self.has_cls, block=-1, layer=self.n_layers):
            x = ops.linear(Tensor(patches), p["embed.W"], p["embed.b"])
            if self.has_cls:
                x = ops.concat_tokens(Tensor(p["cls"][None]), x)
            x = ops.add(x, Tensor(p["pos"]))
        for blk in self.layers:
            b = blk["block"]
            if c.variant == "windowed" and b > 0 and blk["stage"] != self.layers[b - 1]["stage"]:
                x = self._merge(x, blk["stage"], self.layers[b - 1]["grid"])
            mark(x, block_input=b)
            layer = self.n_layers - 1 - b
            with scope(block=b, layer=layer, grid=blk["grid"], cls=self.has_cls):
                if blk["kind"] == "conv":
                    x = self._conv(x, b, blk["grid"])
                else:
                    x = self._attn_mlp(x, b, blk)
        mark(x, block_input=self.n_layers)
        with scope(component="head", block=self.n_layers, layer=-1, grid=self.layers[-1]["grid"], cls=self.has_cls):
            x = ops.layernorm(x, p["norm.g"], p["norm.b"])
            z = ops.select(x, 0) if self.has_cls else ops.mean(x, axis=-2)
        return z

    def _merge(self, x: Tensor, stage: int, grid: int) -> Tensor:
        p = self.params
        with scope(component="merge", stage=stage, grid=grid // 2, cls=False):
            x = ops.patch_merge(x, grid)
            x = ops.layernorm(x, p[f"merge{stage}.g"], p[f"merge{stage}.b"])
            x = ops.linear(x, p[f"merge{stage}.W"])
        return x

    def _conv(self, x: Tensor, b: int, grid: int) -> Tensor:
        p = self.params
        pre = f"blocks.{b}."
        fn = functools.partial(_mbconv, grid=grid, ln_g=p[pre + "ln.g"], ln_b=p[pre + "ln.b"],
                               dw=p[pre + "dw.W"], dw_b=p[pre + "dw.b"], pw=p[pre + "pw.W"], pw_b=p[pre + "pw.b"])
        with scope(component="conv"):
            h = ops.opaque(detach(x), fn, name="mbconv")
        return ops.add(x, h)

    def _attn_mlp(self, x: Tensor, b: int, blk: dict) -> Tensor:
        p = self.params
        pre = f"blocks.{b}."
        partition, mask = None, None
        if self.cfg.variant == "windowed":
            partition = window_partition_index(blk["grid"], blk["window"], blk["shift"])
            if blk["shift"]:
                mask = shifted_window_mask(blk["grid"], blk["window"], blk["shift"])
        elif self.cfg.variant == "gridblock":
            if blk["attn"] == "block":
                partition = window_partition_index(blk["grid"], blk["window"])
            else:
                partition = grid_partition_index(blk["grid"], blk["window"])
        with scope(component="attn"):
            h = ops.layernorm(detach(x), p[pre + "ln1.g"], p[pre + "ln1.b"])
            a = attention(h, p, pre, self.cfg.heads, partition, mask)
        x = ops.add(x, a)
        with scope(component="mlp"):
            h = ops.layernorm(detach(x), p[pre + "ln2.g"], p[pre + "ln2.b"])
            h = ops.gelu(ops.linear(h, p[pre + "fc1.W"], p[pre + "fc1.b"]))
            m = ops.linear(h, p[pre + "fc2.W"], p[pre + "fc2.b"])
        return ops.add(x, m)


def attention(h: Tensor, p: dict, pre: str, heads: int, partition=None, mask=None) -> Tensor:
    q = ops.linear(h, p[pre + "q.W"], p[pre + "q.b"])
    k = ops.linear(h, p[pre + "k.W"], p[pre + "k.b"])
    v = ops.linear(h, p[pre + "v.W"], p[pre + "v.b"])
    d = h.shape[-1]
    token_map = None
    if partition is not None:
        q, k, v = (ops.gather(t, partition) for t in (q, k, v))
        token_map = partition[:, None, :]
    q, k, v = (ops.split_heads(t, heads) for t in (q, k, v))
    s = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(d // heads))
    a = detach(ops.softmax(s, mask))
    o = ops.concat_heads(ops.matmul(a, v, token_map=token_map))
    if partition is not None:
        flat = partition.reshape(-1)
        inverse = np.empty_like(flat)
        inverse[flat] = np.arange(flat.size)
        o = ops.gather(ops.reshape(o, (flat.size, d), 3), inverse)
    return ops.linear(o, p[pre + "o.W"], p[pre + "o.b"])


def init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    P: dict[str, np.ndarray] = {}

    def lin(name, fin, fout, bias=True):
        P[name + ".W"] = rng.normal(0.0, 1.0 / np.sqrt(fin), (fin, fout))
        if bias:
            P[name + ".b"] = rng.normal(0.0, 0.02, fout)

    def ln(name, d):
        P[name + ".g"] = 1.0 + 0.1 * rng.normal(size=d)
        P[name + ".b"] = 0.02 * rng.normal(size=d)

    pd = cfg.patch_size ** 2 * cfg.channels
    lin("embed", pd, cfg.dim)
    n_tok = cfg.patch_grid ** 2
    if cfg.variant == "vanilla-cls":
        P["cls"] = rng.normal(0.0, 0.5, cfg.dim)
        n_tok += 1
    P["pos"] = rng.normal(0.0, 0.5, (n_tok, cfg.dim))
    plan = ViT.__new__(ViT)
    plan.cfg = cfg
    layers = plan._layer_plan()
    for blk in layers:
        pre = f"blocks.{blk['block']}."
        d = blk["dim"]
        if blk["kind"] == "conv":
            ln(pre + "ln", d)
            P[pre + "dw.W"] = rng.normal(0.0, 1.0 / 3.0, (3, 3, d))
            P[pre + "dw.b"] = rng.normal(0.0, 0.02, d)
            lin(pre + "pw", d, d)
            continue
        ln(pre + "ln1", d)
        for n in ("q", "k", "v", "o"):
            lin(pre + n, d, d)
        ln(pre + "ln2", d)
        lin(pre + "fc1", d, d * cfg.mlp_ratio)
        lin(pre + "fc2", d * cfg.mlp_ratio, d)
    if cfg.variant == "windowed":
        d = cfg.dim
        for s in range(1, cfg.stages):
            ln(f"merge{s}", 4 * d)
            lin(f"merge{s}", 4 * d, 2 * d, bias=False)
            d *= 2
    ln("norm", layers[-1]["dim"])
    return {k: v.astype(DTYPE) for k, v in P.items()}


def build_model(cfg: ModelConfig) -> ViT:
    return ViT(cfg)
