"""Tape-free training for the vanilla variants.

A batched float32 forward pass caches what the hand-written backward pass
needs; gradients are exact (checked against finite differences in the tests).
Classification heads live in ``head.<task>.W`` / ``head.<task>.b``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..graph import DTYPE, gelu
from ..optim import Adam
from .config import ModelConfig
from .vit import ViT, prepare

_C = np.sqrt(2.0 / np.pi)


class TrainingError(RuntimeError):
    pass


@dataclass
class Hyper:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0
    seed: int = 0
    min_lr_frac: float = 0.1


@dataclass
class TrainResult:
    model: ViT
    heads: dict[str, np.ndarray]
    history: list[dict] = field(default_factory=list)
    val_accuracy: dict[str, float] = field(default_factory=dict)


def _check_trainable(cfg: ModelConfig) -> None:
    if cfg.variant not in ("vanilla-cls", "vanilla-meanpool"):
        raise TrainingError(f"training is only implemented for the vanilla variants, not {cfg.variant!r}")


# ------------------------------------------------------------------ pieces


def _ln_fwd(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    sig = np.sqrt(var + DTYPE(eps))
    xh = (x - mu) / sig
    return xh * g + b, (xh, sig, g)


def _ln_bwd(dy, cache):
    xh, sig, g = cache
    dxh = dy * g
    dx = (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True)) / sig
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * xh).sum(red), dy.sum(red)


def _gelu_grad(u):
    t = np.tanh(_C * (u + 0.044715 * u ** 3))
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _C * (1.0 + 3 * 0.044715 * u * u)


def _sum_lead(a):
    return a.reshape(-1, a.shape[-1]).sum(0)


def forward(params: dict, cfg: ModelConfig, images: np.ndarray, cache: bool = False):
    """Batched forward returning z (and the cache for :func:`backward`)."""
    _check_trainable(cfg)
    P = params
    H = cfg.heads
    x0 = prepare(images, cfg.patch_size)
    B = x0.shape[0]
    x = x0 @ P["embed.W"] + P["embed.b"]
    if cfg.variant == "vanilla-cls":
        x = np.concatenate([np.broadcast_to(P["cls"], (B, 1, cfg.dim)), x], axis=1)
    x = x + P["pos"]
    N, d = x.shape[1], x.shape[2]
    dh = d // H
    blocks = []
    for b in range(cfg.depth):
        pre = f"blocks.{b}."
        h1, c1 = _ln_fwd(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
        q = (h1 @ P[pre + "q.W"] + P[pre + "q.b"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        k = (h1 @ P[pre + "k.W"] + P[pre + "k.b"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        v = (h1 @ P[pre + "v.W"] + P[pre + "v.b"]).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        s = q @ k.transpose(0, 1, 3, 2) * DTYPE(1.0 / np.sqrt(dh))
        s = s - s.max(-1, keepdims=True)
        e = np.exp(s)
        A = e / e.sum(-1, keepdims=True)
        o = (A @ v).transpose(0, 2, 1, 3).reshape(B, N, d)
        x = x + o @ P[pre + "o.W"] + P[pre + "o.b"]
        h2, c2 = _ln_fwd(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
        u = h2 @ P[pre + "fc1.W"] + P[pre + "fc1.b"]
        gu = gelu(u)
        x = x + gu @ P[pre + "fc2.W"] + P[pre + "fc2.b"]
        if cache:
            blocks.append((h1, c1, q, k, v, A, o, h2, c2, u, gu))
    hn, cn = _ln_fwd(x, P["norm.g"], P["norm.b"])
    z = hn[:, 0] if cfg.variant == "vanilla-cls" else hn.mean(1)
    if not cache:
        return z
    return z, {"x0": x0, "blocks": blocks, "cn": cn, "N": N}


def backward(params: dict, cfg: ModelConfig, cache: dict, dz: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of ``sum(dz * z)`` with respect to every encoder parameter."""
    P, H = params, cfg.heads
    G: dict[str, np.ndarray] = {}
    N = cache["N"]
    B, d = dz.shape
    dh = d // H
    if cfg.variant == "vanilla-cls":
        dhn = np.zeros((B, N, d), dtype=dz.dtype)
        dhn[:, 0] = dz
    else:
        dhn = np.broadcast_to(dz[:, None] / N, (B, N, d))
    dx, G["norm.g"], G["norm.b"] = _ln_bwd(dhn, cache["cn"])
    for b in reversed(range(cfg.depth)):
        pre = f"blocks.{b}."
        h1, c1, q, k, v, A, o, h2, c2, u, gu = cache["blocks"][b]
        G[pre + "fc2.W"] = gu.reshape(-1, gu.shape[-1]).T @ dx.reshape(-1, d)
        G[pre + "fc2.b"] = _sum_lead(dx)
        du = (dx @ P[pre + "fc2.W"].T) * _gelu_grad(u)
        G[pre + "fc1.W"] = h2.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        G[pre + "fc1.b"] = _sum_lead(du)
        dh2 = du @ P[pre + "fc1.W"].T
        dxl, G[pre + "ln2.g"], G[pre + "ln2.b"] = _ln_bwd(dh2, c2)
        dx = dx + dxl
        G[pre + "o.W"] = o.reshape(-1, d).T @ dx.reshape(-1, d)
        G[pre + "o.b"] = _sum_lead(dx)
        do = (dx @ P[pre + "o.W"].T).reshape(B, N, H, dh).transpose(0, 2, 1, 3)
        dA = do @ v.transpose(0, 1, 3, 2)
        dv = A.transpose(0, 1, 3, 2) @ do
        ds = A * (dA - (dA * A).sum(-1, keepdims=True)) * DTYPE(1.0 / np.sqrt(dh))
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dh1 = np.zeros_like(h1)
        for name, g in (("q", dq), ("k", dk), ("v", dv)):
            g2 = g.transpose(0, 2, 1, 3).reshape(B, N, d)
            G[pre + name + ".W"] = h1.reshape(-1, d).T @ g2.reshape(-1, d)
            G[pre + name + ".b"] = _sum_lead(g2)
            dh1 = dh1 + g2 @ P[pre + name + ".W"].T
        dxl, G[pre + "ln1.g"], G[pre + "ln1.b"] = _ln_bwd(dh1, c1)
        dx = dx + dxl
    G["pos"] = dx.sum(0)
    if cfg.variant == "vanilla-cls":
        G["cls"] = dx[:, 0].sum(0)
        dx = dx[:, 1:]
    x0 = cache["x0"]
    G["embed.W"] = x0.reshape(-1, x0.shape[-1]).T @ dx.reshape(-1, d)
    G["embed.b"] = _sum_lead(dx)
    return {k: np.asarray(v, dtype=params[k].dtype) for k, v in G.items()}


def softmax_xent(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    s = logits - logits.max(-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(-1, keepdims=True)
    n = len(y)
    loss = float(-np.log(p[np.arange(n), y] + 1e-12).mean())
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    return loss, (g / n).astype(DTYPE)


def init_heads(tasks: dict[str, int], d: int, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed + 7919)
    out = {}
    for name in sorted(tasks):
        out[f"head.{name}.W"] = (rng.normal(0, 1 / np.sqrt(d), (d, tasks[name]))).astype(DTYPE)
        out[f"head.{name}.b"] = np.zeros(tasks[name], dtype=DTYPE)
    return out


def predict(heads: dict[str, np.ndarray], z: np.ndarray, task: str) -> np.ndarray:
    return (z @ heads[f"head.{task}.W"] + heads[f"head.{task}.b"]).argmax(-1)


def train_toy(model: ViT, images: np.ndarray, targets: dict[str, np.ndarray], hyper: Hyper | None = None,
              val: tuple[np.ndarray, dict[str, np.ndarray]] | None = None,
              freeze_encoder: bool = False, n_classes: dict[str, int] | None = None) -> TrainResult:
    """Train encoder plus one linear head per task with summed cross-entropy.

    The model's parameters are updated in place. Raises :class:`TrainingError`
    if the loss becomes non-finite.
    """
    cfg = model.cfg
    _check_trainable(cfg)
    hyper = hyper or Hyper()
    n_classes = n_classes or {t: int(np.max(y)) + 1 for t, y in targets.items()}
    heads = init_heads(n_classes, model.width, hyper.seed)
    params = {} if freeze_encoder else model.params
    opt = Adam({**params, **heads}, lr=hyper.lr, weight_decay=hyper.weight_decay)
    rng = np.random.default_rng(hyper.seed)
    n = len(images)
    steps_per_epoch = max(1, int(np.ceil(n / hyper.batch_size)))
    total = hyper.epochs * steps_per_epoch
    history = []
    zfixed = forward(model.params, cfg, images) if freeze_encoder else None
    step = 0
    for ep in range(hyper.epochs):
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, hyper.batch_size):
            idx = perm[i:i + hyper.batch_size]
            frac = step / max(total - 1, 1)
            opt.lr = hyper.lr * (hyper.min_lr_frac + (1 - hyper.min_lr_frac) * 0.5 * (1 + np.cos(np.pi * frac)))
            if freeze_encoder:
                z, cache = zfixed[idx], None
            else:
                z, cache = forward(model.params, cfg, images[idx], cache=True)
            dz = np.zeros_like(z)
            grads = {}
            loss = 0.0
            for t, y in targets.items():
                W, bb = heads[f"head.{t}.W"], heads[f"head.{t}.b"]
                li, dl = softmax_xent(z @ W + bb, y[idx])
                loss += li
                grads[f"head.{t}.W"] = z.T @ dl
                grads[f"head.{t}.b"] = dl.sum(0)
                dz += dl @ W.T
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {ep} step {step} (lr {opt.lr:.2e})")
            if cache is not None:
                grads.update(backward(model.params, cfg, cache, dz))
            opt.step(grads)
            losses.append(loss)
            step += 1
        rec = {"epoch": ep, "loss": float(np.mean(losses))}
        if val is not None:
            zv = forward(model.params, cfg, val[0])
            for t, y in val[1].items():
                rec[f"val_acc.{t}"] = float((predict(heads, zv, t) == y).mean())
        history.append(rec)
    res = TrainResult(model, heads, history)
    if val is not None:
        res.val_accuracy = {k[8:]: v for k, v in history[-1].items() if k.startswith("val_acc.")}
    return res


def fit_probe(z: np.ndarray, y: np.ndarray, n_classes: int | None = None, epochs: int = 200, lr: float = 0.05,
              seed: int = 0, l2: float = 1e-4) -> dict[str, np.ndarray]:
    """Full-batch multinomial logistic regression on frozen features; returns a head dict for task 'y'."""
    n_classes = n_classes or int(y.max()) + 1
    heads = init_heads({"y": n_classes}, z.shape[1], seed)
    opt = Adam(heads, lr=lr)
    z = z.astype(DTYPE)
    for _ in range(epochs):
        _, dl = softmax_xent(z @ heads["head.y.W"] + heads["head.y.b"], y)
        opt.step({"head.y.W": z.T @ dl + l2 * heads["head.y.W"], "head.y.b": dl.sum(0)})
    return heads
