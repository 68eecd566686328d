"""Per-component linear maps into a reference space.

Each component contribution ``c_i`` (width d) is sent through its own map
``f_i`` (d_ref x d). Training minimises

    mean_b (1 - cos(sum_i f_i c_{b,i}, z_ref_b)) + lam * sum_i ||f_i^T f_i - I||_F

with Adam. Everything is computed in float64 and stored as float32.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .optim import Adam

EPS_NORM = 1e-8


class AlignError(RuntimeError):
    def __init__(self, msg: str, checkpoint: "Aligner | None" = None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class AlignTrainConfig:
    lr: float = 3e-4
    lam: float | None = None
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    tie: bool = False
    use_penalty: bool = True

    def validate(self) -> "AlignTrainConfig":
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.lam is not None and self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        return self

    def resolved_lam(self, d_ref: int) -> float:
        if not self.use_penalty:
            return 0.0
        return 1.0 / d_ref if self.lam is None else float(self.lam)


@dataclass
class Aligner:
    maps: np.ndarray  # (N, d_ref, d)
    components: list[str]
    lam: float
    seed: int = 0
    tied: bool = False
    log: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.maps.shape[2]

    @property
    def d_ref(self) -> int:
        return self.maps.shape[1]

    def transform(self, contribs: np.ndarray) -> np.ndarray:
        """(n, N, d) -> (n, N, d_ref) mapped contributions."""
        _check_table(self, contribs)
        return np.einsum("nid,ied->nie", contribs.astype(np.float64), self.maps.astype(np.float64))

    def represent(self, contribs: np.ndarray) -> np.ndarray:
        return self.transform(contribs).sum(1)

    def to_header(self) -> dict:
        return {"components": list(self.components), "d": self.d, "d_ref": self.d_ref, "lam": self.lam,
                "seed": self.seed, "tied": self.tied, "log": self.log}


def _check_table(al: Aligner, contribs: np.ndarray) -> None:
    if contribs.ndim != 3 or contribs.shape[1] != len(al.components) or contribs.shape[2] != al.d:
        raise AlignError(f"contributions of shape {contribs.shape} do not match an aligner with "
                         f"{len(al.components)} components of width {al.d}")


# -------------------------------------------------------------------- loss


def penalty(maps: np.ndarray) -> float:
    m = np.einsum("ied,ief->idf", maps, maps) - np.eye(maps.shape[2])
    return float(np.sqrt((m ** 2).sum(axis=(1, 2))).sum())


def penalty_grad(maps: np.ndarray) -> np.ndarray:
    """d/df_i of ||f_i^T f_i - I||_F is 2 f_i M_i / ||M_i||_F, taken as 0 where M_i = 0."""
    m = np.einsum("ied,ief->idf", maps, maps) - np.eye(maps.shape[2])
    nrm = np.sqrt((m ** 2).sum(axis=(1, 2)))
    safe = np.where(nrm > 0, nrm, 1.0)
    g = 2.0 * np.einsum("ied,idf->ief", maps, m) / safe[:, None, None]
    g[nrm == 0] = 0.0
    return g


def cosine_terms(maps: np.ndarray, contribs: np.ndarray, zref: np.ndarray):
    """Per-sample cosine distance, its gradient w.r.t. the prediction, and the valid mask."""
    y = np.einsum("nid,ied->ne", contribs, maps)
    ny = np.linalg.norm(y, axis=1)
    nr = np.linalg.norm(zref, axis=1)
    ok = (ny >= EPS_NORM) & (nr >= EPS_NORM)
    sy, sr = np.where(ok, ny, 1.0), np.where(ok, nr, 1.0)
    cos = (y * zref).sum(1) / (sy * sr)
    dist = np.where(ok, 1.0 - cos, 0.0)
    gy = -(zref / (sy * sr)[:, None] - cos[:, None] * y / (sy ** 2)[:, None])
    gy[~ok] = 0.0
    return dist, gy, ok


def align_loss(maps: np.ndarray, contribs: np.ndarray, zref: np.ndarray, lam: float,
               with_grad: bool = False):
    """Loss (and gradient w.r.t. ``maps``). Degenerate samples are skipped and counted."""
    maps = np.asarray(maps, dtype=np.float64)
    contribs = np.asarray(contribs, dtype=np.float64)
    zref = np.asarray(zref, dtype=np.float64)
    dist, gy, ok = cosine_terms(maps, contribs, zref)
    n_ok = int(ok.sum())
    skipped = len(ok) - n_ok
    cos_term = float(dist.sum() / n_ok) if n_ok else 0.0
    loss = cos_term + (lam * penalty(maps) if lam else 0.0)
    if not with_grad:
        return loss, {"cosine": cos_term, "skipped": skipped}
    g = np.einsum("ne,nid->ied", gy, contribs) / max(n_ok, 1)
    if lam:
        g = g + lam * penalty_grad(maps)
    return loss, g, {"cosine": cos_term, "skipped": skipped}


def tied_grad(g: np.ndarray) -> np.ndarray:
    return np.broadcast_to(g.sum(0, keepdims=True), g.shape).copy()


# ---------------------------------------------------------------- training


def orthogonal_init(n: int, d_ref: int, d: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, d_ref, d))
    for i in range(n):
        a = rng.normal(size=(max(d_ref, d), max(d_ref, d)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        out[i] = q[:d_ref, :d]
    return out


def _as_arrays(contribs, components):
    from .decompose import Decomposition

    if isinstance(contribs, Decomposition):
        if contribs.granularity != "component":
            raise AlignError("alignment needs a component-granularity decomposition")
        return contribs.vectors, [str(k) for k in contribs.keys]
    contribs = np.asarray(contribs)
    if contribs.ndim != 3:
        raise AlignError("contributions must have shape (n_images, n_components, d)")
    return contribs, list(components or [f"c{i}" for i in range(contribs.shape[1])])


def train_compalign(contribs, zref: np.ndarray, cfg: AlignTrainConfig | None = None,
                    components: list[str] | None = None) -> Aligner:
    """Fit one map per component (or one shared map when ``cfg.tie``)."""
    cfg = (cfg or AlignTrainConfig()).validate()
    C, names = _as_arrays(contribs, components)
    C = C.astype(np.float64)
    Z = np.asarray(zref, dtype=np.float64)
    if len(C) != len(Z):
        raise AlignError(f"{len(C)} decompositions but {len(Z)} reference vectors")
    n, N, d = C.shape
    d_ref = Z.shape[1]
    lam = cfg.resolved_lam(d_ref)
    rng = np.random.default_rng(cfg.seed)
    maps = orthogonal_init(1 if cfg.tie else N, d_ref, d, rng)
    if cfg.tie:
        maps = np.repeat(maps, N, axis=0)
    params = {"maps": maps}
    opt = Adam(params, lr=cfg.lr)
    curve, last_good = [], maps.copy()
    skipped = 0
    for ep in range(cfg.epochs):
        perm = rng.permutation(n)
        tot, cnt = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            loss, g, info = align_loss(params["maps"], C[idx], Z[idx], lam, with_grad=True)
            if not np.isfinite(loss) or not np.all(np.isfinite(g)):
                al = Aligner(last_good.astype(np.float32), names, lam, cfg.seed, cfg.tie,
                             {"loss_curve": curve, "aborted_epoch": ep})
                raise AlignError(f"non-finite loss at epoch {ep}; last good maps attached as .checkpoint", al)
            if cfg.tie:
                g = tied_grad(g)
            opt.step({"maps": g})
            skipped += info["skipped"]
            tot += loss * len(idx)
            cnt += len(idx)
        last_good = params["maps"].copy()
        curve.append(tot / max(cnt, 1))
    maps = params["maps"]
    final, info = align_loss(maps, C, Z, lam)
    al = Aligner(maps.astype(np.float32), names, lam, cfg.seed, cfg.tie)
    al.log = {"loss_curve": curve, "final_loss": final, "cosine_distance": info["cosine"],
              "skipped": skipped, "config": asdict(cfg),
              "orthogonality": [r["deviation"] for r in orthogonality_report(al)]}
    return al


def single_map_baseline(contribs, zref: np.ndarray, cfg: AlignTrainConfig | None = None,
                        components: list[str] | None = None) -> Aligner:
    """One shared map for every component."""
    cfg = cfg or AlignTrainConfig()
    return train_compalign(contribs, zref, AlignTrainConfig(**{**asdict(cfg), "tie": True}), components)


def cosine_distance(al: Aligner, contribs, zref: np.ndarray) -> float:
    C, _ = _as_arrays(contribs, al.components)
    _check_table(al, C)
    dist, _, ok = cosine_terms(al.maps.astype(np.float64), C.astype(np.float64), np.asarray(zref, np.float64))
    return float(dist[ok].mean()) if ok.any() else float("nan")


# --------------------------------------------------------- map properties


def orthogonality_report(al_or_maps) -> list[dict]:
    """Per map: ||f^T f - I||_F, best scalar k = trace(f^T f)/d, and the relative deviation from kI."""
    maps = al_or_maps.maps if isinstance(al_or_maps, Aligner) else np.asarray(al_or_maps)
    if maps.ndim == 2:
        maps = maps[None]
    names = al_or_maps.components if isinstance(al_or_maps, Aligner) else [f"f{i}" for i in range(len(maps))]
    out = []
    for name, f in zip(names, maps.astype(np.float64)):
        g = f.T @ f
        d = g.shape[0]
        k = float(np.trace(g) / d)
        eye = np.eye(d)
        dev_k = float(np.linalg.norm(g - k * eye))
        out.append({"component": name, "deviation": float(np.linalg.norm(g - eye)), "k": k,
                    "relative_k_deviation": dev_k / (abs(k) * np.sqrt(d)) if k else float("inf")})
    return out


def check_rank_ordering(f: np.ndarray, trials: int = 10_000, tol: float = 1e-6, g: np.ndarray | None = None,
                        seed: int = 0) -> int:
    """Count pairs with ||u|| <= ||v|| but ||f u|| > ||g v|| + tol (g defaults to f)."""
    if trials < 1:
        raise ValueError("trials must be positive")
    f = np.asarray(f, dtype=np.float64)
    g = f if g is None else np.asarray(g, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d = f.shape[1]
    u = rng.normal(size=(trials, d)) * rng.uniform(0.1, 2.0, (trials, 1))
    v = rng.normal(size=(trials, d)) * rng.uniform(0.1, 2.0, (trials, 1))
    nu, nv = np.linalg.norm(u, axis=1), np.linalg.norm(v, axis=1)
    swap = nu > nv
    u[swap], v[swap] = v[swap].copy(), u[swap].copy()
    fu = np.linalg.norm(u @ f.T, axis=1)
    gv = np.linalg.norm(v @ g.T, axis=1)
    return int((fu > gv + tol).sum())


def pair_violates(f: np.ndarray, u: np.ndarray, v: np.ndarray, tol: float = 1e-6) -> bool:
    u, v = np.asarray(u, float), np.asarray(v, float)
    return bool(np.linalg.norm(u) <= np.linalg.norm(v) and np.linalg.norm(f @ u) > np.linalg.norm(f @ v) + tol)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    return orthogonal_init(1, d, d, rng)[0]


# ---------------------------------------------------------- synthetic task


def hidden_orthogonal_task(n: int = 2000, n_components: int = 8, d: int = 32, d_ref: int = 32,
                           noise: float = 0.1, seed: int = 0, n_test: int = 1000):
    """Contributions with a shared latent, mapped by hidden orthogonal matrices plus noise.

    Returns (C_train, Z_train, C_test, Z_test, R) where ``Z = sum_i R_i c_i + noise``.
    The noise is scaled relative to the noiseless target norm.
    """
    rng = np.random.default_rng(seed)
    R = np.stack([random_orthogonal(max(d, d_ref), rng)[:d_ref, :d] for _ in range(n_components)])
    scales = rng.uniform(0.5, 1.5, n_components)
    mix = rng.normal(size=(n_components, d, d)) / np.sqrt(d)

    def sample(m):
        latent = rng.normal(size=(m, d))
        own = rng.normal(size=(m, n_components, d))
        c = 0.6 * np.einsum("md,ide->mie", latent, mix) + 0.8 * own
        c = c * scales[None, :, None]
        z = np.einsum("mid,ied->me", c, R)
        eps = rng.normal(size=z.shape) * np.linalg.norm(z, axis=1, keepdims=True) / np.sqrt(d_ref) * noise
        return c.astype(np.float32), (z + eps).astype(np.float32)

    C, Z = sample(n)
    Ct, Zt = sample(n_test)
    return C, Z, Ct, Zt, R
