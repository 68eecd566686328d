"""Component-feature scores, orderings and score-gap selection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

DEGENERATE_STD = 1e-12


class AttributionError(ValueError):
    pass


@dataclass
class Feature:
    """A feature and its instantiation embeddings (rows of ``B``, width d_ref)."""

    name: str
    labels: tuple[str, ...]
    B: np.ndarray

    def __post_init__(self):
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        if len(self.B) < 1:
            raise AttributionError(f"feature {self.name!r} has no instantiations")
        if len(self.labels) != len(self.B):
            raise AttributionError(f"feature {self.name!r}: {len(self.labels)} labels for {len(self.B)} rows")
        if np.any(np.linalg.norm(self.B, axis=1) == 0):
            raise AttributionError(f"feature {self.name!r} has a zero embedding")


def orthogonalize(B: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Gram-Schmidt over the rows of ``B`` in order, dropping rows whose residual norm is below ``tol``."""
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    basis: list[np.ndarray] = []
    for row in B:
        r = row.copy()
        for _ in range(2):
            for q in basis:
                r -= (q @ r) * q
        n = np.linalg.norm(r)
        if n >= tol:
            basis.append(r / n)
    if not basis:
        raise AttributionError("every feature embedding is degenerate")
    return np.stack(basis)


def pearson_columns(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson r between matching columns of X and Y; zero-variance columns give 0 and a True flag."""
    Xc = X - X.mean(0)
    Yc = Y - Y.mean(0)
    sx = np.sqrt((Xc ** 2).sum(0))
    sy = np.sqrt((Yc ** 2).sum(0))
    scale = np.sqrt(len(X)) * DEGENERATE_STD
    deg = (sx <= scale * np.maximum(1.0, np.abs(X).max(0))) | (sy <= scale * np.maximum(1.0, np.abs(Y).max(0)))
    r = np.where(deg, 0.0, (Xc * Yc).sum(0) / np.where(deg, 1.0, sx * sy))
    return np.clip(r, -1.0, 1.0), deg


def comp_attribute(C: np.ndarray, Z: np.ndarray, B: np.ndarray, return_flags: bool = False):
    """Mean over the orthonormalised feature directions of corr(C b, Z b) across images."""
    C = np.asarray(C, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    if C.shape != Z.shape:
        raise AttributionError(f"C {C.shape} and Z {Z.shape} differ in shape")
    if len(C) < 3:
        raise AttributionError("need at least 3 images to correlate")
    Bo = orthogonalize(B)
    r, deg = pearson_columns(C @ Bo.T, Z @ Bo.T)
    score = float(r.mean())
    if return_flags:
        return score, bool(deg.all()), int(deg.sum())
    return score


@dataclass
class ScoreMatrix:
    scores: np.ndarray  # (n_components, n_features)
    components: list[str]
    features: list[str]
    degenerate: np.ndarray
    provenance: dict = field(default_factory=dict)

    def column(self, feature: str) -> np.ndarray:
        return self.scores[:, self._f(feature)]

    def _f(self, feature: str | int) -> int:
        if isinstance(feature, (int, np.integer)):
            return int(feature)
        try:
            return self.features.index(feature)
        except ValueError:
            raise AttributionError(f"unknown feature {feature!r}; have {self.features}") from None

    def _c(self, comp: str | int) -> int:
        if isinstance(comp, (int, np.integer)):
            return int(comp)
        try:
            return self.components.index(comp)
        except ValueError:
            raise AttributionError(f"unknown component {comp!r}") from None

    def to_json(self) -> str:
        return json.dumps({
            "format": "vitdecomp-scores/1",
            "components": self.components,
            "features": self.features,
            "shape": list(self.scores.shape),
            "scores": [float(np.float32(v)) for v in self.scores.ravel()],
            "degenerate": [bool(v) for v in self.degenerate.ravel()],
            "provenance": self.provenance,
        }, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ScoreMatrix":
        d = json.loads(text)
        shape = tuple(d["shape"])
        return cls(np.asarray(d["scores"], dtype=np.float64).reshape(shape), list(d["components"]),
                   list(d["features"]), np.asarray(d["degenerate"], dtype=bool).reshape(shape), d["provenance"])


def score_matrix(aligned: np.ndarray, features: list[Feature], components: list[str] | None = None,
                 provenance: dict | None = None) -> ScoreMatrix:
    """Score every (component, feature) pair from aligned contributions of shape (n, N, d_ref)."""
    aligned = np.asarray(aligned, dtype=np.float64)
    if aligned.ndim != 3:
        raise AttributionError("aligned contributions must have shape (n_images, n_components, d_ref)")
    n, N, _ = aligned.shape
    components = components or [f"c{i}" for i in range(N)]
    if len(components) != N:
        raise AttributionError(f"{len(components)} component names for {N} components")
    Z = aligned.sum(1)
    S = np.zeros((N, len(features)))
    deg = np.zeros((N, len(features)), dtype=bool)
    for p, feat in enumerate(features):
        for i in range(N):
            S[i, p], deg[i, p], _ = comp_attribute(aligned[:, i], Z, feat.B, return_flags=True)
    prov = {"n_images": n, **(provenance or {})}
    return ScoreMatrix(S, list(components), [f.name for f in features], deg, prov)


def score_decomposition(dec, aligner, features: list[Feature], provenance: dict | None = None) -> ScoreMatrix:
    names = [str(k) for k in dec.keys]
    if names != list(aligner.components):
        raise AttributionError("aligner and decomposition component tables differ")
    prov = {"model_id": dec.model_id, **(provenance or {})}
    return score_matrix(aligner.transform(dec.vectors), features, names, prov)


def _order(values: np.ndarray) -> list[int]:
    return [int(i) for i in np.argsort(-np.asarray(values, dtype=np.float64), kind="stable")]


def component_ordering(S: ScoreMatrix, feature: str | int) -> list[int]:
    """Components by descending score; ties keep ascending index."""
    return _order(S.scores[:, S._f(feature)])


def feature_ordering(S: ScoreMatrix, component: str | int) -> list[int]:
    return _order(S.scores[S._c(component)])


def score_gaps(S: ScoreMatrix, feature: str | int, against: list[str | int] | None = None) -> np.ndarray:
    """min over other features p' of s[i, p] - s[i, p']."""
    p = S._f(feature)
    others = [S._f(q) for q in against] if against else [q for q in range(len(S.features)) if q != p]
    others = [q for q in others if q != p]
    if not others:
        raise AttributionError("score-gap selection needs at least two features")
    return (S.scores[:, [p]] - S.scores[:, others]).min(1)


def select_by_gap(S: ScoreMatrix, feature: str | int, k: int, against: list[str | int] | None = None) -> list[int]:
    """Top-k components by score gap for ``feature``."""
    if not 0 <= k <= len(S.components):
        raise AttributionError(f"k={k} exceeds the {len(S.components)} components")
    return _order(score_gaps(S, feature, against))[:k]


def spearman(a, b) -> float:
    """Rank correlation of two equal-length score (or rank) vectors, ties get average ranks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise AttributionError("spearman needs two 1-d sequences of equal length")
    if len(a) < 2:
        raise AttributionError("spearman needs at least two items")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = np.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    return float((ra * rb).sum() / den) if den > 0 else 0.0


def ordering_to_ranks(order: list[int]) -> np.ndarray:
    """Positions (0 = first) per item from an ordering."""
    r = np.empty(len(order))
    r[np.asarray(order)] = np.arange(len(order))
    return r


def _cos_rows(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    nx = np.linalg.norm(X, axis=-1)
    return (X @ y) / np.where(nx > 0, nx, 1.0) / np.linalg.norm(y)


def cosine_proxy(aligned: np.ndarray, zref: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per component: mean over instantiations of corr_images(cos(f_i c_i, y), cos(z_ref, y))."""
    aligned = np.asarray(aligned, dtype=np.float64)
    zref = np.asarray(zref, dtype=np.float64)
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    out = np.zeros(aligned.shape[1])
    for i in range(aligned.shape[1]):
        sims = np.stack([_cos_rows(aligned[:, i], y) for y in B], 1)
        ref = np.stack([_cos_rows(zref, y) for y in B], 1)
        out[i] = pearson_columns(sims, ref)[0].mean()
    return out


# --------------------------------------------------------- planted world


def planted_synthetic(n: int = 600, n_components: int = 10, d_ref: int = 32,
                      feature_sizes: tuple[int, ...] = (2, 3, 4), noise: float = 1.0, seed: int = 0):
    """Aligned contributions where each feature has one strongest ("planted") component.

    Returns (aligned (n, N, d_ref), features, strengths (N, P), planted (P,)).
    Instantiation embeddings of different features are mutually orthogonal.
    """
    rng = np.random.default_rng(seed)
    total = sum(feature_sizes)
    if total > d_ref:
        raise AttributionError("feature directions do not fit in d_ref")
    Q, _ = np.linalg.qr(rng.normal(size=(d_ref, d_ref)))
    dirs = Q[:, :total].T
    features, start = [], 0
    labels = []
    for p, k in enumerate(feature_sizes):
        features.append(Feature(f"feature{p}", tuple(f"v{j}" for j in range(k)), dirs[start:start + k]))
        labels.append(rng.integers(0, k, n))
        start += k
    planted = rng.permutation(n_components)[:len(feature_sizes)]
    strengths = rng.uniform(0.0, 0.6, (n_components, len(feature_sizes)))
    for p, i in enumerate(planted):
        strengths[i, p] = 1.0
    offsets = rng.normal(size=(n_components, d_ref))
    aligned = np.zeros((n, n_components, d_ref))
    for i in range(n_components):
        aligned[:, i] = offsets[i] + noise * rng.normal(size=(n, d_ref)) / np.sqrt(d_ref) * 2.0
        for p, f in enumerate(features):
            aligned[:, i] += strengths[i, p] * f.B[labels[p]]
    return aligned, features, strengths, planted
