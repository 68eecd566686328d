"""Retrieval, token heatmaps, mean ablation and spurious-feature mitigation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attribution import ScoreMatrix, component_ordering, select_by_gap
from .decompose import COMPONENT_TOKEN, ComponentId, Decomposition, reduce_decomposition

EPS_NORM = 1e-8


class ApplicationError(ValueError):
    pass


# ---------------------------------------------------------------- retrieval


@dataclass
class RetrievalResult:
    query: dict
    ids: np.ndarray
    scores: np.ndarray
    components: list[str]
    excluded: list[int] = field(default_factory=list)
    informative: bool = True

    def top(self, k: int) -> np.ndarray:
        return self.ids[:k]


def _rank(sim: np.ndarray, valid: np.ndarray, top: int | None) -> tuple[np.ndarray, np.ndarray]:
    ids = np.flatnonzero(valid)
    order = ids[np.argsort(-sim[ids], kind="stable")]
    if top is not None:
        order = order[:top]
    return order, sim[order]


def _cos_to(X: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    nx = np.linalg.norm(X, axis=1)
    valid = nx >= EPS_NORM
    sim = np.where(valid, X @ u / np.where(valid, nx, 1.0) / np.linalg.norm(u), 0.0)
    return sim, valid


def retrieve_text(aligned: np.ndarray, u: np.ndarray, components: list[int], top_images: int | None = 10,
                  names: list[str] | None = None) -> RetrievalResult:
    """Rank images by cos(sum_{i in components} f_i(c_i), u).

    ``aligned`` is (n, N, d_ref). Images whose partial sum has zero norm are
    excluded and reported.
    """
    aligned = np.asarray(aligned, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if not np.linalg.norm(u) > 0:
        raise ApplicationError("query vector has zero norm")
    part = aligned[:, list(components)].sum(1)
    sim, valid = _cos_to(part, u)
    ids, sc = _rank(sim, valid, top_images)
    names = names or [str(i) for i in range(aligned.shape[1])]
    informative = bool(np.abs(sim[valid]).max() > 1e-6) if valid.any() else False
    return RetrievalResult({"type": "text"}, ids, sc, [names[i] for i in components],
                           [int(i) for i in np.flatnonzero(~valid)], informative)


def retrieve_text_by_score(aligned: np.ndarray, S: ScoreMatrix, feature: str, u: np.ndarray, k_components: int,
                           top_images: int | None = 10) -> RetrievalResult:
    comps = component_ordering(S, feature)[:k_components]
    res = retrieve_text(aligned, u, comps, top_images, S.components)
    res.query.update({"feature": feature, "k_components": k_components})
    return res


def retrieve_image(contribs: np.ndarray, components: list[int], reference: int, top_images: int | None = 10,
                   names: list[str] | None = None, include_reference: bool = False) -> RetrievalResult:
    """Rank images by cos(z_p', z_p) with z_p the sum of the chosen model-space contributions."""
    contribs = np.asarray(contribs, dtype=np.float64)
    if not components:
        raise ApplicationError("component set is empty")
    if not 0 <= reference < len(contribs):
        raise ApplicationError(f"reference image {reference} out of range")
    zp = contribs[:, list(components)].sum(1)
    if np.linalg.norm(zp[reference]) < EPS_NORM:
        raise ApplicationError("reference image has a zero partial representation")
    sim, valid = _cos_to(zp, zp[reference])
    if not include_reference:
        valid = valid.copy()
        valid[reference] = False
    ids, sc = _rank(sim, valid, top_images)
    names = names or [str(i) for i in range(contribs.shape[1])]
    return RetrievalResult({"type": "image", "reference": int(reference)}, ids, sc,
                           [names[i] for i in components], [int(i) for i in np.flatnonzero(~valid) if i != reference])


def retrieve_image_by_gap(contribs: np.ndarray, S: ScoreMatrix, feature: str, k: int, reference: int,
                          top_images: int | None = 10, against=None) -> RetrievalResult:
    if not 1 <= k <= len(S.components):
        raise ApplicationError(f"k={k} must lie in [1, {len(S.components)}]")
    comps = select_by_gap(S, feature, k, against)
    res = retrieve_image(contribs, comps, reference, top_images, S.components)
    res.query.update({"feature": feature, "k": k})
    return res


def label_precision(ids: np.ndarray, labels: np.ndarray, target: int) -> float:
    return float((labels[ids] == target).mean()) if len(ids) else 0.0


# ----------------------------------------------------------------- heatmaps


@dataclass
class HeatmapImage:
    grid: np.ndarray  # (n, G, G)
    cls: np.ndarray  # (n,) score of the CLS token, zero when absent
    totals: np.ndarray  # (n,) sum_i u^T f_i(c_i) over the chosen components
    components: list[str]

    @property
    def bounds(self) -> np.ndarray:
        """Symmetric colour limits per image (max |cell|)."""
        return np.abs(self.grid).reshape(len(self.grid), -1).max(1)

    def token_sum(self) -> np.ndarray:
        return self.grid.reshape(len(self.grid), -1).sum(1) + self.cls


def token_heatmap(dec: Decomposition, aligner, u: np.ndarray, components: list[str] | None = None,
                  grid: int | None = None) -> HeatmapImage:
    """Per-token score sum_{i in set} u^T f_i(c_{i,t}) laid out on the patch grid.

    Tokens of coarser (merged) grids are spread evenly over the finer cells
    they cover, so every grid sums to the same total.
    """
    if dec.granularity != COMPONENT_TOKEN:
        raise ApplicationError("heatmaps need a component-token decomposition")
    u = np.asarray(u, dtype=np.float64)
    idx = {c: i for i, c in enumerate(aligner.components)}
    chosen = set(components) if components is not None else set(idx)
    unknown = chosen - set(idx)
    if unknown:
        raise ApplicationError(f"components not in aligner: {sorted(unknown)}")
    grids = {k.grid for k in dec.keys if k.grid is not None}
    G = grid or (max(grids) if grids else None)
    if G is None:
        raise ApplicationError("decomposition has no spatial token grid")
    n = dec.n_images
    out = np.zeros((n, G * G))
    cls = np.zeros(n)
    maps = aligner.maps.astype(np.float64)
    proj = np.einsum("e,ied->id", u, maps)  # u^T f_i, per component
    for j, key in enumerate(dec.keys):
        name = str(key.component)
        if name not in chosen:
            continue
        s = dec.vectors[:, j].astype(np.float64) @ proj[idx[name]]
        if key.token is None or key.grid is None:
            raise ApplicationError(f"contribution {key} has no token position")
        t = key.token
        if key.cls:
            if t == 0:
                cls += s
                continue
            t -= 1
        g = key.grid
        if G % g:
            raise ApplicationError(f"token grid {g} does not tile the heatmap grid {G}")
        r = G // g
        ty, tx = divmod(t, g)
        cells = [(ty * r + a) * G + tx * r + b for a in range(r) for b in range(r)]
        out[:, cells] += (s / (r * r))[:, None]
    comp_dec = reduce_decomposition(dec, "tokens")
    sel = [j for j, k in enumerate(comp_dec.keys) if str(k.component) in chosen]
    totals = np.einsum("njd,jd->n", comp_dec.vectors[:, sel].astype(np.float64),
                       proj[[idx[str(comp_dec.keys[j].component)] for j in sel]]) if sel else np.zeros(n)
    return HeatmapImage(out.reshape(n, G, G), cls, totals, sorted(chosen))


def positive_mass_fraction(grid: np.ndarray, region: np.ndarray) -> float:
    """Share of positive heatmap mass falling inside the boolean ``region`` (G, G)."""
    pos = np.clip(grid, 0, None)
    tot = pos.sum()
    return float(pos[..., region].sum() / tot) if tot > 0 else 0.0


# ----------------------------------------------------------------- ablation


def component_means(dec: Decomposition) -> np.ndarray:
    return dec.vectors.astype(np.float64).mean(0)


def _indices(dec: Decomposition, A) -> list[int]:
    names = [str(k) for k in dec.keys]
    out = []
    for a in A:
        if isinstance(a, (int, np.integer)):
            if not 0 <= a < len(names):
                raise ApplicationError(f"component index {a} out of range")
            out.append(int(a))
        else:
            key = str(a)
            if key not in names:
                raise ApplicationError(f"unknown component {key!r}")
            out.append(names.index(key))
    return sorted(set(out))


def mean_ablate(dec: Decomposition, A, means: np.ndarray | None = None) -> np.ndarray:
    """z' = z - sum_{i in A} c_i + sum_{i in A} mean(c_i)."""
    idx = _indices(dec, A)
    z = dec.z.astype(np.float64)
    if not idx:
        return z.copy()
    means = component_means(dec) if means is None else np.asarray(means, dtype=np.float64)
    v = dec.vectors[:, idx].astype(np.float64)
    return z - v.sum(1) + means[idx].sum(0)


def accuracy(head: dict, z: np.ndarray, labels: np.ndarray, task: str = "y") -> float:
    pred = (z @ head[f"head.{task}.W"].astype(np.float64) + head[f"head.{task}.b"]).argmax(-1)
    return float((pred == labels).mean())


def predict(head: dict, z: np.ndarray, task: str = "y") -> np.ndarray:
    return (z @ head[f"head.{task}.W"].astype(np.float64) + head[f"head.{task}.b"]).argmax(-1)


@dataclass
class AblationCurve:
    steps: list[int]
    accuracy: list[float]
    ablated: list[list[str]]
    chance: float
    meta: dict = field(default_factory=dict)

    def normalized(self) -> np.ndarray:
        a = np.asarray(self.accuracy)
        den = a[0] - self.chance
        return (a - self.chance) / den if den > 0 else np.zeros_like(a)

    def area(self, include_init: bool = False) -> float:
        """Mean normalized accuracy over the layer steps."""
        y = self.normalized()
        if not include_init:
            y = y[:-1]
        return float(y.mean())


def ablation_curve(dec: Decomposition, head: dict, labels: np.ndarray, task: str = "y",
                   means: np.ndarray | None = None) -> AblationCurve:
    """Cumulatively mean-ablate layers from the last to the first, then Init."""
    means = component_means(dec) if means is None else means
    by_layer: dict[int, list[int]] = {}
    init = []
    for j, k in enumerate(dec.keys):
        if k.component.kind == "init":
            init.append(j)
        else:
            by_layer.setdefault(k.component.layer, []).append(j)
    layers = sorted(by_layer)
    steps, acc, ablated = [], [], []
    A: list[int] = []
    for s in range(len(layers) + 2):
        if 0 < s <= len(layers):
            A = A + by_layer[layers[s - 1]]
        elif s == len(layers) + 1:
            A = A + init
        z = mean_ablate(dec, A, means)
        steps.append(s)
        acc.append(accuracy(head, z, labels, task))
        ablated.append([str(dec.keys[j]) for j in A])
    counts = np.bincount(labels)
    chance = float(counts.max() / counts.sum())
    return AblationCurve(steps, acc, ablated, chance, {"n_layers": len(layers)})


# ------------------------------------------------------------- mitigation


@dataclass
class GroupAccuracy:
    groups: dict[tuple[int, int], float]

    @property
    def worst(self) -> float:
        return min(self.groups.values())

    @property
    def average(self) -> float:
        return float(np.mean(list(self.groups.values())))

    @property
    def best(self) -> float:
        return max(self.groups.values())

    def to_dict(self) -> dict:
        return {"groups": {f"{c},{g}": v for (c, g), v in sorted(self.groups.items())},
                "worst": self.worst, "average": self.average, "best": self.best}


def group_accuracy(pred: np.ndarray, labels: np.ndarray, group: np.ndarray) -> GroupAccuracy:
    out = {}
    for c in np.unique(labels):
        for g in np.unique(group):
            m = (labels == c) & (group == g)
            if m.any():
                out[(int(c), int(g))] = float((pred[m] == labels[m]).mean())
    if not out:
        raise ApplicationError("no labeled groups")
    return GroupAccuracy(out)


def default_k(n_components: int) -> int:
    return 10 if n_components >= 30 else max(2, n_components // 6)


def ablated_contributions(dec: Decomposition, A, means: np.ndarray | None = None) -> np.ndarray:
    """Contributions with every component in ``A`` replaced by its mean, shape (n, N, d)."""
    idx = _indices(dec, A)
    v = dec.vectors.astype(np.float64).copy()
    if idx:
        means = component_means(dec) if means is None else np.asarray(means, dtype=np.float64)
        v[:, idx] = means[idx]
    return v


@dataclass
class LinearHead:
    """Frozen linear classifier on the model representation."""

    W: np.ndarray
    b: np.ndarray

    @classmethod
    def from_heads(cls, heads: dict, task: str = "y") -> "LinearHead":
        return cls(heads[f"head.{task}.W"], heads[f"head.{task}.b"])

    def predict_z(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=np.float64) @ self.W.astype(np.float64) + self.b).argmax(-1)

    def predict(self, dec: Decomposition, contribs: np.ndarray) -> np.ndarray:
        return self.predict_z(dec.z.astype(np.float64) - dec.vectors.astype(np.float64).sum(1) + contribs.sum(1))


@dataclass
class ZeroShotHead:
    """Nearest-prototype classifier on the aligned representation sum_i f_i(c_i)."""

    aligner: object
    prototypes: np.ndarray  # (n_classes, d_ref)

    def predict(self, dec: Decomposition, contribs: np.ndarray) -> np.ndarray:
        y = self.aligner.transform(contribs).sum(1)
        y = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), EPS_NORM)
        P = self.prototypes.astype(np.float64)
        P = P / np.linalg.norm(P, axis=1, keepdims=True)
        return (y @ P.T).argmax(-1)


@dataclass
class MitigationReport:
    before: GroupAccuracy
    after: GroupAccuracy
    ablated: list[str]
    k: int

    def to_dict(self) -> dict:
        return {"k": self.k, "ablated": self.ablated, "before": self.before.to_dict(), "after": self.after.to_dict()}


def mitigate_spurious(dec: Decomposition, S: ScoreMatrix, classifier, labels: np.ndarray, group: np.ndarray,
                      spurious: str, core: str | None = None, k: int | None = None,
                      means: np.ndarray | None = None) -> MitigationReport:
    """Mean-ablate the k components most specific to ``spurious`` and compare group accuracies.

    ``classifier`` is a :class:`LinearHead`, a :class:`ZeroShotHead` or a
    head dict (task ``y``). With ``core`` set, the score gap is taken against
    that feature only; otherwise against every other feature.
    """
    if group is None or len(group) != dec.n_images or len(labels) != dec.n_images:
        raise ApplicationError("labels or group labels missing or misaligned")
    if isinstance(classifier, dict):
        classifier = LinearHead.from_heads(classifier)
    names = [str(key) for key in dec.keys]
    if names != list(S.components):
        raise ApplicationError("score matrix and decomposition component tables differ")
    k = default_k(len(names)) if k is None else k
    comps = select_by_gap(S, spurious, k, [core] if core else None) if k else []
    before = group_accuracy(classifier.predict(dec, dec.vectors.astype(np.float64)), labels, group)
    after = group_accuracy(classifier.predict(dec, ablated_contributions(dec, comps, means)), labels, group)
    return MitigationReport(before, after, [names[i] for i in comps], k)


def layer_components(dec: Decomposition, layers: list[int]) -> list[str]:
    return [str(k) for k in dec.keys if k.component.kind != "init" and k.component.layer in layers]


def init_component() -> ComponentId:
    return ComponentId.init()
