"""Synthetic foreground-on-background images with a controllable spurious correlation."""
from __future__ import annotations

import json
import os
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DTYPE = np.float32

SHAPES = ("square", "disk", "triangle", "cross", "ring", "bar")
BACKGROUNDS = ("land", "water", "sand", "snow")
COLORS = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.2),
    "yellow": (0.95, 0.85, 0.1),
    "magenta": (0.8, 0.2, 0.8),
}
LAYOUTS = ("center", "split")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Split:
    name: str
    n: int
    rho: float


@dataclass(frozen=True)
class DataRecipe:
    """Recipe for a dataset.

    ``rho`` is the fraction of each class drawn on its preferred background
    (class ``c`` prefers background ``c % n_backgrounds``); the remaining
    images are spread evenly over the other backgrounds.
    """

    foregrounds: tuple[str, ...] = SHAPES[:4]
    backgrounds: tuple[str, ...] = BACKGROUNDS[:2]
    colors: tuple[str, ...] = ("red", "green", "yellow")
    splits: tuple[Split, ...] = (Split("train", 2000, 0.5), Split("val", 500, 0.5))
    image_size: int = 32
    layout: str = "center"
    noise: float = 0.04

    def validate(self) -> "DataRecipe":
        if not self.foregrounds or not self.backgrounds or not self.colors:
            raise DatasetError("foreground, background and color lists must be non-empty")
        for name in self.foregrounds:
            if name not in SHAPES:
                raise DatasetError(f"unknown foreground {name!r}")
        for name in self.colors:
            if name not in COLORS:
                raise DatasetError(f"unknown color {name!r}")
        if self.layout not in LAYOUTS:
            raise DatasetError(f"unknown layout {self.layout!r}")
        if not self.splits:
            raise DatasetError("at least one split is required")
        for s in self.splits:
            if s.n < 1 or not 0.0 <= s.rho <= 1.0:
                raise DatasetError(f"bad split {s}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DataRecipe":
        d = dict(d)
        d["splits"] = tuple(Split(**s) for s in d.get("splits", ()))
        for k in ("foregrounds", "backgrounds", "colors"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d).validate()


@dataclass
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    group: np.ndarray
    color: np.ndarray
    splits: dict[str, np.ndarray]
    recipe: DataRecipe
    seed: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def attributes(self) -> dict[str, np.ndarray]:
        return {"shape": self.labels, "background": self.group, "color": self.color}

    @property
    def attribute_names(self) -> dict[str, tuple[str, ...]]:
        s = self.recipe
        return {"shape": s.foregrounds, "background": s.backgrounds, "color": s.colors}

    def split(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise KeyError(f"no split {name!r}; have {sorted(self.splits)}")
        return self.splits[name]

    def subset(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        idx = self.split(name)
        return self.images[idx], self.labels[idx], self.group[idx]

    def save(self, directory: str | os.PathLike) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        blob = np.ascontiguousarray(self.images, dtype="<f4").tobytes()
        _atomic_write(d / "images.f32", blob)
        manifest = {
            "format": "vitdecomp-dataset/1",
            "shape": list(self.images.shape),
            "seed": self.seed,
            "recipe": self.recipe.to_dict(),
            "labels": self.labels.tolist(),
            "group": self.group.tolist(),
            "color": self.color.tolist(),
            "splits": {k: v.tolist() for k, v in self.splits.items()},
            "rho": {s.name: s.rho for s in self.recipe.splits},
        }
        _atomic_write(d / "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        return d

    @classmethod
    def load(cls, directory: str | os.PathLike) -> "SyntheticDataset":
        d = Path(directory)
        try:
            m = json.loads((d / "manifest.json").read_text())
        except FileNotFoundError as e:
            raise DatasetError(f"no dataset manifest in {d}") from e
        raw = (d / "images.f32").read_bytes()
        shape = tuple(m["shape"])
        if len(raw) != int(np.prod(shape)) * 4:
            raise DatasetError(f"image blob size {len(raw)} does not match shape {shape}")
        images = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(DTYPE)
        return cls(images, np.asarray(m["labels"], dtype=np.int64), np.asarray(m["group"], dtype=np.int64),
                   np.asarray(m["color"], dtype=np.int64),
                   {k: np.asarray(v, dtype=np.int64) for k, v in m["splits"].items()},
                   DataRecipe.from_dict(m["recipe"]), int(m["seed"]))


def _atomic_write(path: Path, data: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -------------------------------------------------------------- rendering


def _smooth_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.normal(size=(cells, cells))
    rep = size // cells
    return np.kron(coarse, np.ones((rep, rep)))[:size, :size]


def render_background(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == "land":
        base = np.array([0.45, 0.36, 0.18])
        tex = 0.10 * _smooth_noise(rng, size, 8)[..., None] * np.array([0.6, 1.0, 0.3])
        stripes = 0.06 * np.sin(2 * np.pi * xx / 4.0 + rng.uniform(0, 2 * np.pi))[..., None] * np.array([0.2, 1.0, 0.1])
        img = base + tex + stripes
    elif kind == "water":
        base = np.array([0.16, 0.38, 0.72])
        waves = 0.10 * np.sin(2 * np.pi * yy / 6.0 + 0.6 * np.sin(xx / 3.0) + rng.uniform(0, 2 * np.pi))
        img = base + waves[..., None] * np.array([0.4, 0.7, 1.0])
    elif kind == "sand":
        base = np.array([0.82, 0.72, 0.48])
        rip = 0.08 * np.sin(2 * np.pi * (xx + yy) / 7.0 + rng.uniform(0, 2 * np.pi))
        img = base + rip[..., None]
    elif kind == "snow":
        base = np.array([0.88, 0.9, 0.95])
        speck = 0.12 * (rng.random((size, size)) < 0.08)
        img = base - speck[..., None] * np.array([0.5, 0.4, 0.2])
    else:
        h = zlib.crc32(kind.encode()) % 997
        base = np.array([(h % 7) / 7.0, (h % 11) / 11.0, (h % 13) / 13.0])
        img = base + 0.1 * _smooth_noise(rng, size, 4)[..., None]
    return img


def shape_mask(kind: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r * 0.8) & (np.abs(dx) <= r * 0.8)
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "triangle":
        return (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    if kind == "cross":
        w = r * 0.35
        return ((np.abs(dy) <= w) & (np.abs(dx) <= r)) | ((np.abs(dx) <= w) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "bar":
        return (np.abs(dy) <= r * 0.3) & (np.abs(dx) <= r)
    raise DatasetError(f"unknown foreground {kind!r}")


def render(shape: str, background: str, color: str, rng: np.random.Generator, size: int = 32,
           layout: str = "center", noise: float = 0.04) -> np.ndarray:
    img = render_background(background, size, rng)
    r = size * rng.uniform(0.24, 0.32)
    if layout == "center":
        cy = size / 2 + rng.uniform(-3, 3)
        cx = size / 2 + rng.uniform(-3, 3)
    else:
        half = size // 2
        img[:, half:] = 0.5
        r *= 0.8
        cy = size / 2 + rng.uniform(-3, 3)
        cx = 0.75 * size + rng.uniform(-1.5, 1.5)
    m = shape_mask(shape, size, cy, cx, r)
    img[m] = np.asarray(COLORS[color]) + rng.uniform(-0.05, 0.05, 3)
    img = img + noise * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(DTYPE)


def assign_backgrounds(labels: np.ndarray, n_bg: int, rho: float, rng: np.random.Generator) -> np.ndarray:
    """Exact-count assignment: round(rho * n_c) images of class c get background c % n_bg."""
    group = np.empty_like(labels)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        pref = int(c) % n_bg
        n_pref = int(round(rho * len(idx))) if n_bg > 1 else len(idx)
        others = [b for b in range(n_bg) if b != pref]
        vals = [pref] * n_pref + [others[i % len(others)] for i in range(len(idx) - n_pref)] if others else [pref] * len(idx)
        group[idx] = rng.permutation(np.asarray(vals, dtype=labels.dtype))
    return group


def gen_synthetic(recipe: DataRecipe | None = None, seed: int = 0) -> SyntheticDataset:
    """Generate a reproducible dataset; the same (recipe, seed) gives identical bytes."""
    recipe = (recipe or DataRecipe()).validate()
    n_fg, n_bg, n_col = len(recipe.foregrounds), len(recipe.backgrounds), len(recipe.colors)
    streams = np.random.SeedSequence(seed).spawn(len(recipe.splits))
    images, labels, group, color, splits = [], [], [], [], {}
    start = 0
    for s, ss in zip(recipe.splits, streams):
        rng = np.random.default_rng(ss)
        lab = rng.permutation(np.arange(s.n) % n_fg)
        grp = assign_backgrounds(lab, n_bg, s.rho, rng)
        col = rng.integers(0, n_col, s.n)
        for i in range(s.n):
            images.append(render(recipe.foregrounds[lab[i]], recipe.backgrounds[grp[i]], recipe.colors[col[i]], rng,
                                 recipe.image_size, recipe.layout, recipe.noise))
        labels.append(lab)
        group.append(grp)
        color.append(col)
        splits[s.name] = np.arange(start, start + s.n)
        start += s.n
    return SyntheticDataset(np.stack(images).astype(DTYPE), np.concatenate(labels).astype(np.int64),
                            np.concatenate(group).astype(np.int64), np.concatenate(color).astype(np.int64),
                            splits, recipe, seed)


def group_accuracy(pred: np.ndarray, labels: np.ndarray, group: np.ndarray) -> dict[tuple[int, int], float]:
    """Accuracy per (class, background) cell present in the data."""
    out = {}
    for c in np.unique(labels):
        for g in np.unique(group):
            m = (labels == c) & (group == g)
            if m.any():
                out[(int(c), int(g))] = float((pred[m] == labels[m]).mean())
    return out
