"""Frozen reference encoder and its per-attribute prototype table."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..graph import DTYPE
from .config import ModelConfig
from .data import SyntheticDataset
from .train import Hyper, forward, train_toy
from .vit import ViT, build_model


@dataclass
class TeacherEncoder:
    """Reference space for alignment.

    ``prototypes[attr]`` is a (n_values, d_ref) array of unit vectors, one per
    attribute value, playing the role of text embeddings.
    """

    model: ViT
    prototypes: dict[str, np.ndarray]
    names: dict[str, tuple[str, ...]]

    @property
    def d_ref(self) -> int:
        return self.model.width

    def encode(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = [forward(self.model.params, self.model.cfg, images[i:i + batch_size])
               for i in range(0, len(images), batch_size)]
        return np.concatenate(out).astype(DTYPE)

    def prototype(self, attr: str, value: str | int) -> np.ndarray:
        i = self.names[attr].index(value) if isinstance(value, str) else int(value)
        return self.prototypes[attr][i]

    def feature_matrix(self, attr: str) -> np.ndarray:
        """Instantiation embeddings as columns, shape (d_ref, n_values)."""
        return self.prototypes[attr].T.copy()


def class_prototypes(z: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, z.shape[1]), dtype=np.float64)
    for c in range(n):
        m = z[labels == c].astype(np.float64).mean(0)
        out[c] = m / np.linalg.norm(m)
    return out.astype(DTYPE)


def train_teacher(ds: SyntheticDataset, cfg: ModelConfig | None = None, hyper: Hyper | None = None,
                  split: str = "train") -> TeacherEncoder:
    """Train a mean-pooled encoder on every attribute of ``ds`` at once, then freeze it."""
    cfg = cfg or ModelConfig(variant="vanilla-meanpool", seed=1000)
    model = build_model(cfg)
    idx = ds.split(split)
    names = ds.attribute_names
    targets = {a: v[idx] for a, v in ds.attributes.items()}
    train_toy(model, ds.images[idx], targets, hyper or Hyper(), n_classes={a: len(n) for a, n in names.items()})
    for v in model.params.values():
        v.setflags(write=False)
    t = TeacherEncoder(model, {}, names)
    z = t.encode(ds.images[idx])
    t.prototypes = {a: class_prototypes(z, targets[a], len(names[a])) for a in names}
    return t
