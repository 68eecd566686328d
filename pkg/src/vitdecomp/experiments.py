"""End-to-end experiments on the synthetic world: ablation contrast and spurious mitigation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .align import AlignTrainConfig, train_compalign
from .applications import (AblationCurve, MitigationReport, ZeroShotHead, ablation_curve, accuracy,
                           component_means, mitigate_spurious)
from .attribution import Feature, score_decomposition
from .decompose import decompose_images
from .models.config import ModelConfig
from .models.data import SHAPES, DataRecipe, Split, gen_synthetic
from .models.teacher import TeacherEncoder, class_prototypes, train_teacher
from .models.train import Hyper, fit_probe, forward, train_toy
from .models.vit import build_model

TEACHER_SEED = 12345
FEATURES = ("shape", "background", "color")


def default_teacher(seed: int = TEACHER_SEED, epochs: int = 15) -> TeacherEncoder:
    """Teacher trained on a balanced dataset (rho = 0.5) on every attribute."""
    return train_teacher(gen_synthetic(DataRecipe(), seed), hyper=Hyper(epochs=epochs))


def teacher_features(teacher: TeacherEncoder, names=FEATURES) -> list[Feature]:
    return [Feature(a, teacher.names[a], teacher.prototypes[a]) for a in names]


@dataclass
class AblationContrast:
    task: AblationCurve
    transfer: AblationCurve
    meta: dict = field(default_factory=dict)

    @property
    def steeper_transfer(self) -> bool:
        return self.transfer.area() < self.task.area()


def ablation_contrast(seed: int, variant: str = "vanilla-cls", n_train: int = 1500, n_test: int = 600,
                      epochs: int = 10) -> AblationContrast:
    """Shape classifier trained on the task vs. a linear probe on an encoder trained on other shapes."""
    ds = gen_synthetic(DataRecipe(splits=(Split("train", n_train, 0.5), Split("test", n_test, 0.5))), seed)
    tr, te = ds.split("train"), ds.split("test")
    hyper = Hyper(epochs=epochs, seed=seed)

    task = build_model(ModelConfig(variant=variant, seed=seed))
    res = train_toy(task, ds.images[tr], {"y": ds.labels[tr]}, hyper)
    c_task = ablation_curve(decompose_images(task, ds.images[te]), res.heads, ds.labels[te])

    other = DataRecipe(foregrounds=SHAPES[2:], splits=(Split("train", n_train, 0.5),))
    pre = gen_synthetic(other, seed + 500)
    transfer = build_model(ModelConfig(variant=variant, seed=seed))
    train_toy(transfer, pre.images, {"y": pre.labels, "color": pre.color}, hyper)
    probe = fit_probe(forward(transfer.params, transfer.cfg, ds.images[tr]), ds.labels[tr], seed=seed)
    c_transfer = ablation_curve(decompose_images(transfer, ds.images[te]), probe, ds.labels[te])
    baseline = {"task": accuracy(res.heads, task.encode(ds.images[te]), ds.labels[te]),
                "transfer": accuracy(probe, transfer.encode(ds.images[te]), ds.labels[te])}
    return AblationContrast(c_task, c_transfer, {"seed": seed, "variant": variant, "baseline": baseline})


@dataclass
class MitigationRun:
    report: MitigationReport
    scores: object
    meta: dict = field(default_factory=dict)


def mitigation_experiment(seed: int, teacher: TeacherEncoder, rho: float = 0.95, k: int | None = None,
                          core: str | None = None, epochs: int = 15, align_epochs: int = 60) -> MitigationRun:
    """Spurious-background mitigation with a zero-shot prototype classifier.

    A generic encoder is pretrained on balanced data. Class prototypes come
    from the teacher on the skewed (``rho``) split, so the classifier inherits
    the background bias. Components are scored on a balanced split and the
    gap-selected background components are mean-ablated on the test split.
    """
    pre = gen_synthetic(DataRecipe(splits=(Split("train", 2000, 0.5),)), 1000 + seed)
    ds = gen_synthetic(DataRecipe(splits=(Split("train", 1000, rho), Split("align", 1000, 0.5),
                                        Split("test", 800, 0.5))), seed)
    tr, al, te = ds.split("train"), ds.split("align"), ds.split("test")
    model = build_model(ModelConfig(variant="vanilla-cls", seed=seed))
    train_toy(model, pre.images, pre.attributes, Hyper(epochs=epochs, seed=seed))

    da = decompose_images(model, ds.images[al])
    dt = decompose_images(model, ds.images[te])
    aligner = train_compalign(da, teacher.encode(ds.images[al]), AlignTrainConfig(seed=seed, epochs=align_epochs))
    S = score_decomposition(da, aligner, teacher_features(teacher))
    protos = class_prototypes(teacher.encode(ds.images[tr]), ds.labels[tr], len(ds.recipe.foregrounds))
    head = ZeroShotHead(aligner, protos)
    rep = mitigate_spurious(dt, S, head, ds.labels[te], ds.group[te], "background", core, k, component_means(da))
    return MitigationRun(rep, S, {"seed": seed, "rho": rho})
