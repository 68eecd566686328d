"""Command-line pipeline: dataset, train, decompose, align, score and the applications.

Every command writes its outputs atomically, prints a one-line summary and,
where useful, a tab-delimited table. Paths are resolved against
``$VITDECOMP_ROOT`` when set.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import artifacts as art
from . import plotting
from .align import AlignError, AlignTrainConfig, cosine_distance, orthogonality_report, train_compalign
from .applications import (ApplicationError, LinearHead, ZeroShotHead, ablation_curve, component_means,
                           label_precision, mitigate_spurious, retrieve_image_by_gap, retrieve_text_by_score,
                           token_heatmap)
from .attribution import AttributionError, component_ordering, score_decomposition
from .decompose import COMPONENT, COMPONENT_TOKEN, DecompositionError, ReconstructionError, decompose_images
from .experiments import FEATURES, ablation_contrast, mitigation_experiment, teacher_features
from .models.config import VARIANTS, ConfigError, ModelConfig
from .models.data import BACKGROUNDS, LAYOUTS, SHAPES, DatasetError, DataRecipe, Split, SyntheticDataset, gen_synthetic
from .models.teacher import class_prototypes, train_teacher
from .models.train import Hyper, TrainingError, fit_probe, forward, train_toy
from .models.vit import build_model

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3
ROOT_ENV = "VITDECOMP_ROOT"
RUN_KEYS_IGNORED = ("config", "error_json", "func")


class CLIError(ValueError):
    pass


def resolve(path: str | os.PathLike) -> Path:
    p = Path(path)
    root = os.environ.get(ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def run_config(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in RUN_KEYS_IGNORED}


def table(header: list[str], rows: list[list]) -> None:
    print("\t".join(header))
    for r in rows:
        print("\t".join(f"{v:.6g}" if isinstance(v, float) else str(v) for v in r))


def summary(metric: str, value, path) -> None:
    v = f"{value:.6g}" if isinstance(value, float) else str(value)
    print(f"{metric}={v}\t{path}")


def parse_splits(items: list[str] | None) -> tuple[Split, ...]:
    if not items:
        return DataRecipe().splits
    out = []
    for s in items:
        try:
            name, n, rho = s.split(":")
            out.append(Split(name, int(n), float(rho)))
        except ValueError:
            raise CLIError(f"split {s!r} must look like name:n:rho") from None
    return tuple(out)


def load_dataset(path) -> SyntheticDataset:
    return SyntheticDataset.load(resolve(path))


def split_index(ds: SyntheticDataset, name: str) -> np.ndarray:
    try:
        return ds.split(name)
    except KeyError:
        raise CLIError(f"dataset has no split {name!r}; have {sorted(ds.splits)}") from None


def feature_value(teacher, feature: str, value: str) -> str:
    if feature not in teacher.names:
        raise CLIError(f"unknown feature {feature!r}; choose from {sorted(teacher.names)}")
    names = list(teacher.names[feature])
    if value in names:
        return value
    if value.isdigit() and int(value) < len(names):
        return names[int(value)]
    raise CLIError(f"unknown value {value!r} for {feature}; choose from {names}")


def dec_images(dec, ds: SyntheticDataset | None = None):
    """Dataset and index of the images a decomposition was computed on."""
    if "data" not in dec.meta or "split" not in dec.meta:
        raise CLIError("decomposition does not record its dataset; rerun decompose")
    ds = ds or load_dataset(dec.meta["data"])
    idx = split_index(ds, dec.meta["split"])
    if len(idx) != dec.n_images:
        raise CLIError("decomposition and dataset split differ in size")
    return ds, idx


# ------------------------------------------------------------- commands


def cmd_dataset(args) -> int:
    recipe = DataRecipe(foregrounds=tuple(args.foregrounds.split(",")), backgrounds=tuple(args.backgrounds.split(",")),
                    splits=parse_splits(args.split), layout=args.layout, noise=args.noise)
    ds = gen_synthetic(recipe, args.seed)
    out = ds.save(resolve(args.out))
    summary("images", len(ds), out)
    table(["split", "n", "rho"], [[s.name, s.n, s.rho] for s in recipe.splits])
    return EXIT_OK


def _model_config(args) -> ModelConfig:
    return ModelConfig(variant=args.variant, depth=args.depth, heads=args.heads, dim=args.dim,
                       patch_grid=args.patch_grid, seed=args.seed).validate()


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    idx = split_index(ds, args.split)
    hyper = Hyper(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    cfg = run_config(args)
    out = resolve(args.out)
    if args.role == "teacher":
        t = train_teacher(ds, _model_config(args), hyper, args.split)
        art.save_teacher(out, t, cfg)
        summary("d_ref", t.d_ref, out)
        return EXIT_OK
    if args.role == "probe":
        if not args.encoder:
            raise CLIError("--role probe needs --encoder")
        model, _, _ = art.load_model(resolve(args.encoder))
        heads = fit_probe(forward(model.params, model.cfg, ds.images[idx]), ds.labels[idx], seed=args.seed)
    else:
        model = build_model(_model_config(args))
        targets = {"y": ds.labels[idx]} if args.role == "classifier" else {a: v[idx] for a, v in ds.attributes.items()}
        res = train_toy(model, ds.images[idx], targets, hyper)
        heads = res.heads
        if args.role == "generic":
            heads = fit_probe(forward(model.params, model.cfg, ds.images[idx]), ds.labels[idx], seed=args.seed)
    z = forward(model.params, model.cfg, ds.images[idx])
    acc = float((LinearHead.from_heads(heads).predict_z(z) == ds.labels[idx]).mean())
    art.save_model(out, model, heads, {"role": args.role, "train_accuracy": acc}, cfg)
    summary("train_accuracy", acc, out)
    return EXIT_OK


def cmd_decompose(args) -> int:
    model, _, _ = art.load_model(resolve(args.model))
    ds = load_dataset(args.data)
    idx = split_index(ds, args.split)
    layers = args.layers if args.layers == "all" else int(args.layers)
    dec = decompose_images(model, ds.images[idx], args.granularity, layers, tol=args.tol)
    dec.meta.update({"data": args.data, "split": args.split})
    out = resolve(args.out)
    art.save_decomposition(out, dec, run_config(args))
    res = float(dec.residual().max())
    summary("residual", res, out)
    norms = np.linalg.norm(dec.component_matrix().astype(np.float64), axis=-1).mean(0)
    table(["component", "mean_norm"], [[str(c), float(v)] for c, v in zip(dec.components, norms)])
    return EXIT_OK


def cmd_verify(args) -> int:
    dec, _ = art.load_decomposition(resolve(args.decomposition), args.tol)
    summary("residual", float(dec.meta["residual"]), resolve(args.decomposition))
    return EXIT_OK


def cmd_align(args) -> int:
    dec, _ = art.load_decomposition(resolve(args.decomposition))
    teacher, _ = art.load_teacher(resolve(args.teacher))
    ds, idx = dec_images(dec)
    zref = teacher.encode(ds.images[idx])
    cfg = AlignTrainConfig(lr=args.lr, lam=args.lam, epochs=args.epochs, batch_size=args.batch_size,
                           seed=args.seed, tie=args.single_map)
    out = resolve(args.out)
    try:
        al = train_compalign(dec, zref, cfg)
    except AlignError as e:
        if e.checkpoint is not None:
            art.save_aligner(out.with_suffix(".checkpoint"), e.checkpoint, run_config(args))
        raise
    art.save_aligner(out, al, run_config(args))
    dist = cosine_distance(al, dec, zref)
    summary("cosine_distance", dist, out)
    rows = [[r["component"], r["deviation"], r["k"], r["relative_k_deviation"]] for r in orthogonality_report(al)]
    table(["component", "orth_deviation", "k", "relative_k_deviation"], rows)
    if args.figure:
        fig, ax = plotting.new_figure(4.0)
        ax[0, 0].plot(al.log["loss_curve"], lw=1.2)
        ax[0, 0].set_xlabel("epoch")
        ax[0, 0].set_ylabel("loss")
        plotting.save(fig, resolve(args.figure))
    return EXIT_OK


def cmd_score(args) -> int:
    dec, _ = art.load_decomposition(resolve(args.decomposition))
    al, _ = art.load_aligner(resolve(args.aligner))
    teacher, _ = art.load_teacher(resolve(args.teacher))
    feats = teacher_features(teacher, tuple(args.features.split(",")))
    S = score_decomposition(dec, al, feats, {"decomposition": args.decomposition, "aligner": args.aligner})
    out = resolve(args.out)
    art.save_scores(out, S, run_config(args))
    summary("components", len(S.components), out)
    table(["component", *S.features], [[c, *map(float, S.scores[i])] for i, c in enumerate(S.components)])
    if args.figure:
        plotting.score_matrix(S, resolve(args.figure))
    return EXIT_OK


def cmd_retrieve(args) -> int:
    dec, _ = art.load_decomposition(resolve(args.decomposition))
    S, _ = art.load_scores(resolve(args.scores))
    ds, idx = dec_images(dec)
    attr = ds.attributes[args.feature][idx]
    if args.mode == "text":
        al, _ = art.load_aligner(resolve(args.aligner))
        teacher, _ = art.load_teacher(resolve(args.teacher))
        value = feature_value(teacher, args.feature, args.value)
        u = teacher.prototype(args.feature, value)
        res = retrieve_text_by_score(al.transform(dec.vectors), S, args.feature, u, args.k, args.top)
        target = teacher.names[args.feature].index(value)
    else:
        res = retrieve_image_by_gap(dec.vectors, S, args.feature, args.k, args.reference, args.top)
        target = int(attr[args.reference])
    prec = label_precision(res.ids, attr, target)
    out = resolve(args.out)
    art.write_json(out, {"query": res.query, "components": res.components, "ids": res.ids.tolist(),
                         "scores": [float(np.float32(s)) for s in res.scores], "excluded": res.excluded,
                         "informative": res.informative, "precision": prec})
    summary("precision", prec, out)
    table(["rank", "image", "score", args.feature], [[r, int(i), float(s), ds.attribute_names[args.feature][attr[i]]]
                                                     for r, (i, s) in enumerate(zip(res.ids, res.scores))])
    return EXIT_OK


def cmd_heatmap(args) -> int:
    dec, _ = art.load_decomposition(resolve(args.decomposition))
    if dec.granularity != COMPONENT_TOKEN:
        raise CLIError("heatmap needs a component-token decomposition")
    al, _ = art.load_aligner(resolve(args.aligner))
    teacher, _ = art.load_teacher(resolve(args.teacher))
    value = feature_value(teacher, args.feature, args.value)
    u = teacher.prototype(args.feature, value)
    comps = None
    if args.scores:
        S, _ = art.load_scores(resolve(args.scores))
        comps = [S.components[i] for i in component_ordering(S, args.feature)[:args.k]]
    ds, idx = dec_images(dec)
    images = [int(i) for i in args.images.split(",")]
    for i in images:
        if not 0 <= i < dec.n_images:
            raise CLIError(f"image {i} out of range")
    hm = token_heatmap(dec.select_images(images), al, u, comps)
    out = resolve(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for j, i in enumerate(images):
        png = plotting.heatmap(hm.grid[j], out / f"heatmap_{i:04d}.png", ds.images[idx[i]], float(hm.cls[j]),
                               f"{args.feature}={args.value}")
        art.write_json(out / f"heatmap_{i:04d}.json", {"image": i, "grid": hm.grid[j].astype(np.float32).tolist(),
                                                      "cls": float(np.float32(hm.cls[j])), "total": float(np.float32(hm.totals[j])),
                                                      "components": hm.components})
        rows.append([i, float(hm.totals[j]), float(hm.cls[j]), float(hm.bounds[j]), png.name])
    summary("images", len(images), out)
    table(["image", "total", "cls", "bound", "file"], rows)
    return EXIT_OK


def cmd_ablate(args) -> int:
    dec, _ = art.load_decomposition(resolve(args.decomposition))
    _, heads, _ = art.load_model(resolve(args.model))
    if "head.y.W" not in heads:
        raise CLIError("model artifact has no classifier head")
    ds, idx = dec_images(dec)
    curve = ablation_curve(dec, heads, ds.labels[idx])
    out = resolve(args.out)
    art.write_json(out, {"steps": curve.steps, "accuracy": curve.accuracy, "ablated": curve.ablated,
                         "chance": curve.chance, "area": curve.area(), "model": args.model})
    summary("area", curve.area(), out)
    table(["layers_ablated", "accuracy", "normalized"],
          [[s, a, float(n)] for s, a, n in zip(curve.steps, curve.accuracy, curve.normalized())])
    if args.figure:
        plotting.ablation_curves({Path(args.model).stem: curve}, resolve(args.figure), normalized=args.normalized)
    return EXIT_OK


def cmd_mitigate(args) -> int:
    dec, _ = art.load_decomposition(resolve(args.decomposition))
    S, _ = art.load_scores(resolve(args.scores))
    ds, idx = dec_images(dec)
    means = None
    if args.means_from:
        ref, _ = art.load_decomposition(resolve(args.means_from))
        means = component_means(ref)
    if args.classifier == "linear":
        _, heads, _ = art.load_model(resolve(args.model))
        head = LinearHead.from_heads(heads)
    else:
        al, _ = art.load_aligner(resolve(args.aligner))
        teacher, _ = art.load_teacher(resolve(args.teacher))
        pidx = split_index(ds, args.prototype_split)
        protos = class_prototypes(teacher.encode(ds.images[pidx]), ds.labels[pidx], len(ds.recipe.foregrounds))
        head = ZeroShotHead(al, protos)
    rep = mitigate_spurious(dec, S, head, ds.labels[idx], ds.group[idx], args.spurious, args.core, args.k, means)
    out = resolve(args.out)
    art.write_json(out, rep.to_dict())
    summary("worst_group_gain", rep.after.worst - rep.before.worst, out)
    table(["group", "before", "after"], [[f"{ds.recipe.foregrounds[c]}/{ds.recipe.backgrounds[g]}", b, rep.after.groups[(c, g)]]
                                         for (c, g), b in sorted(rep.before.groups.items())]
          + [["worst", rep.before.worst, rep.after.worst], ["average", rep.before.average, rep.after.average]])
    if args.figure:
        plotting.group_bars({f"{c},{g}": v for (c, g), v in rep.before.groups.items()},
                            {f"{c},{g}": v for (c, g), v in rep.after.groups.items()}, resolve(args.figure))
    return EXIT_OK


def cmd_experiment(args) -> int:
    out = resolve(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    if args.name == "ablation-contrast":
        rows, res = [], {}
        for s in seeds:
            c = ablation_contrast(s, epochs=args.epochs)
            plotting.ablation_curves({"task": c.task, "transfer": c.transfer}, out / f"ablation_seed{s}.svg", True)
            res[s] = {"task": c.task.accuracy, "transfer": c.transfer.accuracy,
                      "task_area": c.task.area(), "transfer_area": c.transfer.area()}
            rows.append([s, c.task.area(), c.transfer.area(), int(c.steeper_transfer)])
        art.write_json(out / "ablation_contrast.json", res)
        summary("seeds_steeper_transfer", sum(r[3] for r in rows), out / "ablation_contrast.json")
        table(["seed", "task_area", "transfer_area", "steeper_transfer"], rows)
        return EXIT_OK
    teacher, _ = art.load_teacher(resolve(args.teacher))
    rows, res = [], {}
    for s in seeds:
        r = mitigation_experiment(s, teacher, k=args.k, epochs=args.epochs).report
        plotting.group_bars({f"{c},{g}": v for (c, g), v in r.before.groups.items()},
                            {f"{c},{g}": v for (c, g), v in r.after.groups.items()}, out / f"mitigation_seed{s}.svg")
        res[s] = r.to_dict()
        rows.append([s, r.before.worst, r.after.worst, r.before.average, r.after.average])
    art.write_json(out / "mitigation.json", res)
    gains = [r[2] - r[1] for r in rows]
    summary("median_worst_gain", float(np.median(gains)), out / "mitigation.json")
    table(["seed", "worst_before", "worst_after", "avg_before", "avg_after"], rows)
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitdecomp", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, func, help):
        s = sub.add_parser(name, help=help, description=help)
        s.add_argument("--config", help="key=value file; command-line flags override it")
        s.add_argument("--error-json", action="store_true", help="print errors as JSON on stderr")
        s.set_defaults(func=func)
        return s

    s = cmd("dataset", cmd_dataset, "generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", action="append", help="name:n:rho, repeatable")
    s.add_argument("--foregrounds", default=",".join(SHAPES[:4]))
    s.add_argument("--backgrounds", default=",".join(BACKGROUNDS[:2]))
    s.add_argument("--layout", choices=LAYOUTS, default="center")
    s.add_argument("--noise", type=float, default=0.04)

    s = cmd("train", cmd_train, "train a classifier, generic encoder, probe or teacher")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--role", choices=("classifier", "generic", "probe", "teacher"), default="classifier")
    s.add_argument("--encoder", help="model artifact to probe (role probe)")
    s.add_argument("--split", default="train")
    s.add_argument("--variant", choices=VARIANTS, default="vanilla-cls")
    s.add_argument("--depth", type=int, default=4)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--dim", type=int, default=32)
    s.add_argument("--patch-grid", type=int, default=4)
    s.add_argument("--epochs", type=int, default=15)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--lr", type=float, default=2e-3)
    s.add_argument("--seed", type=int, default=0)

    s = cmd("decompose", cmd_decompose, "decompose a model's representations of a dataset split")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--granularity", choices=(COMPONENT, COMPONENT_TOKEN), default=COMPONENT)
    s.add_argument("--layers", default="all", help="'all' or the number of final layers to decompose")
    s.add_argument("--tol", type=float, default=1e-5)

    s = cmd("verify", cmd_verify, "re-check a decomposition's reconstruction identity")
    s.add_argument("--decomposition", required=True)
    s.add_argument("--tol", type=float, default=1e-5)

    s = cmd("align", cmd_align, "fit per-component maps into the teacher space")
    s.add_argument("--decomposition", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lambda", dest="lam", type=float, default=None, help="penalty weight (default 1/d_ref)")
    s.add_argument("--lr", type=float, default=3e-4)
    s.add_argument("--epochs", type=int, default=100)
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--single-map", action="store_true", help="share one map across components")
    s.add_argument("--figure", help="loss-curve figure path")

    s = cmd("score", cmd_score, "score components against teacher features")
    s.add_argument("--decomposition", required=True)
    s.add_argument("--aligner", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--features", default=",".join(FEATURES))
    s.add_argument("--figure")

    s = cmd("retrieve", cmd_retrieve, "text-style or image-based retrieval")
    s.add_argument("--mode", choices=("text", "image"), default="text")
    s.add_argument("--decomposition", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--aligner")
    s.add_argument("--teacher")
    s.add_argument("--feature", default="background")
    s.add_argument("--value", help="feature value for text mode")
    s.add_argument("--reference", type=int, default=0)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--top", type=int, default=10)
    s.add_argument("--out", required=True)

    s = cmd("heatmap", cmd_heatmap, "token heatmaps for a feature value")
    s.add_argument("--decomposition", required=True)
    s.add_argument("--aligner", required=True)
    s.add_argument("--teacher", required=True)
    s.add_argument("--feature", default="background")
    s.add_argument("--value", required=True)
    s.add_argument("--scores", help="restrict to the top --k components for the feature")
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--images", default="0")
    s.add_argument("--out-dir", required=True)

    s = cmd("ablate", cmd_ablate, "layer-wise mean-ablation curve")
    s.add_argument("--decomposition", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--figure")
    s.add_argument("--normalized", action="store_true")

    s = cmd("mitigate", cmd_mitigate, "mean-ablate spurious components and report group accuracy")
    s.add_argument("--decomposition", required=True)
    s.add_argument("--scores", required=True)
    s.add_argument("--classifier", choices=("zero-shot", "linear"), default="zero-shot")
    s.add_argument("--model", help="model artifact with a head (linear classifier)")
    s.add_argument("--aligner")
    s.add_argument("--teacher")
    s.add_argument("--prototype-split", default="train")
    s.add_argument("--means-from", help="decomposition whose component means replace ablated contributions")
    s.add_argument("--spurious", default="background")
    s.add_argument("--core", help="contrast feature for the score gap (default: all others)")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--figure")

    s = cmd("experiment", cmd_experiment, "multi-seed ablation-contrast or mitigation experiment")
    s.add_argument("name", choices=("ablation-contrast", "mitigation"))
    s.add_argument("--seeds", default="0,1,2,3,4")
    s.add_argument("--teacher", help="teacher artifact (mitigation)")
    s.add_argument("--k", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--out-dir", required=True)
    return p


def _config_argv(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Splice key=value pairs from ``--config`` in front of the explicit flags."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise CLIError("--config needs a path")
    path = resolve(argv[i + 1])
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise CLIError(f"missing config file {path}") from None
    sub = parser._subparsers._group_actions[0].choices[argv[0]]
    opts = sub._option_string_actions
    extra = []
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{n}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if flag not in opts:
            raise CLIError(f"{path}:{n}: unknown option {key!r}")
        if opts[flag].nargs == 0:
            if val.lower() in ("1", "true", "yes"):
                extra.append(flag)
        else:
            extra += [flag, val]
    return [argv[0], *extra, *argv[1:]]


def _error(args_error_json: bool, code: int, exc: BaseException) -> int:
    kind = type(exc).__name__
    if args_error_json:
        print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    else:
        print(f"error ({kind}): {exc}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    want_json = "--error-json" in argv
    try:
        if argv and argv[0] in parser._subparsers._group_actions[0].choices:
            argv = _config_argv(parser, argv)
        args = parser.parse_args(argv)
        if args.command == "experiment":
            if args.name == "mitigation" and not args.teacher:
                raise CLIError("mitigation experiment needs --teacher")
            args.epochs = args.epochs or (10 if args.name == "ablation-contrast" else 15)
        return args.func(args)
    except (ReconstructionError, TrainingError, AlignError, FloatingPointError) as e:
        return _error(want_json, EXIT_NUMERIC, e)
    except (CLIError, art.ArtifactError, ConfigError, DatasetError, DecompositionError, AttributionError,
            ApplicationError, ValueError, KeyError) as e:
        return _error(want_json, EXIT_VALIDATION, e)


if __name__ == "__main__":
    sys.exit(main())
