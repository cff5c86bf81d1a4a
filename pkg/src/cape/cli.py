"""Command-line surface: dataset synthesis, training, explanation export,
class-difference accounting, metric evaluation, and report assembly.

Settings precedence per command: built-in defaults, then a JSON config
file (--config), then explicit flags. The CAPE_SEED environment variable
supplies the seed when neither flag nor config does. Exit codes:
0 success, 2 argument error, 3 I/O error, 4 runtime invariant violation.
"""
from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import heads as H
from . import metrics as M
from .model import (
    CapeModel,
    batch_features,
    batch_predict_cape,
    batch_predict_vanilla,
    init_model,
    load_model,
    save_model,
)
from .render import colorize, signed_colorize, write_ppm
from .runio import RunManifest, write_manifest
from .synth import SynthSpec, generate, load_split, save_dataset
from .tensor import bilinear_upsample, save_cpt1, softmax_axis
from .training import Schedule, TrainConfig, train, write_epoch_log

__all__ = ["main", "build_parser", "InvariantViolation", "ArgumentError"]

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_IO = 3
EXIT_INVARIANT = 4

DECOMPOSITION_TOL = 1e-9
EXPLAIN_KINDS = ("cam", "cape", "mu-cape")
ACCURACY_VARIANTS = ("vanilla", "naive", "off-the-shelf", "bootstrap")


class InvariantViolation(RuntimeError):
    """A runtime check on a mathematical contract failed."""


class ArgumentError(ValueError):
    """Invalid combination or value of arguments/config entries."""


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    config = json.loads(p.read_text())
    if not isinstance(config, dict):
        raise ArgumentError(f"config file must hold a JSON object: {p}")
    return config


def _setting(args, config: dict, name: str, default=None):
    """Flag if given, else config entry, else default."""
    value = getattr(args, name)
    if value is not None:
        return value
    return config.get(name, default)


def _resolve_seed(args, config: dict, default: int = 0) -> int:
    value = _setting(args, config, "seed")
    if value is None:
        value = os.environ.get("CAPE_SEED", default)
    return int(value)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _csv_list(value: str, allowed: tuple[str, ...], what: str) -> list[str]:
    items = [v.strip() for v in str(value).split(",") if v.strip()]
    if not items:
        raise ArgumentError(f"no {what} requested")
    for item in items:
        if item not in allowed:
            raise ArgumentError(f"unknown {what} {item!r}; choose from {', '.join(allowed)}")
    return items


def _load_image(args, config: dict):
    split_name = _setting(args, config, "split", "test")
    index = int(_setting(args, config, "index", 0))
    split = load_split(args.data, split_name)
    if not 0 <= index < len(split):
        raise ArgumentError(f"image index {index} out of range for split of {len(split)}")
    return split, split_name, index


def cmd_synth_data(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    spec = SynthSpec(
        num_classes=int(_setting(args, config, "classes", 3)),
        image_size=int(_setting(args, config, "image_size", 32)),
        train_count=int(_setting(args, config, "train_count", 2000)),
        test_count=int(_setting(args, config, "test_count", 500)),
        noise=float(_setting(args, config, "noise", 0.05)),
        seed=seed,
    )
    out = _out_dir(args)
    save_dataset(generate(spec), out)
    write_manifest(RunManifest("synth-data", seed, spec.to_dict()), out)
    print(f"synth-data: wrote {spec.train_count}+{spec.test_count} images to {out}")
    return EXIT_OK


def _train_config(args, config: dict, mode: str, seed: int) -> TrainConfig:
    overrides: dict = {"seed": seed}
    for key, cast in (
        ("epochs", int),
        ("batch_size", int),
        ("learning_rate", float),
        ("weight_decay", float),
        ("teacher_temperature", float),
        ("alpha", float),
        ("beta", float),
    ):
        value = _setting(args, config, key)
        if value is not None:
            overrides[key] = cast(value)
    for key in ("selective_kld", "ce_on_cape", "kld_reverse", "kld_t2_rescale"):
        value = _setting(args, config, key)
        if value is not None:
            overrides[key] = bool(value)
    schedule = config.get("schedule")
    if schedule is not None:
        overrides["schedule"] = Schedule(**schedule)
    factory = TrainConfig.ts if mode == "ts" else TrainConfig.pf
    try:
        return factory(**overrides)
    except ValueError as exc:
        raise ArgumentError(str(exc)) from exc


def cmd_train(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    mode = str(_setting(args, config, "mode", "ts")).lower()
    if mode not in ("ts", "pf"):
        raise ArgumentError(f"mode must be 'ts' or 'pf', got {mode!r}")
    train_config = _train_config(args, config, mode, seed)

    train_split = load_split(args.data, "train")
    try:
        val_split = load_split(args.data, "test")
    except ValueError:
        val_split = None
    num_classes = int(train_split.labels.max()) + 1

    pretrained = _setting(args, config, "pretrained")
    if mode == "pf":
        if pretrained is None:
            raise ArgumentError("PF mode requires --pretrained CHECKPOINT_DIR")
        model = load_model(pretrained)
    else:
        if pretrained is not None:
            model = load_model(pretrained)
        else:
            model = init_model(seed, num_classes, input_size=train_split.images.shape[1])

    result = train(model, train_split, train_config, val_data=val_split)
    model.pretrained = True

    out = _out_dir(args)
    save_model(model, out / "checkpoint")
    write_epoch_log(out / "epoch_log.csv", result.log)
    manifest_config = {"mode": mode, "train": asdict(train_config), "data": str(args.data)}
    write_manifest(RunManifest("train", seed, manifest_config), out)
    if result.log:
        last = result.log[-1]
        print(
            f"train[{mode}]: epoch {last.epoch} "
            f"vanilla_val={last.vanilla_val_acc:.4f} cape_val={last.cape_val_acc:.4f}"
        )
    return EXIT_OK


def _check_decomposition(contrib: H.VoxelContribution, probs: np.ndarray) -> None:
    mass = contrib.class_mass()
    if abs(float(contrib.values.sum()) - 1.0) > DECOMPOSITION_TOL:
        raise InvariantViolation("contribution cells do not sum to 1")
    if np.max(np.abs(mass - probs)) > DECOMPOSITION_TOL:
        raise InvariantViolation("per-class contribution mass does not match the prediction")


def cmd_explain(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    kinds = _csv_list(_setting(args, config, "kinds", "cam,cape,mu-cape"), EXPLAIN_KINDS, "kind")
    topk = int(_setting(args, config, "topk", 2))
    threshold = float(_setting(args, config, "threshold", 0.05))
    raw_temp = _setting(args, config, "temperature")
    if topk < 1:
        raise ArgumentError("topk must be at least 1")
    if not 0.0 < threshold < 1.0:
        raise ArgumentError("threshold must lie in (0, 1)")

    model = load_model(args.checkpoint)
    temperature = model.cape.temperature if raw_temp is None else float(raw_temp)
    split, split_name, index = _load_image(args, config)
    image = split.images[index]
    if topk > model.num_classes:
        raise ArgumentError(f"topk {topk} exceeds class count {model.num_classes}")

    vanilla_probs = model.predict_vanilla(image)
    cape_probs = model.predict_cape(image, temperature)
    contrib = model.contributions(image, temperature)
    _check_decomposition(contrib, cape_probs)

    out = _out_dir(args)
    overlays = []
    for kind in kinds:
        ranking = vanilla_probs if kind == "cam" else cape_probs
        top_classes = np.argsort(-ranking, kind="stable")[:topk]
        for c in (int(c) for c in top_classes):
            emap = model.explain(image, c, kind, temperature)
            stem = f"{kind.replace('-', '_')}_class{c}"
            write_ppm(out / f"{stem}.ppm", colorize(emap.values))
            save_cpt1(out / f"{stem}.cpt1", emap.values)
            raw = emap.raw
            keep = raw >= threshold * raw.max()
            entry = {
                "kind": kind,
                "class": c,
                "probability": float(ranking[c]),
                "threshold": threshold,
                "raw_total": float(raw.sum()),
                "kept_total": float(raw[keep].sum()),
                "regions": [
                    [int(i), int(j), float(raw[i, j])]
                    for i, j in np.argwhere(keep)
                ],
            }
            if kind == "cape":
                summary = H.thresholded_contribution_summary(contrib, c, threshold)
                if abs(entry["raw_total"] - float(ranking[c])) > DECOMPOSITION_TOL:
                    raise InvariantViolation(
                        "overlay attention values do not sum to the class probability"
                    )
                entry["retained_ratio"] = summary.retained_ratio
            overlays.append(entry)
    (out / "overlays.json").write_text(json.dumps(overlays, indent=2, sort_keys=True) + "\n")
    write_manifest(
        RunManifest(
            "explain",
            seed,
            {
                "checkpoint": str(args.checkpoint),
                "data": str(args.data),
                "split": split_name,
                "index": index,
                "kinds": kinds,
                "topk": topk,
                "threshold": threshold,
                "temperature": temperature,
            },
        ),
        out,
    )
    print(f"explain: wrote {len(overlays)} maps to {out}")
    return EXIT_OK


def cmd_diff(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    raw_temp = _setting(args, config, "temperature")
    group_size = int(_setting(args, config, "group_size", 5))
    max_groups = _setting(args, config, "max_groups")
    if group_size < 1:
        raise ArgumentError("group size must be at least 1")

    model = load_model(args.checkpoint)
    temperature = model.cape.temperature if raw_temp is None else float(raw_temp)
    split, split_name, index = _load_image(args, config)
    image = split.images[index]
    probs = model.predict_cape(image, temperature)
    order = np.argsort(-probs, kind="stable")
    c1 = int(_setting(args, config, "c1", int(order[0])))
    c2 = int(_setting(args, config, "c2", int(order[1])))
    if c1 == c2:
        raise ArgumentError("diff requires two distinct classes")
    if not (0 <= c1 < model.num_classes and 0 <= c2 < model.num_classes):
        raise ArgumentError(f"classes must lie in [0, {model.num_classes})")

    contrib = model.contributions(image, temperature)
    result = H.class_difference_map(
        contrib, c1, c2, group_size, None if max_groups is None else int(max_groups)
    )
    expected = float(probs[c1] - probs[c2])
    if abs(result.net_difference() - expected) > DECOMPOSITION_TOL:
        raise InvariantViolation("group sums plus residual do not match the class difference")

    out = _out_dir(args)
    upsampled = bilinear_upsample(result.diff, (image.shape[0], image.shape[1]))
    write_ppm(out / "diff.ppm", signed_colorize(upsampled))
    save_cpt1(out / "diff.cpt1", result.diff)
    payload = {
        "class_a": c1,
        "class_b": c2,
        "prob_a": float(probs[c1]),
        "prob_b": float(probs[c2]),
        "difference": expected,
        "residual": result.residual,
        "groups": [
            {
                "sign": g.sign,
                "rank": g.rank,
                "total": g.total,
                "cells": [[int(i), int(j)] for i, j in g.cells],
            }
            for g in result.groups
        ],
    }
    (out / "groups.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    write_manifest(
        RunManifest(
            "diff",
            seed,
            {
                "checkpoint": str(args.checkpoint),
                "data": str(args.data),
                "split": split_name,
                "index": index,
                "c1": c1,
                "c2": c2,
                "temperature": temperature,
                "group_size": group_size,
                "max_groups": max_groups,
            },
        ),
        out,
    )
    print(f"diff: class {c1} vs {c2}, difference {expected:+.6f}, wrote {out}")
    return EXIT_OK


def _method_for(model: CapeModel, kind: str, temperature: float) -> M.Method:
    def predict(image):
        if kind == "cam":
            return model.predict_vanilla(image)
        return model.predict_cape(image, temperature)

    def explain(image, c):
        return model.explain(image, c, kind, temperature).values

    return M.Method(kind, predict, explain)


def _accuracy_table(model: CapeModel, variants: list[str], images, labels) -> dict[str, float]:
    feats = batch_features(model, images)
    off_shelf = H.CapeHead.from_vanilla(model.vanilla, temperature=1.0)
    table: dict[str, float] = {}
    for variant in variants:
        if variant == "vanilla":
            probs = H.batch_vanilla_forward(feats, model.vanilla)
        elif variant == "naive":
            maps = H.batch_shifted_maps(feats, model.vanilla)
            probs = softmax_axis(maps, axes=3).mean(axis=(1, 2))
        elif variant == "off-the-shelf":
            probs = H.batch_cape_forward(
                H.batch_shifted_maps(feats, off_shelf), off_shelf.temperature
            )
        else:
            probs = H.batch_cape_forward(
                H.batch_shifted_maps(feats, model.cape), model.cape.temperature
            )
        table[variant] = 100.0 * float((probs.argmax(axis=1) == labels).mean())
    return table


def cmd_evaluate(args) -> int:
    config = _load_config(args.config)
    seed = _resolve_seed(args, config)
    split_name = _setting(args, config, "split", "test")
    raw_temp = _setting(args, config, "temperature")
    methods = _csv_list(
        _setting(args, config, "methods", "cam,cape,mu-cape"), EXPLAIN_KINDS, "method"
    )
    variants = _csv_list(
        _setting(args, config, "variants", "vanilla,naive,off-the-shelf,bootstrap"),
        ACCURACY_VARIANTS,
        "variant",
    )
    limit = _setting(args, config, "limit")

    model = load_model(args.checkpoint)
    temperature = model.cape.temperature if raw_temp is None else float(raw_temp)
    split = load_split(args.data, split_name)
    images, labels = split.images, split.labels
    glyph_masks, mutual_masks = split.glyph_masks, split.mutual_masks
    if limit is not None:
        n = int(limit)
        if n < 1:
            raise ArgumentError("limit must be at least 1")
        images, labels = images[:n], labels[:n]
        glyph_masks, mutual_masks = glyph_masks[:n], mutual_masks[:n]

    out = _out_dir(args)
    dataset_id = f"{Path(args.data).name}/{split_name}"
    evaluations = []
    placement = {}
    for kind in methods:
        method = _method_for(model, kind, temperature)
        evaluations.append(M.evaluate_method(method, images))
        glyph_fracs = []
        mutual_fracs = []
        for image, gmask, mmask in zip(images, glyph_masks, mutual_masks):
            c = int(np.argmax(method.predict(image)))
            emap = method.explain(image, c)
            glyph_fracs.append(M.attention_mass_fraction(emap, gmask))
            mutual_fracs.append(M.attention_mass_fraction(emap, mmask))
        placement[kind] = {
            "glyph_mass_fraction": float(np.mean(glyph_fracs)),
            "mutual_mass_fraction": float(np.mean(mutual_fracs)),
        }
    report = M.build_report(dataset_id, evaluations)
    M.report_to_csv(report, out / "metrics_report.csv")
    M.report_to_json(report, out / "metrics_report.json")

    accuracy = _accuracy_table(model, variants, images, labels)
    (out / "accuracy.json").write_text(json.dumps(accuracy, indent=2, sort_keys=True) + "\n")
    with (out / "accuracy.csv").open("w", newline="") as fh:
        fh.write("Variant,Accuracy\n")
        for name, value in accuracy.items():
            fh.write(f"{name},{value!r}\n")
    (out / "placement.json").write_text(json.dumps(placement, indent=2, sort_keys=True) + "\n")
    write_manifest(
        RunManifest(
            "evaluate",
            seed,
            {
                "checkpoint": str(args.checkpoint),
                "data": str(args.data),
                "split": split_name,
                "methods": methods,
                "variants": variants,
                "temperature": temperature,
                "limit": None if limit is None else int(limit),
            },
        ),
        out,
    )
    for row in report.rows:
        print(
            f"evaluate[{row.method}]: AD={row.mean_ad:.2f} IC={row.ic:.2f} "
            f"ADD={row.mean_add:.2f} ADCC={row.mean_adcc:.2f} mIoU={row.miou:.2f} "
            f"BC={row.borda}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    runs = [Path(r) for r in args.runs]
    missing = [str(r) for r in runs if not r.is_dir()]
    if missing:
        raise FileNotFoundError(f"missing run directories: {', '.join(missing)}")
    out = _out_dir(args)
    gallery = out / "gallery"
    gallery.mkdir(exist_ok=True)

    merged: dict[str, dict] = {}
    rows = []
    for run in runs:
        name = run.name
        report_path = run / "metrics_report.json"
        if report_path.is_file():
            payload = json.loads(report_path.read_text())
            merged[name] = payload
            for row in payload.get("methods", []):
                rows.append([name, row["method"], row["AD"], row["IC"], row["ADD"],
                             row["ADCC"], row["mIoU"], row["BC"]])
        accuracy_path = run / "accuracy.json"
        if accuracy_path.is_file():
            merged.setdefault(name, {})
            merged[name]["accuracy"] = json.loads(accuracy_path.read_text())
        for ppm in sorted(run.glob("*.ppm")):
            shutil.copyfile(ppm, gallery / f"{name}_{ppm.name}")

    with (out / "consolidated.csv").open("w", newline="") as fh:
        fh.write("Run,Method,AD,IC,ADD,ADCC,mIoU,BC\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    (out / "consolidated.json").write_text(json.dumps(merged, indent=2, sort_keys=True) + "\n")
    write_manifest(RunManifest("report", 0, {"runs": [str(r) for r in runs]}), out)
    print(f"report: merged {len(runs)} runs into {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cape",
        description="Probabilistic ensemble explanations for softmax classifiers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON settings file; flags override its entries")
        p.add_argument("--seed", type=int, help="seed (falls back to CAPE_SEED, then 0)")

    p = sub.add_parser("synth-data", help="generate the synthetic glyph dataset")
    add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", type=int, dest="classes")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--train", type=int, dest="train_count")
    p.add_argument("--test", type=int, dest="test_count")
    p.add_argument("--noise", type=float)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train vanilla + ensemble heads")
    add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--mode", choices=("ts", "pf"))
    p.add_argument("--pretrained", help="checkpoint directory to start from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="learning_rate")
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--teacher-temperature", type=float, dest="teacher_temperature")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument(
        "--selective-kld",
        action=argparse.BooleanOptionalAction,
        dest="selective_kld",
        default=None,
    )
    p.add_argument(
        "--ce-on-cape", action=argparse.BooleanOptionalAction, dest="ce_on_cape", default=None
    )
    p.add_argument(
        "--kld-reverse", action=argparse.BooleanOptionalAction, dest="kld_reverse", default=None
    )
    p.add_argument(
        "--kld-t2-rescale",
        action=argparse.BooleanOptionalAction,
        dest="kld_t2_rescale",
        default=None,
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="export explanation heatmaps and overlays")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--index", type=int)
    p.add_argument("--kinds")
    p.add_argument("--topk", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("diff", help="signed class-difference map with group accounting")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--index", type=int)
    p.add_argument("--c1", type=int)
    p.add_argument("--c2", type=int)
    p.add_argument("--group-size", type=int, dest="group_size")
    p.add_argument("--max-groups", type=int, dest="max_groups")
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_diff)

    p = sub.add_parser("evaluate", help="interpretability metrics and accuracy table")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split")
    p.add_argument("--methods")
    p.add_argument("--variants")
    p.add_argument("--limit", type=int)
    p.add_argument("--temperature", type=float)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge evaluation runs into one table + gallery")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--runs", nargs="+", required=True, help="run directories to merge")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ArgumentError as exc:
        print(f"cape: argument error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT
    except InvariantViolation as exc:
        print(f"cape: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except FileNotFoundError as exc:
        print(f"cape: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"cape: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"cape: argument error: {exc}", file=sys.stderr)
        return EXIT_ARGUMENT


if __name__ == "__main__":
    raise SystemExit(main())
