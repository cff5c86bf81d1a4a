"""Walkthrough: train both ways, then explain single predictions.

Trains the toy convolutional classifier on the synthetic glyph dataset in
scratch mode (backbone + both heads together), post-fits a fresh ensemble
head on the frozen result, and then dissects one test image: heatmaps for
all three map kinds, a signed class-difference map with grouped region
accounting, and the fraction of the predicted-class probability retained
above an attention threshold.

Artifacts land in demos/out/train_and_explain/.

Run: python3 demos/02_train_and_explain.py  (under a minute)
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from cape.heads import class_difference_map, thresholded_contribution_summary
from cape.model import init_model, load_model, save_model
from cape.render import colorize, image_to_u8, signed_colorize, write_ppm
from cape.synth import SynthSpec, generate
from cape.tensor import bilinear_upsample
from cape.training import TrainConfig, train

OUT = Path(__file__).resolve().parent / "out" / "train_and_explain"


def banner(title: str) -> None:
    print(f"\n=== {title} ===")


def print_log(log, every: int = 3) -> None:
    for stats in log:
        if stats.epoch % every and stats.epoch != log[-1].epoch:
            continue
        print(
            f"  epoch {stats.epoch:>2}  ce {stats.ce:.4f}  kld {stats.kld:.5f}  "
            f"gate active {stats.kld_active_fraction:.2f}  "
            f"val acc vanilla/ensemble {stats.vanilla_val_acc:.3f}/"
            f"{stats.cape_val_acc:.3f}"
        )


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    spec = SynthSpec(seed=0)  # 3 classes, 32x32, 2000 train / 500 test
    dataset = generate(spec)
    train_split, test_split = dataset.splits["train"], dataset.splits["test"]
    print(f"dataset: {len(train_split)} train / {len(test_split)} test images, "
          f"{spec.image_size}x{spec.image_size}, glyph + shared-blob layout")

    banner("Scratch training (cross-entropy + gated distillation)")
    model = init_model(0, spec.num_classes, input_size=spec.image_size)
    result = train(model, train_split, TrainConfig.ts(), val_data=test_split)
    print_log(result.log, every=5)
    model.pretrained = True
    checkpoint = OUT / "checkpoint"
    save_model(model, checkpoint)

    banner("Post-fitting a fresh ensemble head on the frozen classifier")
    pf_model = load_model(checkpoint)
    result = train(pf_model, train_split, TrainConfig.pf(), val_data=test_split)
    print_log(result.log, every=3)
    print(f"  learned ensemble temperature: {pf_model.cape.temperature:.3f}")

    banner("Explaining one test image")
    image = test_split.images[0]
    label = int(test_split.labels[0])
    vanilla = pf_model.predict_vanilla(image)
    ensemble = pf_model.predict_cape(image)
    print(f"true class {label}; vanilla prediction "
          f"{np.array2string(vanilla, precision=4)}, ensemble "
          f"{np.array2string(ensemble, precision=4)}")
    write_ppm(OUT / "image.ppm", image_to_u8(image))
    top = int(np.argmax(ensemble))
    for kind in ("cam", "cape", "mu-cape"):
        emap = pf_model.explain(image, top, kind)
        name = f"{kind.replace('-', '_')}_class{top}.ppm"
        write_ppm(OUT / name, colorize(emap.values))
        print(f"  wrote {name}")

    banner("Class-difference accounting (top class vs runner-up)")
    order = np.argsort(-ensemble)
    c1, c2 = int(order[0]), int(order[1])
    contrib = pf_model.contributions(image)
    diff = class_difference_map(contrib, c1, c2)
    print(f"p(class {c1}) - p(class {c2}) = {ensemble[c1] - ensemble[c2]:+.4f}")
    for group in diff.groups:
        print(f"  {'+' if group.sign > 0 else '-'} group {group.rank}: "
              f"{group.total:+.4f} from {len(group.cells)} regions")
    print(f"  residual: {diff.residual:+.6f}")
    print(f"  groups + residual = {diff.net_difference():+.4f} (matches the gap)")
    upsampled = bilinear_upsample(diff.diff, (spec.image_size, spec.image_size))
    write_ppm(OUT / f"diff_{c1}_vs_{c2}.ppm", signed_colorize(upsampled))
    print(f"  wrote diff_{c1}_vs_{c2}.ppm (red favors class {c1}, blue class {c2})")

    banner("Attention threshold: what survives a 5%-of-peak cut")
    summary = thresholded_contribution_summary(contrib, top, fraction=0.05)
    print(f"class {top} probability: {summary.class_mass:.4f}")
    print(f"cut at {summary.threshold:.5f} (5% of the peak region)")
    print(f"kept {summary.kept_mass:.4f}, dropped {summary.dropped_mass:.4f} "
          f"-> retained ratio {summary.retained_ratio:.1%}")
    print(f"\nall artifacts in {OUT}")


if __name__ == "__main__":
    main()
