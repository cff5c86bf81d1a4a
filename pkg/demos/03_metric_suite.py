"""Walkthrough: scoring explanation maps, and ranking methods fairly.

Trains a quick model, evaluates the three map kinds on the held-out split
with the confidence-change metric family (average drop, average increase,
drop-in-deletion, their harmonic composite) plus top-2 overlap, and
aggregates the columns into a single rank score. The same aggregation
routine is then replayed over the shipped reference tables to show it
reproduces their published rank columns integer-exactly.

Run: python3 demos/03_metric_suite.py  (under a minute)
"""
from __future__ import annotations

import numpy as np

from cape.metrics import (
    HIGHER_BETTER,
    METRIC_COLUMNS,
    Method,
    attention_mass_fraction,
    borda_count,
    build_report,
    evaluate_method,
    load_published_rankings,
)
from cape.model import init_model
from cape.synth import SynthSpec, generate
from cape.training import TrainConfig, train


def banner(title: str) -> None:
    print(f"\n=== {title} ===")


def explain_method(model, kind: str) -> Method:
    def predict(image):
        if kind == "cam":
            return model.predict_vanilla(image)
        return model.predict_cape(image)

    def explain(image, class_index):
        return model.explain(image, class_index, kind).values

    return Method(kind, predict, explain)


def main() -> None:
    spec = SynthSpec(seed=1)  # 3 classes, 32x32, 2000 train / 500 test
    dataset = generate(spec)
    model = init_model(1, spec.num_classes, input_size=spec.image_size)
    print("training the classifier from scratch (the ensemble head rides along)…")
    train(model, dataset.splits["train"], TrainConfig.ts(),
          val_data=dataset.splits["test"])
    test = dataset.splits["test"]
    sample = slice(0, 100)  # a 100-image slice keeps the walkthrough quick

    banner("Metric table on 100 held-out images")
    evaluations = [
        evaluate_method(explain_method(model, kind), test.images[sample])
        for kind in ("cam", "cape", "mu-cape")
    ]
    report = build_report("demo/test", evaluations)
    header = f"{'method':<10}" + "".join(f"{c:>8}" for c in METRIC_COLUMNS) + f"{'BC':>5}"
    print(header)
    for row in report.rows:
        cells = "".join(f"{v:8.2f}" for v in row.metric_row())
        print(f"{row.method:<10}{cells}{row.borda:>5}")
    print("(AD and mIoU reward lower values; the other columns reward higher.)")
    print("note the low top-2 overlap of the exact-decomposition maps: the two")
    print("classes' probability mass genuinely lives in different regions.")

    banner("Where the attention mass lands")
    for kind in ("cam", "cape"):
        method = explain_method(model, kind)
        glyph, mutual = [], []
        for image, gmask, mmask in zip(test.images[sample], test.glyph_masks[sample],
                                       test.mutual_masks[sample]):
            c = int(np.argmax(method.predict(image)))
            emap = method.explain(image, c)
            glyph.append(attention_mass_fraction(emap, gmask))
            mutual.append(attention_mass_fraction(emap, mmask))
        print(f"  {kind:<6} mean mass on the class glyph {np.mean(glyph):.3f}, "
              f"on the shared blob {np.mean(mutual):.3f}")
    print("the exact-decomposition maps concentrate their mass on the class-")
    print("discriminative glyph — the regions that actually decide the prediction.")

    banner("Rank aggregation against the shipped reference tables")
    payload = load_published_rankings()
    flags = [HIGHER_BETTER[c] for c in payload["columns"]]
    for name, block in payload["datasets"].items():
        got = borda_count(np.asarray(block["scores"], dtype=np.float64), flags)
        ok = got.tolist() == block["expected_bc"]
        print(f"  {name}: reproduced rank column exactly: {ok}")
        leaders = sorted(
            zip(block["methods"], got.tolist()), key=lambda mv: -mv[1]
        )[:3]
        print("    top three: " + ", ".join(f"{m} ({v})" for m, v in leaders))


if __name__ == "__main__":
    main()
