"""Walkthrough: one prediction, split exactly into per-region probabilities.

A softmax classifier head normally reports a single distribution over
classes. The ensemble head here reads the same activation maps as a
committee of image regions: every spatial cell casts a class vote
(a softmax over that cell's logits) weighted by the cell's saliency
(a softmax over space). The product is a 3-d table of nonnegative cells
that sums to one, and whose per-class totals reproduce the prediction
bit for bit — a probability budget, not a heuristic heatmap.

Run: python3 demos/01_exact_decomposition.py
"""
from __future__ import annotations

import numpy as np

from cape.heads import (
    ContributionForm,
    VanillaHead,
    activation_maps,
    cape_forward,
    naive_aggregate,
    non_additivity_witness,
    pixel_class_dist,
    saliency_weights,
    vanilla_forward,
    voxel_contributions,
)


def banner(title: str) -> None:
    print(f"\n=== {title} ===")


def main() -> None:
    rng = np.random.default_rng(7)
    features = rng.normal(0.0, 1.5, size=(3, 3, 5))  # a 3x3 grid of 5 channels
    head = VanillaHead(
        rng.normal(0.0, 1.0, size=(5, 4)), rng.normal(0.0, 0.5, size=4)
    )
    maps = activation_maps(features, head)

    banner("The two softmax factors")
    dist = pixel_class_dist(maps)
    weights = saliency_weights(maps)
    print("per-region class distributions (each row of cells sums to 1):")
    for i in range(3):
        row = "  ".join(
            "[" + " ".join(f"{p:.2f}" for p in dist[i, j]) + "]" for j in range(3)
        )
        print(f"  {row}")
    print("region saliency weights (sum to 1 over the whole grid):")
    for i in range(3):
        print("  " + "  ".join(f"{weights[i, j]:.3f}" for j in range(3)))

    banner("Exact decomposition")
    contrib = voxel_contributions(maps)
    prediction = cape_forward(maps)
    print(f"ensemble prediction:        {np.array2string(prediction, precision=6)}")
    print(f"per-class contribution sum: "
          f"{np.array2string(contrib.class_mass(), precision=6)}")
    print(f"total contribution mass:    {contrib.values.sum():.15f}")
    print(f"largest class-sum gap:      "
          f"{np.max(np.abs(contrib.class_mass() - prediction)):.2e}")
    print("spatial share of the prediction per region (%):")
    spatial = contrib.values.sum(axis=2) * 100.0
    for i in range(3):
        print("  " + "  ".join(f"{spatial[i, j]:6.2f}" for j in range(3)))

    banner("Two algebraic forms, one result")
    worst = 0.0
    for temperature in (0.5, 1.0, 2.0, 4.0):
        factored = voxel_contributions(maps, temperature, ContributionForm.FACTORED)
        merged = voxel_contributions(maps, temperature, ContributionForm.SINGLE_SOFTMAX)
        gap = float(np.max(np.abs(factored.values - merged.values)))
        worst = max(worst, gap)
        print(f"  temperature {temperature:>3}: factored vs single-softmax "
              f"max gap {gap:.2e}")
    print(f"  worst over all temperatures: {worst:.2e}")

    banner("Why averaging logits is a different operation")
    shifted, softmax_of_mean, mean_of_softmax = non_additivity_witness()
    print(f"witness maps (1x2 regions, 2 classes): {shifted.tolist()}")
    print(f"softmax of the mean logits:  {np.array2string(softmax_of_mean, precision=4)}")
    print(f"mean of per-region softmax:  {np.array2string(mean_of_softmax, precision=4)}")
    print(f"gap: {np.max(np.abs(softmax_of_mean - mean_of_softmax)):.3f} "
          "(the ensemble is a genuinely different aggregation)")

    banner("Relation to the plain head")
    print(f"plain pooled prediction: "
          f"{np.array2string(vanilla_forward(features, head), precision=4)}")
    print(f"uniform-weight ensemble: "
          f"{np.array2string(naive_aggregate(maps), precision=4)}")
    print("the saliency-weighted ensemble is a third aggregation, and unlike")
    print("either of these it hands every region an exact probability share.")


if __name__ == "__main__":
    main()
