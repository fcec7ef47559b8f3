"""Layout-diversity and subject-consistency scores over feature banks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .injection import FeatureBank, build_correspondence
from .numerics import as_bitmask


def grid_coords(n_patches: int) -> np.ndarray:
    side = math.isqrt(n_patches)
    if side * side != n_patches:
        raise ValueError(f"{n_patches} patches do not form a square grid")
    rows, cols = np.divmod(np.arange(n_patches), side)
    return np.stack([rows, cols], axis=1).astype(np.float64)


def _patch_set(masks, image: int, n_patches: int) -> np.ndarray:
    if masks is None:
        return np.arange(n_patches)
    bits = as_bitmask(getattr(masks[image], "bits", masks[image]), n_patches)
    idx = np.flatnonzero(bits)
    if idx.size == 0:
        raise ValueError(f"empty mask for image {image}")
    return idx


def _ordered_pairs(bank: FeatureBank):
    images = bank.images
    if len(images) < 2:
        raise ValueError("need at least 2 images")
    return [(t, s) for t in images for s in images if t != s]


@dataclass
class DiversityReport:
    pairs: dict[tuple[int, int], float]
    aggregate: float
    masked: bool
    baseline: float | None = None

    @property
    def normalized(self) -> float:
        if self.baseline is None:
            return 1.0 if self.aggregate > 0 else float("nan")
        if self.baseline <= 0:
            raise ValueError("normalized diversity undefined for a zero baseline")
        return self.aggregate / self.baseline

    def with_baseline(self, baseline: "DiversityReport | float") -> "DiversityReport":
        value = baseline.aggregate if isinstance(baseline, DiversityReport) else float(baseline)
        return DiversityReport(dict(self.pairs), self.aggregate, self.masked, value)


@dataclass
class ConsistencyReport:
    pairs: dict[tuple[int, int], float]
    aggregate: float


def displacement_diversity(bank: FeatureBank, masks: Mapping | None = None) -> DiversityReport:
    """Mean grid distance between each patch and its correspondence in other images.

    With ``masks`` the average runs over each target's masked patches only.
    """
    coords = grid_coords(bank.n_patches)
    pairs = {}
    for t, s in _ordered_pairs(bank):
        patches = _patch_set(masks, t, bank.n_patches)
        corr = build_correspondence(bank, t, s)
        d = coords[patches] - coords[corr.indices[patches]]
        pairs[(t, s)] = float(np.sqrt((d * d).sum(axis=1)).mean())
    return DiversityReport(pairs, float(np.mean(list(pairs.values()))), masks is not None)


def consistency_proxy(bank: FeatureBank, masks: Mapping) -> ConsistencyReport:
    """Mean matched cosine similarity over each target's subject patches."""
    if masks is None:
        raise ValueError("consistency proxy needs subject masks")
    pairs = {}
    for t, s in _ordered_pairs(bank):
        patches = _patch_set(masks, t, bank.n_patches)
        corr = build_correspondence(bank, t, s)
        pairs[(t, s)] = float(corr.scores[patches].mean())
    return ConsistencyReport(pairs, float(np.mean(list(pairs.values()))))


@dataclass
class EvalSummary:
    consistency: ConsistencyReport
    diversity: DiversityReport
    diversity_masked: DiversityReport
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "consistency": self.consistency.aggregate,
            "diversity": self.diversity.aggregate,
            "diversity_normalized": self.diversity.normalized,
            "diversity_masked": self.diversity_masked.aggregate,
            "diversity_masked_normalized": self.diversity_masked.normalized,
        }
        out.update(self.extra)
        return out


def write_pairs_csv(path, summary: EvalSummary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target", "source", "consistency", "displacement", "displacement_masked"])
        for key in sorted(summary.consistency.pairs):
            w.writerow([key[0], key[1], repr(summary.consistency.pairs[key]),
                        repr(summary.diversity.pairs[key]), repr(summary.diversity_masked.pairs[key])])


def write_summary_json(path, summary: EvalSummary) -> None:
    Path(path).write_text(json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")


def write_scatter_svg(path, points: list[tuple[str, float, float]]) -> None:
    """Consistency (y) against normalized diversity (x), one labelled point per run."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, div, cons in points:
        ax.scatter([div], [cons])
        ax.annotate(label, (div, cons), fontsize=7, xytext=(3, 3), textcoords="offset points")
    ax.set_xlabel("layout diversity (normalized)")
    ax.set_ylabel("subject consistency proxy")
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "consistgen"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
