"""Dense patch correspondence and cross-image feature injection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .numerics import as_bitmask, check_matrix, lerp, otsu_threshold


def normalized_rows(features) -> np.ndarray:
    f = check_matrix(features, "features")
    norms = np.sqrt((f * f).sum(axis=1))
    if np.any(norms == 0.0):
        raise ValueError("degenerate feature vector")
    return f / norms[:, None]


def cosine_table(target, source) -> np.ndarray:
    """P_t x P_s cosine similarities.

    Computed as an elementwise product reduced along features, so equal rows
    always produce bit-equal scores; that keeps tie-breaking exact.
    """
    a = normalized_rows(target)
    b = normalized_rows(source)
    if a.shape[1] != b.shape[1]:
        raise ValueError("feature widths differ")
    return np.clip((a[:, None, :] * b[None, :, :]).sum(axis=2), -1.0, 1.0)


@dataclass
class FeatureBank:
    features: dict[int, np.ndarray]

    def __post_init__(self):
        if not self.features:
            raise ValueError("empty feature bank")
        self.features = {int(i): np.array(f, dtype=np.float64) for i, f in self.features.items()}
        shapes = {f.shape for f in self.features.values()}
        if len(shapes) > 1:
            raise ValueError(f"feature maps disagree in shape: {shapes}")
        for f in self.features.values():
            f.flags.writeable = False

    def __getitem__(self, image: int) -> np.ndarray:
        return self.features[image]

    @property
    def images(self) -> list[int]:
        return sorted(self.features)

    @property
    def n_patches(self) -> int:
        return next(iter(self.features.values())).shape[0]


@dataclass
class CorrespondenceMap:
    target: int
    source: int
    indices: np.ndarray
    scores: np.ndarray


def build_correspondence(bank: FeatureBank, target: int, source: int) -> CorrespondenceMap:
    """Most similar source patch for every target patch; lowest index on ties."""
    if target == source:
        raise ValueError("correspondence needs two distinct images")
    sim = cosine_table(bank[target], bank[source])
    idx = np.argmax(sim, axis=1)
    return CorrespondenceMap(target, source, idx, sim[np.arange(sim.shape[0]), idx])


@dataclass
class InjectionPlan:
    target: int
    patches: np.ndarray       # masked target patches, ascending
    src_image: np.ndarray
    src_patch: np.ndarray
    score: np.ndarray
    threshold: float
    kept: np.ndarray          # bool per entry

    @property
    def kept_patches(self) -> np.ndarray:
        return self.patches[self.kept]


def select_sources(
    bank: FeatureBank,
    target: int,
    mask,
    sources: Sequence[int],
    correspondences: Mapping[int, CorrespondenceMap] | None = None,
) -> InjectionPlan:
    """Pick, for each masked patch, the best-matching patch over all sources.

    Scores are gated by an Otsu threshold over the winning scores; if the
    scores cannot be split every entry is kept.
    """
    sources = sorted(set(sources))
    if not sources:
        raise ValueError("feature injection needs at least one source image")
    if target in sources:
        raise ValueError("a target image cannot be its own injection source")
    bits = as_bitmask(getattr(mask, "bits", mask), bank.n_patches)
    if correspondences is None:
        correspondences = {s: build_correspondence(bank, target, s) for s in sources}

    patches = np.flatnonzero(bits)
    best_img = np.full(patches.size, sources[0])
    best_patch = correspondences[sources[0]].indices[patches].copy()
    best_score = correspondences[sources[0]].scores[patches].copy()
    for s in sources[1:]:
        cand = correspondences[s].scores[patches]
        better = cand > best_score
        best_img[better] = s
        best_patch[better] = correspondences[s].indices[patches][better]
        best_score[better] = cand[better]

    try:
        threshold = otsu_threshold(best_score)
    except ValueError:
        threshold = float("-inf")
    return InjectionPlan(target, patches, best_img, best_patch, best_score, threshold,
                         best_score > threshold)


def inject(x_out_target, x_out_sources: Mapping[int, np.ndarray], plan: InjectionPlan,
           alpha: float) -> np.ndarray:
    """Blend kept target patches toward their source patches; others untouched."""
    x = check_matrix(x_out_target, "x_out_target")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    out = x.copy()
    rows = plan.kept_patches
    if alpha == 0.0 or rows.size == 0:
        return out
    src = np.empty((rows.size, x.shape[1]))
    for j, (img, p) in enumerate(zip(plan.src_image[plan.kept], plan.src_patch[plan.kept])):
        s = x_out_sources[int(img)]
        if s.shape != x.shape:
            raise ValueError(f"source {img} x_out shape {s.shape} != target {x.shape}")
        src[j] = s[p]
    out[rows] = lerp(x[rows], src, alpha)
    return out


def write_correspondence_csv(path, plans: Sequence[InjectionPlan]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["target_image", "target_patch", "source_image", "source_patch", "score", "kept"])
        for plan in plans:
            for row in zip(plan.patches, plan.src_image, plan.src_patch, plan.score, plan.kept):
                w.writerow([plan.target, int(row[0]), int(row[1]), int(row[2]),
                            repr(float(row[3])), int(row[4])])
