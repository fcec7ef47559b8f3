"""Subject masks from accumulated cross-attention maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import as_bitmask, otsu_threshold

FALLBACK_FRACTION = 0.1


@dataclass(frozen=True)
class SubjectMask:
    bits: np.ndarray
    heat: np.ndarray
    fallback: bool = False

    def __len__(self) -> int:
        return int(self.bits.size)


@dataclass
class CrossAttnStore:
    """Cross-attention maps per (image, subject), keyed by (step, layer).

    Means are taken over keys in sorted order, so the result depends only on
    what was recorded and not on recording order.
    """

    n_patches: int
    maps: dict[tuple[int, int], dict[tuple[int, int], np.ndarray]] = field(default_factory=dict)

    def record_maps(self, image: int, step: int, layer: int, maps) -> None:
        for subject, m in enumerate(maps):
            m = np.asarray(m, dtype=np.float64)
            if m.shape != (self.n_patches,):
                raise ValueError(f"map has shape {m.shape}, expected ({self.n_patches},)")
            if np.any(m < 0) or not np.all(np.isfinite(m)):
                raise ValueError("cross-attention maps must be finite and nonnegative")
            self.maps.setdefault((image, subject), {})[(step, layer)] = m.copy()

    def count(self, image: int, subject: int) -> int:
        return len(self.maps.get((image, subject), {}))

    def mean_map(self, image: int, subject: int) -> np.ndarray:
        entries = self.maps.get((image, subject))
        if not entries:
            raise ValueError("mask requested before any denoising step")
        acc = np.zeros(self.n_patches)
        for key in sorted(entries):
            acc = acc + entries[key]
        return acc / len(entries)


def fallback_bits(heat: np.ndarray) -> np.ndarray:
    """Top-k heat patches, k = max(1, ceil(0.1 * P)); ties broken by lowest index."""
    k = max(1, math.ceil(FALLBACK_FRACTION * heat.size))
    order = np.lexsort((np.arange(heat.size), -heat))
    bits = np.zeros(heat.size, dtype=np.uint8)
    bits[order[:k]] = 1
    return bits


def mask_from_heat(heat) -> SubjectMask:
    heat = np.asarray(heat, dtype=np.float64)
    try:
        bits = (heat > otsu_threshold(heat)).astype(np.uint8)
    except ValueError:
        bits = None
    if bits is None or not bits.any():
        return SubjectMask(fallback_bits(heat), heat, fallback=True)
    return SubjectMask(bits, heat)


def compute_mask(store: CrossAttnStore, image: int, subject: int) -> SubjectMask:
    return mask_from_heat(store.mean_map(image, subject))


def union_masks(masks) -> np.ndarray:
    masks = list(masks)
    if not masks:
        raise ValueError("union of an empty list of masks")
    bits = [as_bitmask(m.bits if isinstance(m, SubjectMask) else m) for m in masks]
    n = bits[0].size
    out = np.zeros(n, dtype=np.uint8)
    for b in bits:
        if b.size != n:
            raise ValueError("masks have different lengths")
        out |= b
    return out


def subject_token_maps(cross_attn: np.ndarray, subject_positions) -> list[np.ndarray]:
    """Per-subject P-length maps; multi-token subjects average their token columns."""
    return [cross_attn[:, list(pos)].mean(axis=1) for pos in subject_positions]


def write_pgm(path, bits, side: int) -> None:
    bits = as_bitmask(bits, side * side)
    data = (bits.reshape(side, side) * 255).astype(np.uint8)
    header = f"P5\n{side} {side}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=w * h)
    return (data > 127).astype(np.uint8)
