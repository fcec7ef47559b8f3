"""Subject-driven shared self-attention, attention dropout and query blending."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import as_bitmask, check_matrix, lerp, masked_softmax_rows


@dataclass(frozen=True)
class NuSchedule:
    n_blend_steps: int = 5
    nu_start: float = 0.9
    nu_end: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.nu_end <= self.nu_start <= 1.0:
            raise ValueError("need 0 <= nu_end <= nu_start <= 1")
        if self.n_blend_steps < 0:
            raise ValueError("n_blend_steps must be >= 0")

    def nu(self, step_index: int) -> float:
        """Blend weight toward the vanilla queries at a sampler step."""
        if step_index < 0:
            raise ValueError("step_index must be >= 0")
        if step_index >= self.n_blend_steps:
            return 0.0
        if self.n_blend_steps == 1:
            return self.nu_start
        frac = step_index / (self.n_blend_steps - 1)
        return self.nu_start + (self.nu_end - self.nu_start) * frac


@dataclass
class SharedKVBundle:
    source_images: list[int]
    K_plus: np.ndarray
    V_plus: np.ndarray
    masks: list[np.ndarray]

    @classmethod
    def assemble(cls, sources: Sequence[int], keys, values, masks) -> "SharedKVBundle":
        """Stack per-image K/V blocks in ``sources`` order.

        ``keys``/``values`` map image index to its P x d_k / P x d_v block.
        """
        sources = list(sources)
        if not sources:
            raise ValueError("bundle needs at least one source image")
        k_plus = np.concatenate([keys[s] for s in sources], axis=0)
        v_plus = np.concatenate([values[s] for s in sources], axis=0)
        p = keys[sources[0]].shape[0]
        masks = [as_bitmask(m, p) for m in masks]
        if len(masks) != len(sources):
            raise ValueError("one mask per source image required")
        return cls(sources, k_plus, v_plus, masks)


def dropout_mask(mask, p: float, rng: np.random.Generator) -> np.ndarray:
    """Zero each set bit independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1], got {p}")
    bits = as_bitmask(getattr(mask, "bits", mask))
    keep = rng.random(bits.size) >= p
    return (bits & keep).astype(np.uint8)


def dropout_rng(run_seed: int, step: int, target: int, source: int) -> np.random.Generator:
    """Independent stream per (step, target, source); unaffected by other images."""
    return np.random.default_rng(np.random.SeedSequence([run_seed, step, target, source]))


def build_extended_mask(self_image: int, query_P: int, sources) -> np.ndarray:
    """Concatenate per-source blocks; the query image's own block is all ones.

    ``sources`` is an ordered list of ``(image_index, bits)``. For the query
    image's own entry ``bits`` may be None or all ones.
    """
    blocks = []
    for image, bits in sources:
        if image == self_image:
            if bits is not None and not np.all(as_bitmask(bits, query_P) == 1):
                raise ValueError("self block of the extended mask must be all ones")
            blocks.append(np.ones(query_P, dtype=np.uint8))
        else:
            blocks.append(as_bitmask(bits, query_P))
    if not blocks:
        raise ValueError("extended mask needs at least one source")
    return np.concatenate(blocks)


def sdsa(Q_i, bundle: SharedKVBundle, M_plus_i) -> np.ndarray:
    """Masked extended attention: softmax(Q K+^T / sqrt(d_k) + log M+) V+."""
    q = check_matrix(Q_i, "Q")
    k = check_matrix(bundle.K_plus, "K_plus", cols=q.shape[1])
    v = check_matrix(bundle.V_plus, "V_plus")
    if v.shape[0] != k.shape[0]:
        raise ValueError("K_plus and V_plus row counts differ")
    m = as_bitmask(M_plus_i, k.shape[0])
    a = masked_softmax_rows(q @ k.T / math.sqrt(q.shape[1]), m)
    return a @ v


def attention_weights(Q_i, bundle: SharedKVBundle, M_plus_i) -> np.ndarray:
    q = check_matrix(Q_i, "Q")
    m = as_bitmask(M_plus_i, bundle.K_plus.shape[0])
    return masked_softmax_rows(q @ bundle.K_plus.T / math.sqrt(q.shape[1]), m)


def blend_queries(q_sdsa, q_vanilla, step_index: int, sched: NuSchedule) -> np.ndarray:
    """(1 - nu) * Q_sdsa + nu * Q_vanilla with nu taken from the schedule."""
    return lerp(q_sdsa, q_vanilla, sched.nu(step_index))
