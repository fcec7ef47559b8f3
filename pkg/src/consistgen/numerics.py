"""Small numeric kernels shared by the rest of the package.

Everything here works on plain float64 numpy arrays. Masks are 1-D arrays of
0/1 values (any integer or bool dtype is accepted and normalized to uint8).
"""

from __future__ import annotations

import numpy as np

OTSU_BINS = 256
MASKED_LOGIT = -1e30


def as_bitmask(bits, length: int | None = None) -> np.ndarray:
    """Validate and normalize a 0/1 vector to a uint8 array."""
    arr = np.asarray(bits)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"bit mask must be a non-empty 1-D array, got shape {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    elif not np.all((arr == 0) | (arr == 1)):
        raise ValueError("bit mask entries must be exactly 0 or 1")
    arr = arr.astype(np.uint8)
    if length is not None and arr.size != length:
        raise ValueError(f"bit mask has length {arr.size}, expected {length}")
    return arr


def check_matrix(x, name: str = "array", cols: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if cols is not None and x.shape[1] != cols:
        raise ValueError(f"{name} must have {cols} columns, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def masked_softmax_rows(logits, mask) -> np.ndarray:
    """Row-wise softmax where columns with mask 0 receive exactly zero weight.

    ``mask`` is either one bit vector of length C shared by every row, or an
    R x C array of bits. This is the additive ``log M`` formulation: masked
    logits act as -inf, which here is enforced structurally instead of relying
    on ``exp`` underflow.
    """
    logits = check_matrix(logits, "logits")
    mask = np.asarray(mask)
    if mask.ndim == 1:
        mask = np.broadcast_to(as_bitmask(mask, logits.shape[1]), logits.shape)
    elif mask.shape != logits.shape:
        raise ValueError(f"mask shape {mask.shape} does not match logits {logits.shape}")
    keep = mask.astype(bool)
    if not np.all(keep.any(axis=1)):
        raise ValueError("fully masked attention row")

    gated = np.where(keep, logits, MASKED_LOGIT)
    row_max = gated.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(gated - row_max), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("degenerate feature vector")
    c = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, c))


def cosine_matrix(a, b) -> np.ndarray:
    """All-pairs cosine similarity between the rows of ``a`` and ``b``."""
    a = check_matrix(a, "a")
    b = check_matrix(b, "b", cols=a.shape[1])
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("degenerate feature vector")
    return (a / na[:, None]) @ (b / nb[:, None]).T


def histogram_bins(values, bins: int = OTSU_BINS) -> np.ndarray:
    """Bin index in [0, bins) of each value over an equal-width grid on [min, max]."""
    values = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros(values.size, dtype=np.int64)
    idx = np.floor((values - lo) / (hi - lo) * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def otsu_threshold(values, bins: int = OTSU_BINS) -> float:
    """Otsu threshold over a fixed-width histogram of ``values``.

    The split maximizing between-class variance is found with exact integer
    arithmetic over bin indices, so the result does not depend on summation
    order. Ties go to the lowest split. The returned threshold sits halfway
    between the largest value of the lower class and the smallest value of
    the upper class, so ``values > threshold`` reproduces the split exactly.
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValueError("otsu_threshold needs at least 2 values")
    if not np.all(np.isfinite(values)):
        raise ValueError("otsu_threshold got non-finite values")
    if values.min() == values.max():
        raise ValueError("unimodal input")

    idx = histogram_bins(values, bins)
    counts = np.bincount(idx, minlength=bins)
    n_total = int(values.size)
    s_total = int(np.dot(np.arange(bins), counts))

    best_k = None
    best_num, best_den = -1, 1
    n0 = 0
    s0 = 0
    for k in range(1, bins):
        n0 += int(counts[k - 1])
        s0 += (k - 1) * int(counts[k - 1])
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = s_total - s0
        # between-class variance up to the constant factor 1 / n_total**2
        num = (n1 * s0 - n0 * s1) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den

    lo_max = values[idx < best_k].max()
    hi_min = values[idx >= best_k].min()
    thr = lo_max + (hi_min - lo_max) / 2.0
    if thr >= hi_min:  # adjacent floats: midpoint rounded up
        thr = lo_max
    return float(thr)


def otsu_binarize(values, bins: int = OTSU_BINS) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    return (values > otsu_threshold(values, bins)).astype(np.uint8)


def lerp(a, b, w: float) -> np.ndarray:
    """(1 - w) * a + w * b, with exact endpoints."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"blend weight must lie in [0, 1], got {w}")
    if w == 0.0:
        return a.copy()
    if w == 1.0:
        return b.copy()
    return (1.0 - w) * a + w * b


def argmax_tiebreak_low(values) -> int:
    values = np.asarray(values)
    if values.size == 0:
        raise ValueError("argmax of empty array")
    # np.argmax returns the first occurrence of the maximum
    return int(np.argmax(values))
