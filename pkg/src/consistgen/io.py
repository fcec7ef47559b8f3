"""On-disk formats: CSTL latent files, digests, previews and manifests."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

LATENT_MAGIC = b"CSTL"
LATENT_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, P, d -> 16 bytes

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def latent_bytes(z) -> bytes:
    return np.ascontiguousarray(z, dtype="<f8").tobytes()


def latent_digest(z) -> str:
    return f"{fnv1a64(latent_bytes(z)):016x}"


def write_latent(path, z) -> None:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("latent must be P x d")
    Path(path).write_bytes(_HEADER.pack(LATENT_MAGIC, LATENT_VERSION, *z.shape) + latent_bytes(z))


def read_latent(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated latent file")
    magic, version, p, d = _HEADER.unpack_from(raw)
    if magic != LATENT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != LATENT_VERSION:
        raise ValueError(f"{path}: unsupported latent version {version}")
    body = raw[_HEADER.size:]
    if len(body) != p * d * 8:
        raise ValueError(f"{path}: expected {p * d * 8} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f8").reshape(p, d).astype(np.float64)


def preview_rgb(z, side: int, seed: int = 0) -> np.ndarray:
    """Fixed random linear map latent -> RGB, squashed to uint8."""
    z = np.asarray(z, dtype=np.float64)
    proj = np.random.default_rng(seed).standard_normal((z.shape[1], 3)) / np.sqrt(z.shape[1])
    rgb = np.tanh(z @ proj)
    return np.round((rgb + 1.0) * 127.5).astype(np.uint8).reshape(side, side, 3)


def write_preview(path, z, side: int) -> None:
    from PIL import Image

    Image.fromarray(preview_rgb(z, side), mode="RGB").save(path, format="PNG")


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(canonical_json(obj))


def read_json(path):
    return json.loads(Path(path).read_text())
