"""A deterministic toy denoiser with attention hook points.

The network is a stack of (cross-attention, self-attention) block pairs over
a latent_side x latent_side grid of patches. Weights are fixed random draws
from ``weight_seed``; nothing is trained. The last ``n_decoder_layers``
self-attention blocks are the "decoder" layers where attention overrides may
be installed.

Two draws are structured rather than plain Gaussian so that attention moves
content instead of noise: each self-attention value map is semi-orthogonal
with the output map its scaled transpose, and the output head is the
pseudo-inverse of the input embedding. A self-attention layer then averages
normalized patch features, and the head reads a clean latent back out of them.

Images in a batch are processed layer by layer so that an override on layer
``l`` can see every image's keys and values for that layer. All per-image
arithmetic is done with per-image 2-D matrix products, so an image's result
never depends on which other images share its batch.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .numerics import masked_softmax_rows, softmax_rows
from .sampling import T_MAX, NoiseSchedule


@dataclass(frozen=True)
class DenoiserConfig:
    latent_side: int = 16
    latent_channels: int = 4
    d: int = 32
    d_k: int = 32
    d_v: int = 32
    d_cross: int = 32
    n_self_layers: int = 4
    n_decoder_layers: int = 2
    vocab_size: int = 4096
    token_dim: int = 32
    max_tokens: int = 77
    weight_seed: int = 0
    # fixed gains of the toy architecture
    pos_scale: float = 4.0
    cross_temperature: float = 2.0
    self_attn_gain: float = 2.0
    attn_out_gain: float = 3.0
    head_gain: float = 1.0

    def __post_init__(self):
        dims = ("latent_side", "latent_channels", "d", "d_k", "d_v", "d_cross",
                "n_self_layers", "vocab_size", "token_dim", "max_tokens")
        for name in dims:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.n_decoder_layers <= self.n_self_layers:
            raise ValueError("n_decoder_layers must lie in [0, n_self_layers]")

    @property
    def n_patches(self) -> int:
        return self.latent_side ** 2

    @property
    def decoder_layers(self) -> tuple[int, ...]:
        return tuple(range(self.n_self_layers - self.n_decoder_layers, self.n_self_layers))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PromptSpec:
    token_ids: tuple[int, ...]
    subject_token_positions: tuple[tuple[int, ...], ...] = ()
    text: str = ""

    def __post_init__(self):
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        object.__setattr__(self, "subject_token_positions",
                           tuple(tuple(int(p) for p in s) for s in self.subject_token_positions))
        if not self.token_ids:
            raise ValueError("prompt has no tokens")
        for subject in self.subject_token_positions:
            if not subject:
                raise ValueError("subject with no token positions")
            for p in subject:
                if not 0 <= p < len(self.token_ids):
                    raise ValueError(f"subject token position {p} out of range")

    @property
    def n_subjects(self) -> int:
        return len(self.subject_token_positions)


@dataclass
class SelfAttentionWeights:
    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray


@dataclass
class CrossAttentionWeights:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray


@dataclass
class DenoiserModel:
    config: DenoiserConfig
    W_in: np.ndarray
    W_local: np.ndarray
    pos_emb: np.ndarray
    W_time: np.ndarray
    token_emb: np.ndarray
    token_pos_emb: np.ndarray
    null_emb: np.ndarray
    cross: list[CrossAttentionWeights]
    self_attn: list[SelfAttentionWeights]
    W_head: np.ndarray
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    def arrays(self):
        """Every weight array in a fixed order."""
        yield from (self.W_in, self.W_local, self.pos_emb, self.W_time, self.token_emb,
                    self.token_pos_emb, self.null_emb)
        for c in self.cross:
            yield from (c.W_q, c.W_k, c.W_v, c.W_o)
        for s in self.self_attn:
            yield from (s.W_Q, s.W_K, s.W_V, s.W_O)
        yield self.W_head


@dataclass
class ActivationRecord:
    """Per-forward capture, indexed by self-attention layer."""

    Q: list[np.ndarray] = field(default_factory=list)
    K: list[np.ndarray] = field(default_factory=list)
    V: list[np.ndarray] = field(default_factory=list)
    h: list[np.ndarray] = field(default_factory=list)
    x_out: list[np.ndarray] = field(default_factory=list)
    cross_attn_maps: list[np.ndarray] = field(default_factory=list)  # P x n_tokens each

    @property
    def features(self) -> list[np.ndarray]:
        # correspondence features: pre-projection self-attention activations
        return self.h


@dataclass
class LayerQKV:
    """Keys, values and (un-transformed) queries of every image at one layer."""

    layer: int
    Q: list[np.ndarray]
    K: list[np.ndarray]
    V: list[np.ndarray]


KVProvider = Callable[[int, int, LayerQKV], "tuple[np.ndarray, np.ndarray, np.ndarray] | None"]
QueryTransform = Callable[[int, int, np.ndarray], np.ndarray]
OutputTransform = Callable[[int, list], list]


@dataclass
class AttentionOverride:
    """Callbacks installed on decoder self-attention layers.

    ``kv_provider(layer, image, qkv)`` returns ``(K_plus, V_plus, mask)`` for
    masked extended attention, or None to keep the layer's own attention.
    ``query_transform(layer, image, Q)`` returns the query actually used.
    ``output_transform(layer, x_outs)`` maps the list of all images'
    projected outputs before the residual add.
    """

    layers: tuple[int, ...]
    kv_provider: KVProvider | None = None
    query_transform: QueryTransform | None = None
    output_transform: OutputTransform | None = None


def _normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) / math.sqrt(fan_in)


def _semi_orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    """rows x cols with orthonormal columns (rows >= cols) or rows (rows < cols)."""
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q if rows >= cols else q.T


def _fourier_positions(rng: np.random.Generator, side: int, d: int) -> np.ndarray:
    rows, cols = np.divmod(np.arange(side * side), side)
    coords = np.stack([rows, cols], axis=1).astype(np.float64) / side
    freqs = rng.standard_normal((2, (d + 1) // 2)) * 2.0
    phase = 2.0 * math.pi * coords @ freqs
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=1)[:, :d]


def init_denoiser(config: DenoiserConfig) -> DenoiserModel:
    """Draw all weights from ``config.weight_seed``; equal configs give equal models."""
    rng = np.random.default_rng(np.random.SeedSequence(config.weight_seed))
    c, d = config.latent_channels, config.d

    cross = []
    self_attn = []
    for _ in range(config.n_self_layers):
        cross.append(CrossAttentionWeights(
            W_q=_normal(rng, (d, config.d_cross), d),
            W_k=_normal(rng, (config.token_dim, config.d_cross), config.token_dim),
            W_v=_normal(rng, (config.token_dim, d), config.token_dim),
            W_o=_normal(rng, (d, d), d),
        ))
        W_V = _semi_orthogonal(rng, d, config.d_v)
        self_attn.append(SelfAttentionWeights(
            W_Q=config.self_attn_gain * _normal(rng, (d, config.d_k), d),
            W_K=config.self_attn_gain * _normal(rng, (d, config.d_k), d),
            W_V=W_V,
            W_O=config.attn_out_gain * W_V.T,
        ))

    W_in = _normal(rng, (c, d), c)
    model = DenoiserModel(
        config=config,
        W_in=W_in,
        W_local=_normal(rng, (c, d), c),
        pos_emb=config.pos_scale * _fourier_positions(rng, config.latent_side, d),
        W_time=_normal(rng, (d, d), d),
        token_emb=rng.standard_normal((config.vocab_size, config.token_dim)),
        token_pos_emb=0.5 * rng.standard_normal((config.max_tokens, config.token_dim)),
        null_emb=rng.standard_normal((1, config.token_dim)),
        cross=cross,
        self_attn=self_attn,
        W_head=np.linalg.pinv(W_in),
    )
    for arr in model.arrays():
        arr.flags.writeable = False
    return model


def time_embedding(t: float, d: int) -> np.ndarray:
    half = (d + 1) // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    angles = float(t) * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])[:d]


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-6)


def _local_mean(z: np.ndarray, side: int) -> np.ndarray:
    """3x3 box average over the patch grid (edge-replicated)."""
    grid = z.reshape(side, side, -1)
    padded = np.pad(grid, ((1, 1), (1, 1), (0, 0)), mode="edge")
    acc = np.zeros_like(grid)
    for dr in range(3):
        for dc in range(3):
            acc = acc + padded[dr:dr + side, dc:dc + side]
    return (acc / 9.0).reshape(side * side, -1)


def embed_prompt(model: DenoiserModel, prompt: PromptSpec | None, guidance_null: bool) -> np.ndarray:
    if guidance_null or prompt is None:
        return model.null_emb
    cfg = model.config
    ids = np.asarray(prompt.token_ids)
    if len(ids) > cfg.max_tokens:
        raise ValueError(f"prompt has {len(ids)} tokens, limit is {cfg.max_tokens}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary")
    return model.token_emb[ids] + model.token_pos_emb[: len(ids)]


def _check_latent(model: DenoiserModel, z) -> np.ndarray:
    cfg = model.config
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (cfg.n_patches, cfg.latent_channels):
        raise ValueError(f"latent shape {z.shape} != {(cfg.n_patches, cfg.latent_channels)}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent contains non-finite values")
    return z


def forward_batch(
    model: DenoiserModel,
    zs: Sequence[np.ndarray],
    t: int,
    prompts: Sequence[PromptSpec | None],
    guidance_null: bool = False,
    override: AttentionOverride | None = None,
    map_fn: Callable = map,
) -> tuple[list[np.ndarray], list[ActivationRecord]]:
    """Run the denoiser on several images in layer lockstep.

    ``map_fn`` distributes per-image work (builtin ``map`` or an executor's
    ``map``); each layer acts as a barrier across images.
    """
    cfg = model.config
    if not 0 <= t <= T_MAX:
        raise ValueError(f"timestep {t} outside [0, {T_MAX}]")
    if len(zs) != len(prompts):
        raise ValueError("need one prompt per latent")
    if override is not None:
        bad = set(override.layers) - set(cfg.decoder_layers)
        if bad:
            raise ValueError(f"override references non-decoder layers {sorted(bad)}")
    zs = [_check_latent(model, z) for z in zs]
    n = len(zs)
    idx = range(n)
    side = cfg.latent_side
    t_emb = time_embedding(t, cfg.d) @ model.W_time
    texts = [embed_prompt(model, p, guidance_null) for p in prompts]
    records = [ActivationRecord() for _ in idx]
    scale_k = 1.0 / math.sqrt(cfg.d_k)
    scale_c = cfg.cross_temperature / math.sqrt(cfg.d_cross)

    def embed(i):
        z = zs[i]
        return z @ model.W_in + _local_mean(z, side) @ model.W_local + model.pos_emb + t_emb

    xs = list(map_fn(embed, idx))

    for layer in range(cfg.n_self_layers):
        cw = model.cross[layer]
        sw = model.self_attn[layer]

        def cross_block(i):
            xn = _layer_norm(xs[i])
            e = texts[i]
            a = softmax_rows((xn @ cw.W_q) @ (e @ cw.W_k).T * scale_c)
            return xs[i] + (a @ (e @ cw.W_v)) @ cw.W_o, a

        out = list(map_fn(cross_block, idx))
        xs = [o[0] for o in out]
        for i in idx:
            records[i].cross_attn_maps.append(out[i][1])

        def project(i):
            xn = _layer_norm(xs[i])
            return xn @ sw.W_Q, xn @ sw.W_K, xn @ sw.W_V

        qkv = list(map_fn(project, idx))
        bundle = LayerQKV(layer, [q for q, _, _ in qkv], [k for _, k, _ in qkv], [v for _, _, v in qkv])
        active = override is not None and layer in override.layers

        def attend(i):
            q, k, v = qkv[i]
            if active and override.query_transform is not None:
                q = override.query_transform(layer, i, q)
            ext = override.kv_provider(layer, i, bundle) if active and override.kv_provider else None
            if ext is None:
                a = softmax_rows(q @ k.T * scale_k)
                return a @ v
            k_plus, v_plus, m_plus = ext
            return masked_softmax_rows(q @ np.asarray(k_plus).T * scale_k, m_plus) @ np.asarray(v_plus)

        hs = list(map_fn(attend, idx))
        x_outs = [h @ sw.W_O for h in hs]
        if active and override.output_transform is not None:
            x_outs = list(override.output_transform(layer, x_outs))
        for i in idx:
            r = records[i]
            r.Q.append(qkv[i][0])
            r.K.append(qkv[i][1])
            r.V.append(qkv[i][2])
            r.h.append(hs[i])
            r.x_out.append(x_outs[i])
        xs = [xs[i] + x_outs[i] for i in idx]

    ab = model.schedule.alpha_bar(max(t, 1))

    def head(i):
        # linear head predicts the clean latent; report it as noise
        z0 = cfg.head_gain * (_layer_norm(xs[i]) @ model.W_head)
        return (zs[i] - math.sqrt(ab) * z0) / math.sqrt(1.0 - ab)

    return list(map_fn(head, idx)), records


def forward(
    model: DenoiserModel,
    z_t,
    t: int,
    prompt: PromptSpec | None,
    guidance_null: bool = False,
    override: AttentionOverride | None = None,
) -> tuple[np.ndarray, ActivationRecord]:
    eps, records = forward_batch(model, [z_t], t, [prompt], guidance_null, override)
    return eps[0], records[0]


def extract_features(model: DenoiserModel, z_t, t: int, prompt: PromptSpec | None, layer: int,
                     guidance_null: bool = False) -> np.ndarray:
    """Correspondence features (pre-projection activations) of a decoder layer."""
    if layer not in model.config.decoder_layers:
        raise ValueError(f"layer {layer} is not a decoder layer {model.config.decoder_layers}")
    _, record = forward(model, z_t, t, prompt, guidance_null)
    return record.features[layer]
