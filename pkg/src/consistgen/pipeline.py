"""Consistent batch generation: sampling loop, sharing graph, anchors, reuse.

A run denoises N images together. Each sampler step does an unconditional
pass, a vanilla conditional pass (which feeds the cross-attention store and
provides the vanilla queries), and, when sharing is on, a consistent
conditional pass with masked extended attention, query blending and feature
injection installed on the decoder layers.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .attention import NuSchedule, blend_queries, build_extended_mask, dropout_mask, dropout_rng
from .denoiser import (
    AttentionOverride,
    DenoiserConfig,
    DenoiserModel,
    PromptSpec,
    extract_features,
    forward_batch,
    init_denoiser,
)
from .injection import FeatureBank, build_correspondence, inject, select_sources
from .io import config_hash, fnv1a64, latent_digest
from .masking import CrossAttnStore, compute_mask, subject_token_maps, union_masks
from .metrics import EvalSummary, consistency_proxy, displacement_diversity
from .sampling import NoiseSchedule, cfg, ddim_step, ddpm_mean_std, ddpm_step

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "consistgen-run"
MANIFEST_VERSION = 1
EVAL_NOISE_SEED = 7919


class PipelineError(RuntimeError):
    pass


class TamperedManifestError(PipelineError):
    pass


@dataclass
class GenerationConfig:
    prompts: list[PromptSpec]
    seeds: list[int]
    steps: int = 50
    guidance_scale: float = 5.0
    dropout_p: float = 0.5
    alpha: float = 0.8
    nu: NuSchedule = field(default_factory=NuSchedule)
    fi_window: tuple[int, int] = (680, 900)
    dift_t: int = 261
    anchors: list[int] | str = field(default_factory=lambda: [0, 1])
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    run_seed: int = 0
    sdsa: bool = True
    feature_injection: bool = True
    query_blend: bool = True
    share_uncond: bool = True
    sampler: str = "ddim"
    inversion_guidance: float = 2.0
    dift_layer: int | None = None
    fi_layers: tuple[int, ...] | None = None

    def __post_init__(self):
        self.prompts = list(self.prompts)
        self.seeds = [int(s) for s in self.seeds]
        n = len(self.prompts)
        if len(self.seeds) != n:
            raise ValueError("need one seed per prompt")
        if self.sampler not in ("ddim", "ddpm"):
            raise ValueError(f"unknown sampler {self.sampler!r}")
        if not 0.0 <= self.dropout_p <= 1.0:
            raise ValueError("dropout_p must lie in [0, 1]")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        lo, hi = self.fi_window
        if not 0 <= lo <= hi <= NoiseSchedule().n_train_steps:
            raise ValueError(f"feature-injection window {self.fi_window} out of range")
        self.fi_window = (int(lo), int(hi))
        if self.anchors != "all":
            self.anchors = [int(a) for a in self.anchors]
            if len(set(self.anchors)) != len(self.anchors) or any(not 0 <= a < n for a in self.anchors):
                raise ValueError(f"anchors {self.anchors} must be distinct image indices < {n}")
        dec = self.denoiser.decoder_layers
        if self.dift_layer is not None and self.dift_layer not in dec:
            raise ValueError("dift_layer must be a decoder layer")
        if self.fi_layers is not None:
            self.fi_layers = tuple(int(x) for x in self.fi_layers)
            if set(self.fi_layers) - set(dec):
                raise ValueError("fi_layers must be decoder layers")

    @property
    def n_images(self) -> int:
        return len(self.prompts)

    @property
    def anchor_indices(self) -> list[int]:
        return list(range(self.n_images)) if self.anchors == "all" else sorted(self.anchors)

    @property
    def sharing(self) -> bool:
        return self.sdsa or (self.feature_injection and self.alpha > 0)

    @property
    def feature_layer(self) -> int:
        return self.denoiser.decoder_layers[0] if self.dift_layer is None else self.dift_layer

    @property
    def injection_layers(self) -> tuple[int, ...]:
        return self.denoiser.decoder_layers if self.fi_layers is None else self.fi_layers

    def vanilla(self) -> "GenerationConfig":
        return replace(self, sdsa=False, feature_injection=False, query_blend=False)

    def to_dict(self) -> dict:
        d = {
            "prompts": [prompt_to_dict(p) for p in self.prompts],
            "seeds": list(self.seeds),
            "steps": self.steps,
            "guidance_scale": self.guidance_scale,
            "dropout_p": self.dropout_p,
            "alpha": self.alpha,
            "nu": asdict(self.nu),
            "fi_window": list(self.fi_window),
            "dift_t": self.dift_t,
            "anchors": self.anchors if self.anchors == "all" else list(self.anchors),
            "denoiser": self.denoiser.to_dict(),
            "run_seed": self.run_seed,
            "sdsa": self.sdsa,
            "feature_injection": self.feature_injection,
            "query_blend": self.query_blend,
            "share_uncond": self.share_uncond,
            "sampler": self.sampler,
            "inversion_guidance": self.inversion_guidance,
            "dift_layer": self.dift_layer,
            "fi_layers": None if self.fi_layers is None else list(self.fi_layers),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        d["prompts"] = [prompt_from_dict(p) for p in d["prompts"]]
        d["nu"] = NuSchedule(**d["nu"])
        d["fi_window"] = tuple(d["fi_window"])
        d["denoiser"] = DenoiserConfig(**d["denoiser"])
        if d.get("fi_layers") is not None:
            d["fi_layers"] = tuple(d["fi_layers"])
        return cls(**d)


def prompt_to_dict(p: PromptSpec) -> dict:
    return {"text": p.text, "token_ids": list(p.token_ids),
            "subject_token_positions": [list(s) for s in p.subject_token_positions]}


def prompt_from_dict(d: dict) -> PromptSpec:
    return PromptSpec(tuple(d["token_ids"]), tuple(tuple(s) for s in d["subject_token_positions"]),
                      d.get("text", ""))


@dataclass
class RunTrace:
    """Optional per-step instrumentation of masks and extended-attention masks."""

    subject_masks: dict[tuple[int, int], list[np.ndarray]] = field(default_factory=dict)
    union: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    extended: dict[tuple[int, int, int], tuple[list[int], np.ndarray]] = field(default_factory=dict)
    fi_steps: list[int] = field(default_factory=list)
    plans: dict[tuple[int, int], object] = field(default_factory=dict)
    steps: list[tuple[int, int]] = field(default_factory=list)


@dataclass
class RunResult:
    config: GenerationConfig
    latents: list[np.ndarray]
    masks: list[np.ndarray]
    subject_masks: list[list[np.ndarray]]
    rng_checkpoints: list[str]
    bank: FeatureBank | None = None
    trace: RunTrace | None = None
    metrics: dict | None = None
    manifest: dict | None = None

    @property
    def digests(self) -> list[str]:
        return [latent_digest(z) for z in self.latents]


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("CONSISTORY_THREADS", "1")))
    except ValueError:
        return 1


@contextmanager
def image_mapper(n_threads: int | None = None):
    n_threads = thread_count() if n_threads is None else n_threads
    if n_threads <= 1:
        yield map
        return
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        yield pool.map


def initial_latent(seed: int, cfg: DenoiserConfig) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((cfg.n_patches, cfg.latent_channels))


def step_noise_rng(seed: int) -> np.random.Generator:
    """Per-image stream of DDPM step noise, separate from the initial latent."""
    return np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))


def nearest_step(pairs: Sequence[tuple[int, int]], t_target: int) -> int:
    return int(np.argmin([abs(t - t_target) for t, _ in pairs]))


def adain(keys, src_mean, src_std, tgt_mean, tgt_std, eps: float = 1e-12) -> np.ndarray:
    """Shift/scale each key channel from source to target statistics."""
    keys = np.asarray(keys, dtype=np.float64)
    return (keys - src_mean) / (np.asarray(src_std) + eps) * tgt_std + tgt_mean


def key_stats(keys) -> tuple[np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.float64)
    return keys.mean(axis=0), keys.std(axis=0)


@dataclass
class _Slot:
    """One image in a run: generated from a seed or replaying an inverted anchor."""

    prompt: PromptSpec
    seed: int
    inverted: "InvertedAnchor | None" = None


class _Engine:
    def __init__(self, config: GenerationConfig, model: DenoiserModel, slots: list[_Slot],
                 sdsa_sources: Callable[[int], list[int] | None],
                 fi_sources: Callable[[int], list[int]],
                 trace: RunTrace | None = None, map_fn=map):
        self.config = config
        self.model = model
        self.slots = slots
        self.sdsa_sources = sdsa_sources
        self.fi_sources = fi_sources
        self.trace = trace
        self.map_fn = map_fn
        self.schedule = model.schedule
        self.pairs = self.schedule.step_pairs(config.steps)
        self.n = len(slots)
        self.P = model.config.n_patches
        self.inverted = [i for i, s in enumerate(slots) if s.inverted is not None]
        self.generated = [i for i, s in enumerate(slots) if s.inverted is None]
        for i in self.inverted:
            if slots[i].inverted.pairs != self.pairs:
                raise PipelineError("inverted anchor was built with a different step grid")
        self.rng_checkpoints: list[str] = []

    def _prompts(self, idx):
        return [self.slots[i].prompt for i in idx]

    def _guidance(self, i: int) -> float:
        return self.config.inversion_guidance if self.slots[i].inverted else self.config.guidance_scale

    def _advance(self, i, z, eps, step, noise_rngs):
        t, t_prev = self.pairs[step]
        slot = self.slots[i]
        if slot.inverted is not None:
            mean, sigma = ddpm_mean_std(z, eps, t, t_prev, self.schedule)
            return mean + sigma * slot.inverted.noise_maps[step]
        if self.config.sampler == "ddim":
            return ddim_step(z, eps, t, t_prev, self.schedule)
        noise = noise_rngs[i].standard_normal(z.shape)
        return ddpm_step(z, eps, t, t_prev, noise, self.schedule)

    def _start(self):
        zs, rngs = [], []
        for slot in self.slots:
            if slot.inverted is not None:
                zs.append(slot.inverted.trajectory[0].copy())
                rngs.append(None)
            else:
                zs.append(initial_latent(slot.seed, self.model.config))
                rngs.append(step_noise_rng(slot.seed))
        return zs, rngs

    def feature_bank(self) -> FeatureBank:
        """First sweep: vanilla denoising down to the feature timestep."""
        layer = self.config.feature_layer
        k_feat = nearest_step(self.pairs, self.config.dift_t)
        feats = {}
        for i in self.inverted:
            feats[i] = self.slots[i].inverted.features
        idx = self.generated
        if idx:
            zs_all, rngs = self._start()
            zs = [zs_all[i] for i in idx]
            prompts = self._prompts(idx)
            for step in range(k_feat + 1):
                t, _ = self.pairs[step]
                eps_c, recs = forward_batch(self.model, zs, t, prompts, map_fn=self.map_fn)
                if step == k_feat:
                    for j, i in enumerate(idx):
                        feats[i] = recs[j].features[layer]
                    break
                eps_u, _ = forward_batch(self.model, zs, t, prompts, guidance_null=True, map_fn=self.map_fn)
                zs = [self._advance(i, zs[j], cfg(eps_c[j], eps_u[j], self._guidance(i)), step, rngs)
                      for j, i in enumerate(idx)]
        return FeatureBank(feats)

    def run(self) -> RunResult:
        cfg_ = self.config
        model = self.model
        idx = list(range(self.n))
        prompts = self._prompts(idx)
        store = CrossAttnStore(self.P)
        bank = None
        corr = {}
        use_fi = cfg_.feature_injection and cfg_.alpha > 0
        if use_fi:
            bank = self.feature_bank()
            for t_img in idx:
                for s in self.fi_sources(t_img):
                    corr[(t_img, s)] = build_correspondence(bank, t_img, s)

        zs, rngs = self._start()
        subject_masks = [[] for _ in idx]
        unions = [None] * self.n
        for step, (t, t_prev) in enumerate(self.pairs):
            if self.trace is not None:
                self.trace.steps.append((t, t_prev))
            eps_u, rec_u = forward_batch(model, zs, t, prompts, guidance_null=True, map_fn=self.map_fn)
            eps_v, rec_v = forward_batch(model, zs, t, prompts, map_fn=self.map_fn)
            for i in idx:
                positions = self.slots[i].prompt.subject_token_positions
                if not positions:
                    continue
                for layer, cmap in enumerate(rec_v[i].cross_attn_maps):
                    store.record_maps(i, step, layer, subject_token_maps(cmap, positions))
            for i in idx:
                if self.slots[i].prompt.subject_token_positions:
                    subject_masks[i] = [compute_mask(store, i, s).bits
                                        for s in range(self.slots[i].prompt.n_subjects)]
                    unions[i] = union_masks(subject_masks[i])
                    if self.trace is not None:
                        self.trace.subject_masks[(step, i)] = subject_masks[i]
                        self.trace.union[(step, i)] = unions[i]

            eps_cond, eps_null = eps_v, eps_u
            if cfg_.sharing:
                override = self._consistent_override(step, rec_v, unions, bank, corr, use_fi)
                eps_cond, _ = forward_batch(model, zs, t, prompts, override=override(rec_v, False),
                                            map_fn=self.map_fn)
                if cfg_.share_uncond:
                    eps_null, _ = forward_batch(model, zs, t, prompts, guidance_null=True,
                                                override=override(rec_u, True), map_fn=self.map_fn)
            zs = [self._advance(i, zs[i], cfg(eps_cond[i], eps_null[i], self._guidance(i)), step, rngs)
                  for i in idx]
            for i in idx:
                if not np.all(np.isfinite(zs[i])):
                    raise PipelineError(f"non-finite latent for image {i} at step {step} (t={t})")

        return RunResult(cfg_, zs, [u if u is not None else np.ones(self.P, np.uint8) for u in unions],
                         subject_masks, self.rng_checkpoints, bank, self.trace)

    def _consistent_override(self, step, rec_v, unions, bank, corr, use_fi):
        """Draw this step's dropout and FI plans; return a factory of per-branch overrides.

        Both guidance branches share the dropout draws, masks and FI plans; only
        the vanilla queries used for blending differ per branch.
        """
        cfg_ = self.config
        t, _ = self.pairs[step]
        sources = {i: self.sdsa_sources(i) for i in range(self.n)} if cfg_.sdsa else {}
        for i, src in sources.items():
            for j in src or ():
                if j != i and unions[j] is None:
                    raise PipelineError(f"image {j} has no subject to share")

        dropped = {}
        for i, src in sources.items():
            for j in src or ():
                if j != i:
                    # keyed by the unordered pair so twin images thin each other identically
                    dropped[(i, j)] = dropout_mask(unions[j], cfg_.dropout_p,
                                                   dropout_rng(cfg_.run_seed, step, min(i, j), max(i, j)))
        drawn = b"".join(dropped[k].tobytes() for k in sorted(dropped))
        self.rng_checkpoints.append(f"{fnv1a64(drawn):016x}")

        def kv_provider(layer, i, qkv, adain_stats, null):
            src = sources.get(i)
            if not src or src == [i]:
                return None
            # self block first: twin images then build byte-identical bundles
            if i in src:
                src = [i] + [j for j in src if j != i]
            keys = []
            for j in src:
                k = qkv.K[j]
                if self.slots[j].inverted is not None and j != i:
                    k = self._aligned_keys(layer, step, j, qkv, adain_stats, null)
                keys.append(k)
            k_plus = np.concatenate(keys, axis=0)
            v_plus = np.concatenate([qkv.V[j] for j in src], axis=0)
            m_plus = build_extended_mask(i, self.P, [(j, None if j == i else dropped[(i, j)]) for j in src])
            if self.trace is not None:
                self.trace.extended[(step, layer, i)] = (list(src), m_plus)
            return k_plus, v_plus, m_plus

        def query_transform(layer, i, q, rec):
            if self.slots[i].inverted is not None:
                return q
            return blend_queries(q, rec[i].Q[layer], step, cfg_.nu)

        plans = {}
        lo, hi = cfg_.fi_window
        if use_fi and lo <= t <= hi:
            for i in range(self.n):
                fs = self.fi_sources(i)
                if fs and unions[i] is not None:
                    plans[i] = select_sources(bank, i, unions[i], fs, {s: corr[(i, s)] for s in fs})
            if self.trace is not None:
                self.trace.fi_steps.append(step)
                for i, plan in plans.items():
                    self.trace.plans[(step, i)] = plan

        def output_transform(layer, x_outs):
            if layer not in cfg_.injection_layers:
                return x_outs
            out = list(x_outs)
            for i, plan in plans.items():
                out[i] = inject(x_outs[i], {s: x_outs[s] for s in self.fi_sources(i)}, plan, cfg_.alpha)
            return out

        def make(rec, null):
            adain_cache = {}
            blend = cfg_.sdsa and cfg_.query_blend
            return AttentionOverride(
                layers=self.model.config.decoder_layers,
                kv_provider=(lambda layer, i, qkv: kv_provider(layer, i, qkv, adain_cache, null)) if cfg_.sdsa else None,
                query_transform=(lambda layer, i, q: query_transform(layer, i, q, rec)) if blend else None,
                output_transform=output_transform if plans else None,
            )

        return make

    def _aligned_keys(self, layer, step, j, qkv, cache, null=False):
        key = (layer, j)
        if key not in cache:
            gen_keys = np.concatenate([qkv.K[g] for g in self.generated], axis=0)
            tgt_mean, tgt_std = key_stats(gen_keys)
            inv = self.slots[j].inverted
            src_mean, src_std = (inv.null_key_stats if null else inv.key_stats)[step][layer]
            cache[key] = adain(qkv.K[j], src_mean, src_std, tgt_mean, tgt_std)
        return cache[key]


def _anchor_graph(config: GenerationConfig):
    anchors = config.anchor_indices
    aset = set(anchors)

    def sdsa_sources(i):
        if i in aset:
            return list(anchors)
        return sorted(aset | {i})

    def fi_sources(i):
        return [a for a in anchors if a != i]

    return sdsa_sources, fi_sources


def eval_bank(model: DenoiserModel, latents: Sequence[np.ndarray], t: int, layer: int,
              seed: int = EVAL_NOISE_SEED) -> FeatureBank:
    """Correspondence features of finished latents, re-noised with a shared noise draw."""
    noise = np.random.default_rng(seed).standard_normal(np.shape(latents[0]))
    feats = {}
    for i, z in enumerate(latents):
        zt = model.schedule.add_noise(z, noise, t)
        feats[i] = extract_features(model, zt, t, None, layer, guidance_null=True)
    return FeatureBank(feats)


def evaluate_latents(model: DenoiserModel, config: GenerationConfig, latents, masks) -> EvalSummary:
    bank = eval_bank(model, latents, config.dift_t, config.feature_layer)
    mask_map = dict(enumerate(masks))
    return EvalSummary(
        consistency=consistency_proxy(bank, mask_map),
        diversity=displacement_diversity(bank),
        diversity_masked=displacement_diversity(bank, mask_map),
    )


def generate(config: GenerationConfig, model: DenoiserModel | None = None, trace: RunTrace | None = None,
             evaluate: bool = True) -> RunResult:
    if config.n_images < 2:
        raise ValueError("consistent generation needs at least 2 images")
    for i, p in enumerate(config.prompts):
        if config.sharing and not p.subject_token_positions:
            raise ValueError(f"prompt {i} has no subject token")
    model = model or init_denoiser(config.denoiser)
    slots = [_Slot(p, s) for p, s in zip(config.prompts, config.seeds)]
    sdsa_sources, fi_sources = _anchor_graph(config)
    with image_mapper() as map_fn:
        engine = _Engine(config, model, slots, sdsa_sources, fi_sources, trace, map_fn)
        result = engine.run()
    if evaluate:
        summary = evaluate_latents(model, config, result.latents, result.masks)
        result.metrics = {"consistency": summary.consistency.aggregate,
                          "diversity": summary.diversity.aggregate,
                          "diversity_masked": summary.diversity_masked.aggregate}
    result.manifest = build_manifest(result)
    return result


def build_manifest(result: RunResult) -> dict:
    cfg_d = result.config.to_dict()
    anchors = result.config.anchor_indices
    images = []
    for i, (p, seed, z) in enumerate(zip(result.config.prompts, result.config.seeds, result.latents)):
        images.append({
            "index": i,
            "prompt": p.text,
            "seed": seed,
            "anchor": i in anchors,
            "latent": f"latents/{i:02d}.cstl",
            "digest": latent_digest(z),
            "mask": "".join(str(int(b)) for b in result.masks[i]),
        })
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "config_hash": config_hash(cfg_d),
        "config": cfg_d,
        "anchors": anchors,
        "images": images,
        "rng": {"dropout_seed": result.config.run_seed,
                "stream_key": "SeedSequence([run_seed, step, min(target, source), max(target, source)])",
                "step_checkpoints": list(result.rng_checkpoints)},
        "metrics": result.metrics or {},
    }


def config_from_manifest(manifest: dict) -> GenerationConfig:
    if manifest.get("format") != MANIFEST_FORMAT:
        raise PipelineError("not a run manifest")
    if config_hash(manifest["config"]) != manifest.get("config_hash"):
        raise TamperedManifestError("manifest config does not match its config hash")
    return GenerationConfig.from_dict(manifest["config"])


def replay(manifest: dict, model: DenoiserModel | None = None) -> RunResult:
    return generate(config_from_manifest(manifest), model)


def reuse_subject(manifest: dict, new_prompts: Sequence[PromptSpec], new_seeds: Sequence[int],
                  model: DenoiserModel | None = None) -> RunResult:
    """Re-create the manifest's anchors next to new non-anchor prompts.

    Anchors keep their slot indices, prompts and seeds; the remaining slots are
    filled in order from ``new_prompts``. Raises if any anchor's output digest
    differs from the original run.
    """
    old = config_from_manifest(manifest)
    if old.anchors == "all":
        raise PipelineError("reuse needs an explicit anchor subset")
    anchors = old.anchor_indices
    if len(new_prompts) != len(new_seeds):
        raise ValueError("need one seed per new prompt")
    n = len(anchors) + len(new_prompts)
    if max(anchors) >= n:
        raise PipelineError("too few new prompts to keep anchor slot indices")
    prompts, seeds = [], []
    it = iter(zip(new_prompts, new_seeds))
    for pos in range(n):
        if pos in anchors:
            prompts.append(old.prompts[pos])
            seeds.append(old.seeds[pos])
        else:
            p, s = next(it)
            prompts.append(p)
            seeds.append(s)
    config = replace(old, prompts=prompts, seeds=seeds)
    result = generate(config, model)
    originals = {img["index"]: img["digest"] for img in manifest["images"]}
    for a in anchors:
        if result.digests[a] != originals[a]:
            raise TamperedManifestError(f"anchor {a} could not be re-created bit-exactly")
    return result


# -- personalization -----------------------------------------------------------------------------


@dataclass
class InvertedAnchor:
    z0: np.ndarray
    prompt: PromptSpec
    pairs: list[tuple[int, int]]
    trajectory: list[np.ndarray]          # x_t at each grid time, trajectory[0] at t = T
    noise_maps: list[np.ndarray]
    key_stats: list[dict[int, tuple[np.ndarray, np.ndarray]]]
    null_key_stats: list[dict[int, tuple[np.ndarray, np.ndarray]]]
    features: np.ndarray
    guidance_scale: float


def invert_anchor(z0, prompt: PromptSpec, config: GenerationConfig, model: DenoiserModel | None = None,
                  seed: int = 0) -> InvertedAnchor:
    """Edit-friendly DDPM inversion of a clean latent.

    Every grid time gets an independently noised copy of ``z0``; each reverse
    step's noise map is then solved so that the step lands exactly on the next
    copy.
    """
    model = model or init_denoiser(config.denoiser)
    z0 = np.asarray(z0, dtype=np.float64)
    if not np.all(np.isfinite(z0)):
        raise ValueError("latent contains non-finite values")
    sched = model.schedule
    pairs = sched.step_pairs(config.steps)
    rng = np.random.default_rng(seed)
    traj = [sched.add_noise(z0, rng.standard_normal(z0.shape), t) for t, _ in pairs]
    targets = traj[1:] + [z0]
    k_feat = nearest_step(pairs, config.dift_t)
    noise_maps, stats, null_stats, features = [], [], [], None
    for step, (t, t_prev) in enumerate(pairs):
        eps_c, rec = forward_batch(model, [traj[step]], t, [prompt])
        eps_u, rec_u = forward_batch(model, [traj[step]], t, [prompt], guidance_null=True)
        eps = cfg(eps_c[0], eps_u[0], config.inversion_guidance)
        mean, sigma = ddpm_mean_std(traj[step], eps, t, t_prev, sched)
        zmap = (targets[step] - mean) / sigma
        if not np.all(np.isfinite(zmap)):
            raise PipelineError(f"non-finite noise map at step {step} (t={t})")
        noise_maps.append(zmap)
        stats.append({l: key_stats(rec[0].K[l]) for l in model.config.decoder_layers})
        null_stats.append({l: key_stats(rec_u[0].K[l]) for l in model.config.decoder_layers})
        if step == k_feat:
            features = rec[0].features[config.feature_layer]
    return InvertedAnchor(z0, prompt, pairs, traj, noise_maps, stats, null_stats, features,
                          config.inversion_guidance)


def replay_inverted(anchor: InvertedAnchor, model: DenoiserModel) -> np.ndarray:
    """Run the reverse process with the stored noise maps; returns the clean latent."""
    z = anchor.trajectory[0].copy()
    for step, (t, t_prev) in enumerate(anchor.pairs):
        eps_c, _ = forward_batch(model, [z], t, [anchor.prompt])
        eps_u, _ = forward_batch(model, [z], t, [anchor.prompt], guidance_null=True)
        mean, sigma = ddpm_mean_std(z, cfg(eps_c[0], eps_u[0], anchor.guidance_scale), t, t_prev, model.schedule)
        z = mean + sigma * anchor.noise_maps[step]
    return z


def personalization_config(prompts, seeds, **overrides) -> GenerationConfig:
    base = dict(steps=100, sampler="ddpm", anchors=[0, 1])
    base.update(overrides)
    return GenerationConfig(prompts=prompts, seeds=seeds, **base)


def personalize(inverted: Sequence[InvertedAnchor], new_prompts: Sequence[PromptSpec],
                new_seeds: Sequence[int], config: GenerationConfig,
                model: DenoiserModel | None = None, trace: RunTrace | None = None) -> RunResult:
    """Generate images that borrow the appearance of two inverted real anchors.

    Anchors occupy slots 0 and 1, replay their noise maps and never receive
    shared keys; generated images attend to both anchors, whose keys are
    AdaIN-aligned to the generated batch.
    """
    if len(inverted) != 2:
        raise PipelineError(f"personalization uses exactly 2 inverted anchors, got {len(inverted)}")
    if config.sampler != "ddpm":
        raise PipelineError("personalization requires the DDPM sampler")
    model = model or init_denoiser(config.denoiser)
    slots = [_Slot(a.prompt, -1, a) for a in inverted]
    slots += [_Slot(p, s) for p, s in zip(new_prompts, new_seeds)]
    run_cfg = replace(config, prompts=[s.prompt for s in slots],
                      seeds=[s.seed for s in slots], anchors=[0, 1])
    anchors = {0, 1}

    def sdsa_sources(i):
        return None if i in anchors else [0, 1, i]

    def fi_sources(i):
        return [] if i in anchors else [0, 1]

    with image_mapper() as map_fn:
        engine = _Engine(run_cfg, model, slots, sdsa_sources, fi_sources, trace, map_fn)
        result = engine.run()
    result.manifest = build_manifest(result)
    return result
